//! Structural tree difference.
//!
//! Top-down recursion with per-level child alignment. Children are aligned by
//! a weighted longest common subsequence: only nodes of the same kind (and,
//! for elements, the same tag) may be paired, and pairings are ranked by
//!
//! 1. the pre child embeds into the post child ([`node_embeds`]),
//! 2. the two children are identical,
//! 3. the two children carry the same `id` attribute,
//! 4. any same-tag pairing,
//!
//! compared lexicographically. Ranking embeddings first means an insert-only
//! edit is always reported with Insert entries alone. Ties go to the earliest
//! post child, so appended siblings are reported as appends.
//!
//! Unpaired pre children become Deletes, unpaired post children Inserts, and
//! paired nodes contribute attribute/text Updates plus their own recursion.
//! When a paired element's attribute change cannot be expressed as a sequence
//! of invertible attribute updates, the node is replaced (Delete + Insert).

use std::cmp::Ordering;
use std::ops::Add;

use crate::dom::{node_embeds, DomNode, DomTree, Element, NodePath};
use crate::patch::{PatchEntry, UpdateTarget};

/// Computes a patch turning `pre` into `post`. Positions are adjusted
/// left-to-right. Empty iff the trees are equal.
pub fn diff(pre: &DomTree, post: &DomTree) -> Vec<PatchEntry> {
    let mut out = Vec::new();
    if pre.ptr_eq(post) {
        return out;
    }
    diff_nodes(pre.root(), post.root(), &mut Vec::new(), &mut out);
    out
}

/// Node-level diff; `pre` sits at `path` in the tree being patched.
pub fn diff_nodes(pre: &DomNode, post: &DomNode, path: &mut Vec<usize>, out: &mut Vec<PatchEntry>) {
    if pre == post {
        return;
    }
    if !diff_paired(pre, post, path, out) {
        out.push(PatchEntry::Delete {
            at: NodePath(path.clone()),
            node: Some(pre.clone()),
        });
        out.push(PatchEntry::Insert {
            at: NodePath(path.clone()),
            node: post.clone(),
        });
    }
}

/// Emits entries for a paired node. Returns `false` (emitting nothing) when
/// the pair cannot be edited in place and must be replaced.
fn diff_paired(pre: &DomNode, post: &DomNode, path: &mut Vec<usize>, out: &mut Vec<PatchEntry>) -> bool {
    match (pre, post) {
        (DomNode::Text(a), DomNode::Text(b)) => {
            if a != b {
                out.push(PatchEntry::Update {
                    at: NodePath(path.clone()),
                    target: UpdateTarget::Text,
                    old: Some(a.clone()),
                    new: Some(b.clone()),
                });
            }
            true
        }
        (DomNode::Element(a), DomNode::Element(b)) if a.tag() == b.tag() => {
            let Some(updates) = attribute_updates(a, b, path) else {
                return false;
            };
            out.extend(updates);
            diff_children(&a.children, &b.children, path, out);
            true
        }
        _ => false,
    }
}

/// Attribute updates turning `a`'s attribute list into `b`'s, or `None` when
/// the change is not expressible invertibly (removed attributes must form a
/// suffix of `a`'s list, additions are appended, survivors keep their order).
fn attribute_updates(a: &Element, b: &Element, path: &[usize]) -> Option<Vec<PatchEntry>> {
    if a.attrs() == b.attrs() {
        return Some(Vec::new());
    }
    let kept: Vec<&(String, String)> = a.attrs().iter().filter(|(n, _)| b.attr(n).is_some()).collect();
    let removed: Vec<&(String, String)> = a.attrs().iter().filter(|(n, _)| b.attr(n).is_none()).collect();
    let added: Vec<&(String, String)> = b.attrs().iter().filter(|(n, _)| a.attr(n).is_none()).collect();

    if a.attrs()[..kept.len()].iter().any(|(n, _)| b.attr(n).is_none()) {
        return None;
    }
    let expected_names = kept.iter().chain(added.iter()).map(|(n, _)| n);
    if !expected_names.eq(b.attrs().iter().map(|(n, _)| n)) {
        return None;
    }

    let at = NodePath(path.to_vec());
    let update = |name: &str, old: Option<&str>, new: Option<&str>| PatchEntry::Update {
        at: at.clone(),
        target: UpdateTarget::Attribute(name.to_string()),
        old: old.map(str::to_string),
        new: new.map(str::to_string),
    };
    let mut out = Vec::new();
    for (name, value) in removed.iter().rev() {
        out.push(update(name, Some(value), None));
    }
    for (name, value) in &kept {
        let new = b.attr(name).expect("kept attribute present");
        if new != value {
            out.push(update(name, Some(value), Some(new)));
        }
    }
    for (name, value) in &added {
        out.push(update(name, None, Some(value)));
    }
    Some(out)
}

/// Lexicographic pairing score; see the module docs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
struct Score {
    embeds: u32,
    identical: u32,
    same_id: u32,
    paired: u32,
}

impl Add for Score {
    type Output = Score;

    fn add(self, o: Score) -> Score {
        Score {
            embeds: self.embeds + o.embeds,
            identical: self.identical + o.identical,
            same_id: self.same_id + o.same_id,
            paired: self.paired + o.paired,
        }
    }
}

fn pair_score(a: &DomNode, b: &DomNode) -> Option<Score> {
    let same_id = match (a, b) {
        (DomNode::Text(_), DomNode::Text(_)) => true,
        (DomNode::Element(x), DomNode::Element(y)) if x.tag() == y.tag() => x.attr("id") == y.attr("id"),
        _ => return None,
    };
    let identical = a == b;
    Some(Score {
        embeds: u32::from(identical || node_embeds(a, b)),
        identical: u32::from(identical),
        same_id: u32::from(same_id),
        paired: 1,
    })
}

enum Step {
    Pair(usize, usize),
    Delete(usize),
    Insert(usize),
}

fn align(pre: &[DomNode], post: &[DomNode]) -> Vec<Step> {
    let (m, n) = (pre.len(), post.len());
    // Strip the common prefix and suffix of identical children first; these
    // are always optimal pairings and keep the quadratic table small.
    let prefix = pre.iter().zip(post).take_while(|(a, b)| a == b).count();
    let suffix = pre[prefix..]
        .iter()
        .rev()
        .zip(post[prefix..].iter().rev())
        .take_while(|(a, b)| a == b)
        .count();
    let (pm, pn) = (m - prefix - suffix, n - prefix - suffix);

    let scores: Vec<Vec<Option<Score>>> = (0..pm)
        .map(|i| (0..pn).map(|j| pair_score(&pre[prefix + i], &post[prefix + j])).collect())
        .collect();
    // best[i][j]: optimal score aligning pre[i..] with post[j..] (middle part).
    let mut best = vec![vec![Score::default(); pn + 1]; pm + 1];
    for i in (0..pm).rev() {
        for j in (0..pn).rev() {
            let mut b = best[i + 1][j].max(best[i][j + 1]);
            if let Some(s) = scores[i][j] {
                b = b.max(s + best[i + 1][j + 1]);
            }
            best[i][j] = b;
        }
    }

    let mut steps: Vec<Step> = (0..prefix).map(|k| Step::Pair(k, k)).collect();
    let (mut i, mut j) = (0, 0);
    while i < pm || j < pn {
        let here = best[i][j];
        if i < pm && j < pn {
            if let Some(s) = scores[i][j] {
                if (s + best[i + 1][j + 1]).cmp(&here) == Ordering::Equal {
                    steps.push(Step::Pair(prefix + i, prefix + j));
                    i += 1;
                    j += 1;
                    continue;
                }
            }
        }
        if i < pm && best[i + 1][j] == here {
            steps.push(Step::Delete(prefix + i));
            i += 1;
        } else {
            steps.push(Step::Insert(prefix + j));
            j += 1;
        }
    }
    steps.extend((0..suffix).map(|k| Step::Pair(m - suffix + k, n - suffix + k)));
    steps
}

fn diff_children(pre: &[DomNode], post: &[DomNode], path: &mut Vec<usize>, out: &mut Vec<PatchEntry>) {
    let mut cursor = 0;
    for step in align(pre, post) {
        match step {
            Step::Delete(i) => {
                out.push(PatchEntry::Delete {
                    at: NodePath(child_path(path, cursor)),
                    node: Some(pre[i].clone()),
                });
            }
            Step::Insert(j) => {
                out.push(PatchEntry::Insert {
                    at: NodePath(child_path(path, cursor)),
                    node: post[j].clone(),
                });
                cursor += 1;
            }
            Step::Pair(i, j) => {
                path.push(cursor);
                diff_nodes(&pre[i], &post[j], path, out);
                path.pop();
                cursor += 1;
            }
        }
    }
}

fn child_path(path: &[usize], index: usize) -> Vec<usize> {
    let mut p = path.to_vec();
    p.push(index);
    p
}

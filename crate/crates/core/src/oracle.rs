//! Exhaustive shortest-edit-script search for small trees.
//!
//! Used to cross-check [`crate::diff::diff`]. The search mutates trees with
//! its own primitives rather than going through [`crate::patch::apply`], so
//! agreement between the two is evidence about both.
//!
//! Moves from a state: delete the root, delete any other node, insert any
//! subtree of the target at any slot, set or remove an attribute using names
//! and values that occur in the target, and replace text with any text that
//! occurs in the target. Deleting and re-inserting the root reaches every
//! target in two moves, so the breadth-first search always terminates.

use std::collections::VecDeque;

use thiserror::Error;

use crate::dom::{DomNode, DomTree, NodePath};
use crate::patch::{PatchEntry, UpdateTarget};

pub const ORACLE_NODE_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("oracle limited to trees of at most {limit} nodes, got {size}")]
pub struct SizeLimitExceeded {
    pub size: usize,
    pub limit: usize,
}

struct Alphabet {
    subtrees: Vec<DomNode>,
    attrs: Vec<(String, String)>,
    texts: Vec<String>,
}

impl Alphabet {
    fn of(target: &DomNode) -> Self {
        let mut subtrees = Vec::new();
        let mut attrs = Vec::new();
        let mut texts = Vec::new();
        target.walk(&mut |_, node| {
            if !subtrees.contains(node) {
                subtrees.push(node.clone());
            }
            match node {
                DomNode::Element(e) => {
                    for pair in e.attrs() {
                        if !attrs.contains(pair) {
                            attrs.push(pair.clone());
                        }
                    }
                }
                DomNode::Text(t) => {
                    if !texts.contains(t) {
                        texts.push(t.clone());
                    }
                }
            }
        });
        Alphabet {
            subtrees,
            attrs,
            texts,
        }
    }
}

type State = Option<DomNode>;

fn node_at_mut<'a>(root: &'a mut DomNode, steps: &[usize]) -> &'a mut DomNode {
    let mut node = root;
    for &s in steps {
        node = match node {
            DomNode::Element(e) => &mut e.children[s],
            DomNode::Text(_) => unreachable!("paths come from a walk of this tree"),
        };
    }
    node
}

/// Every move available from `state`.
fn moves(state: &State, alphabet: &Alphabet) -> Vec<PatchEntry> {
    let mut out = Vec::new();
    let Some(root) = state else {
        for sub in &alphabet.subtrees {
            if matches!(sub, DomNode::Element(_)) {
                out.push(PatchEntry::Insert {
                    at: NodePath::root(),
                    node: sub.clone(),
                });
            }
        }
        return out;
    };

    out.push(PatchEntry::Delete {
        at: NodePath::root(),
        node: Some(root.clone()),
    });

    root.walk(&mut |path, node| {
        if !path.is_root() {
            out.push(PatchEntry::Delete {
                at: path.clone(),
                node: Some(node.clone()),
            });
        }
        match node {
            DomNode::Element(e) => {
                for slot in 0..=e.children.len() {
                    for sub in &alphabet.subtrees {
                        out.push(PatchEntry::Insert {
                            at: path.child(slot),
                            node: sub.clone(),
                        });
                    }
                }
                for (name, value) in &alphabet.attrs {
                    let current = e.attr(name);
                    if current != Some(value.as_str()) {
                        out.push(PatchEntry::Update {
                            at: path.clone(),
                            target: UpdateTarget::Attribute(name.clone()),
                            old: current.map(str::to_string),
                            new: Some(value.clone()),
                        });
                    }
                }
                for (name, value) in e.attrs() {
                    out.push(PatchEntry::Update {
                        at: path.clone(),
                        target: UpdateTarget::Attribute(name.clone()),
                        old: Some(value.clone()),
                        new: None,
                    });
                }
            }
            DomNode::Text(current) => {
                for t in &alphabet.texts {
                    if t != current {
                        out.push(PatchEntry::Update {
                            at: path.clone(),
                            target: UpdateTarget::Text,
                            old: Some(current.clone()),
                            new: Some(t.clone()),
                        });
                    }
                }
            }
        }
    });
    out
}

/// Node count after `entry`, computed without performing it.
fn size_after(size: usize, entry: &PatchEntry) -> usize {
    match entry {
        PatchEntry::Insert { node, .. } => size + node.size(),
        PatchEntry::Delete { node, .. } => size - node.as_ref().map_or(0, DomNode::size),
        PatchEntry::Update { .. } => size,
    }
}

/// Performs a move produced by [`moves`] on `state`.
fn perform(state: &State, entry: &PatchEntry) -> State {
    match entry {
        PatchEntry::Delete { at, .. } if at.is_root() => None,
        PatchEntry::Insert { at, node } if at.is_root() => Some(node.clone()),
        _ => {
            let mut root = state.clone().expect("non-root moves need a root");
            match entry {
                PatchEntry::Insert { at, node } => {
                    let (parent, idx) = at.split_last().expect("not the root");
                    if let DomNode::Element(e) = node_at_mut(&mut root, parent) {
                        e.children.insert(idx, node.clone());
                    }
                }
                PatchEntry::Delete { at, .. } => {
                    let (parent, idx) = at.split_last().expect("not the root");
                    if let DomNode::Element(e) = node_at_mut(&mut root, parent) {
                        e.children.remove(idx);
                    }
                }
                PatchEntry::Update { at, target, new, .. } => match (node_at_mut(&mut root, at.steps()), target, new) {
                    (DomNode::Element(e), UpdateTarget::Attribute(name), Some(v)) => {
                        e.set_attr(name, v).expect("name taken from a valid tree");
                    }
                    (DomNode::Element(e), UpdateTarget::Attribute(name), None) => {
                        e.remove_attr(name);
                    }
                    (node @ DomNode::Text(_), UpdateTarget::Text, Some(v)) => *node = DomNode::Text(v.clone()),
                    _ => unreachable!("moves only target matching node kinds"),
                },
            }
            Some(root)
        }
    }
}

fn state_size(state: &State) -> usize {
    state.as_ref().map_or(0, DomNode::size)
}

/// Returns a shortest edit script turning `pre` into `post`.
pub fn oracle_diff(pre: &DomTree, post: &DomTree) -> Result<Vec<PatchEntry>, SizeLimitExceeded> {
    for t in [pre, post] {
        if t.size() > ORACLE_NODE_LIMIT {
            return Err(SizeLimitExceeded {
                size: t.size(),
                limit: ORACLE_NODE_LIMIT,
            });
        }
    }
    let goal: State = Some(post.to_node());
    let start: State = Some(pre.to_node());
    if start == goal {
        return Ok(Vec::new());
    }
    let goal_size = post.size();
    let alphabet = Alphabet::of(post.root());

    // Breadth-first over moves. A state is only built when its size matches
    // the goal or when it is expanded. `pending[i]` is (index of the
    // expanded parent, move); `expanded[j]` holds a built state and the
    // pending index that produced it. There is no visited set: the root
    // delete is queued first, and expanding its empty state reaches the
    // goal, so the search never goes past that expansion.
    let mut expanded: Vec<(State, Option<usize>)> = vec![(start, None)];
    let mut pending: Vec<(usize, PatchEntry)> = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut current = 0;

    loop {
        let (state, _) = &expanded[current];
        let size = state_size(state);
        for entry in moves(state, &alphabet) {
            if size_after(size, &entry) == goal_size && perform(state, &entry) == goal {
                let mut script = vec![entry];
                let mut at = current;
                while let Some(p) = expanded[at].1 {
                    script.push(pending[p].1.clone());
                    at = pending[p].0;
                }
                script.reverse();
                return Ok(script);
            }
            queue.push_back(pending.len());
            pending.push((current, entry));
        }
        let next = queue.pop_front().expect("root replacement always reaches the goal");
        let (parent, entry) = &pending[next];
        let state = perform(&expanded[*parent].0, entry);
        expanded.push((state, Some(next)));
        current = expanded.len() - 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{el, text};

    fn body(children: Vec<DomNode>) -> DomTree {
        DomTree::new(el("body").with_children(children))
    }

    #[test]
    fn identical_trees() {
        let t = body(vec![el("img").into()]);
        assert_eq!(oracle_diff(&t, &t).unwrap(), vec![]);
    }

    #[test]
    fn single_insert() {
        let got = oracle_diff(&body(vec![]), &body(vec![el("div").into()])).unwrap();
        assert_eq!(got, vec![PatchEntry::insert([0], el("div"))]);
    }

    #[test]
    fn single_update() {
        let got = oracle_diff(
            &body(vec![el("div").with_attr("id", "1").into()]),
            &body(vec![el("div").with_attr("id", "2").into()]),
        )
        .unwrap();
        assert_eq!(got, vec![PatchEntry::set_attr([0], "id", Some("1"), Some("2"))]);
    }

    #[test]
    fn text_update() {
        let got = oracle_diff(&body(vec![text("a")]), &body(vec![text("b")])).unwrap();
        assert_eq!(got, vec![PatchEntry::set_text([0], "a", "b")]);
    }

    #[test]
    fn size_limit() {
        let big = body((0..8).map(|_| el("p").into()).collect());
        assert_eq!(
            oracle_diff(&big, &body(vec![])).unwrap_err(),
            SizeLimitExceeded { size: 9, limit: 8 }
        );
    }

    #[test]
    fn root_change_needs_two() {
        let got = oracle_diff(&DomTree::new(el("a")), &DomTree::new(el("b"))).unwrap();
        assert_eq!(got.len(), 2);
    }
}

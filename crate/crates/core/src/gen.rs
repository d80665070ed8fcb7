//! Seeded generators for trees, edit pairs, programs and registries.
//!
//! Everything takes an explicit RNG so that tests, the benchmark and the CLI
//! reproduce the same inputs from the same seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dom::{parse, serialize, text, DomNode, DomTree, Element, NodePath};
use crate::extension::{Action, EffectProgram, Extension, InsertIndex, Manifest, Phase, Rule, RunAt, Scope, Selector};
use crate::pipeline::Registry;

pub type GenRng = ChaCha8Rng;

pub const SEED_VAR: &str = "PGUARD_SEED";
pub const DEFAULT_SEED: u64 = 0x5eed;

pub fn rng(seed: u64) -> GenRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed from `PGUARD_SEED`, or `fallback` when unset or unparsable.
pub fn seed_from_env(fallback: u64) -> u64 {
    std::env::var(SEED_VAR)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(fallback)
}

const TAGS: &[&str] = &["div", "p", "span", "a", "ul", "li", "img", "section"];
const ATTR_NAMES: &[&str] = &["id", "class", "title"];
const ATTR_VALUES: &[&str] = &["1", "2", "main", "hidden"];
const TEXTS: &[&str] = &["alpha", "beta", "gamma", "x"];

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty alphabet")
}

fn random_element<R: Rng>(rng: &mut R) -> Element {
    let mut e = Element::new(pick(rng, TAGS));
    for _ in 0..rng.gen_range(0..=2) {
        e.set_attr(pick(rng, ATTR_NAMES), pick(rng, ATTR_VALUES))
            .expect("alphabet names are valid");
    }
    e
}

fn random_leaf<R: Rng>(rng: &mut R) -> DomNode {
    if rng.gen_bool(0.3) {
        text(pick(rng, TEXTS))
    } else {
        random_element(rng).into()
    }
}

fn element_paths(root: &DomNode) -> Vec<NodePath> {
    let mut out = Vec::new();
    root.walk(&mut |p, n| {
        if n.as_element().is_some() {
            out.push(p.clone());
        }
    });
    out
}

fn all_paths(root: &DomNode) -> Vec<NodePath> {
    let mut out = Vec::new();
    root.walk(&mut |p, _| out.push(p.clone()));
    out
}

fn grow<R: Rng>(rng: &mut R, root: &mut DomNode, extra: usize) {
    for _ in 0..extra {
        let parents = element_paths(root);
        let at = parents.choose(rng).expect("root is an element");
        let parent = root
            .resolve_mut(at.steps())
            .and_then(DomNode::as_element_mut)
            .expect("path from walk");
        let idx = rng.gen_range(0..=parent.children.len());
        parent.children.insert(idx, random_leaf(rng));
    }
}

/// A random tree of exactly `nodes` nodes (at least one).
pub fn random_tree<R: Rng>(rng: &mut R, nodes: usize) -> DomTree {
    let mut root: DomNode = random_element(rng).into();
    grow(rng, &mut root, nodes.saturating_sub(1));
    DomTree::from_node(root).expect("root is an element")
}

/// A random tree in parser-normal form (adjacent texts merged), rooted at
/// `body`, of roughly `nodes` nodes.
pub fn random_dom<R: Rng>(rng: &mut R, nodes: usize) -> DomTree {
    let mut root: DomNode = Element::new("body").into();
    grow(rng, &mut root, nodes.saturating_sub(1));
    parse(&serialize(&DomTree::from_node(root).expect("root is an element")))
}

fn delete_at(root: &mut DomNode, path: &NodePath) -> Option<DomNode> {
    let (parent, idx) = path.split_last()?;
    let parent = root.resolve_mut(parent)?.as_element_mut()?;
    Some(parent.children.remove(idx))
}

fn retag(e: &Element, tag: &str) -> Element {
    let mut out = Element::new(tag);
    for (n, v) in e.attrs() {
        out.set_attr(n, v).expect("copied from a valid element");
    }
    out.children = e.children.clone();
    out
}

/// Applies `edits` random local edits: inserts, deletes, moves, relabels,
/// attribute and text changes.
pub fn mutate<R: Rng>(rng: &mut R, tree: &DomTree, edits: usize) -> DomTree {
    let mut root = tree.to_node();
    for _ in 0..edits {
        let paths = all_paths(&root);
        let path = paths.choose(rng).expect("root exists").clone();
        match rng.gen_range(0..6) {
            0 => grow(rng, &mut root, 1),
            1 => {
                delete_at(&mut root, &path);
            }
            2 => {
                if let Some(node) = delete_at(&mut root, &path) {
                    let parents = element_paths(&root);
                    let at = parents.choose(rng).expect("root survives");
                    let parent = root
                        .resolve_mut(at.steps())
                        .and_then(DomNode::as_element_mut)
                        .expect("path from walk");
                    let idx = rng.gen_range(0..=parent.children.len());
                    parent.children.insert(idx, node);
                }
            }
            3 => {
                if let Some(DomNode::Element(e)) = root.resolve_mut(path.steps()) {
                    *e = retag(e, pick(rng, TAGS));
                }
            }
            4 => {
                if let Some(DomNode::Element(e)) = root.resolve_mut(path.steps()) {
                    let name = pick(rng, ATTR_NAMES);
                    if rng.gen_bool(0.3) {
                        e.remove_attr(name);
                    } else {
                        e.set_attr(name, pick(rng, ATTR_VALUES)).expect("valid name");
                    }
                }
            }
            _ => {
                if let Some(DomNode::Text(t)) = root.resolve_mut(path.steps()) {
                    *t = pick(rng, TEXTS).to_string();
                }
            }
        }
    }
    DomTree::from_node(root).expect("root is never deleted")
}

/// A pair of trees of at most `max_nodes` nodes each: usually an edited
/// copy, sometimes unrelated.
pub fn random_pair<R: Rng>(rng: &mut R, max_nodes: usize) -> (DomTree, DomTree) {
    let size = rng.gen_range(1..=max_nodes);
    let a = random_tree(rng, size);
    if rng.gen_bool(0.15) {
        let size = rng.gen_range(1..=max_nodes);
        let b = random_tree(rng, size);
        return (a, b);
    }
    loop {
        let edits = rng.gen_range(0..=6);
        let b = mutate(rng, &a, edits);
        if b.size() <= max_nodes {
            return (a, b);
        }
    }
}

/// Every ordered tree of at most `max_nodes` nodes over a small alphabet:
/// elements `a`, `b`, `a k=1`, and text `t` (leaves only).
pub fn all_small_trees(max_nodes: usize) -> Vec<DomTree> {
    fn labels() -> Vec<Element> {
        vec![Element::new("a"), Element::new("b"), Element::new("a").with_attr("k", "1")]
    }
    // forests[n] = every ordered forest with exactly n nodes
    let mut forests: Vec<Vec<Vec<DomNode>>> = vec![vec![vec![]]];
    let mut trees: Vec<Vec<DomNode>> = vec![vec![]];
    for n in 1..=max_nodes {
        let mut tn: Vec<DomNode> = Vec::new();
        if n == 1 {
            tn.push(text("t"));
        }
        for label in labels() {
            for f in &forests[n - 1] {
                tn.push(label.clone().with_children(f.clone()).into());
            }
        }
        trees.push(tn);
        let mut fn_: Vec<Vec<DomNode>> = Vec::new();
        for first in 1..=n {
            for head in &trees[first] {
                for tail in &forests[n - first] {
                    let mut f = vec![head.clone()];
                    f.extend(tail.iter().cloned());
                    fn_.push(f);
                }
            }
        }
        forests.push(fn_);
    }
    trees
        .into_iter()
        .flatten()
        .filter_map(|n| DomTree::from_node(n).ok())
        .collect()
}

// ---------------------------------------------------------------------------
// Programs and registries

fn dom_selectors(dom0: &DomTree) -> Vec<Selector> {
    let mut out = vec![Selector::Root];
    dom0.root().walk(&mut |p, n| {
        if let DomNode::Element(e) = n {
            out.push(Selector::Tag(e.tag().to_string()));
            for (name, value) in e.attrs() {
                out.push(Selector::Attribute {
                    name: name.clone(),
                    value: value.clone(),
                });
            }
            if !p.is_root() {
                out.push(Selector::Path(p.clone()));
            }
        }
    });
    out
}

fn scope<R: Rng>(rng: &mut R) -> Scope {
    if rng.gen_bool(0.5) {
        Scope::AllMatches
    } else {
        Scope::FirstMatch
    }
}

/// An insert-only program whose selectors name nodes of `dom0` and whose
/// inserted nodes carry tags unique to `owner`, so no other program's
/// selectors match them. Inserts always append.
pub fn random_monotone_program<R: Rng>(rng: &mut R, dom0: &DomTree, owner: usize) -> EffectProgram {
    let selectors = dom_selectors(dom0);
    let rules = (0..rng.gen_range(1..=3))
        .map(|r| {
            let selector = selectors.choose(rng).expect("root selector").clone();
            let action = if rng.gen_bool(0.1) {
                Action::Nothing
            } else {
                let mut node = Element::new(&format!("x{owner}r{r}"));
                if rng.gen_bool(0.3) {
                    node.children.push(text(pick(rng, TEXTS)));
                }
                Action::InsertChild {
                    node: node.into(),
                    index: InsertIndex::Append,
                }
            };
            Rule::new(selector, action, scope(rng))
        })
        .collect();
    EffectProgram::new(rules)
}

/// A program mixing inserts with deletes, attribute writes and text writes.
pub fn random_program<R: Rng>(rng: &mut R, dom0: &DomTree, owner: usize) -> EffectProgram {
    let selectors = dom_selectors(dom0);
    let rules = (0..rng.gen_range(1..=3))
        .map(|r| {
            let selector = selectors.choose(rng).expect("root selector").clone();
            let action = match rng.gen_range(0..5) {
                0 => Action::DeleteSelf,
                1 => Action::SetAttribute {
                    name: pick(rng, ATTR_NAMES).to_string(),
                    value: format!("v{owner}"),
                },
                2 => Action::SetText(format!("text {owner}")),
                3 => Action::InsertChild {
                    node: Element::new(&format!("x{owner}r{r}")).into(),
                    index: if rng.gen_bool(0.5) {
                        InsertIndex::Append
                    } else {
                        InsertIndex::At(rng.gen_range(0..3))
                    },
                },
                _ => Action::Nothing,
            };
            Rule::new(selector, action, scope(rng))
        })
        .collect();
    EffectProgram::new(rules)
}

pub fn random_manifest<R: Rng>(rng: &mut R, id: &str, install_time: u64) -> Manifest {
    let phase = if rng.gen_bool(0.5) { Phase::Capture } else { Phase::Bubble };
    Manifest::new(id, *RunAt::ALL.choose(rng).expect("three values"), phase, install_time)
}

/// `n` extensions `e0..e(n-1)` with shuffled install times and random
/// run_at and phase.
pub fn random_registry<R: Rng>(rng: &mut R, dom0: &DomTree, n: usize, monotone: bool) -> Registry {
    let mut times: Vec<u64> = (0..n as u64).collect();
    times.shuffle(rng);
    let mut registry = Registry::new();
    for (i, t) in times.into_iter().enumerate() {
        let program = if monotone {
            random_monotone_program(rng, dom0, i)
        } else {
            random_program(rng, dom0, i)
        };
        let manifest = random_manifest(rng, &format!("e{i}"), t);
        registry
            .install(Extension::new(manifest, program))
            .expect("ids and times are distinct");
    }
    registry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::{classify, Monotonicity};

    #[test]
    fn tree_sizes() {
        let mut r = rng(1);
        for n in 1..30 {
            assert_eq!(random_tree(&mut r, n).size(), n);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let a = random_pair(&mut rng(9), 50);
        let b = random_pair(&mut rng(9), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn pairs_respect_limit() {
        let mut r = rng(2);
        for _ in 0..200 {
            let (a, b) = random_pair(&mut r, 12);
            assert!(a.size() <= 12 && b.size() <= 12);
        }
    }

    #[test]
    fn small_tree_counts() {
        // 3 roots of size 1, then each forest below a labelled root
        assert_eq!(all_small_trees(1).len(), 3);
        assert_eq!(all_small_trees(2).len(), 3 + 3 * 4);
        let all = all_small_trees(4);
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len());
        assert!(all.iter().all(|t| t.size() <= 4));
    }

    #[test]
    fn random_dom_is_normal() {
        let mut r = rng(3);
        for _ in 0..50 {
            let t = random_dom(&mut r, 40);
            assert_eq!(parse(&serialize(&t)), t);
        }
    }

    #[test]
    fn program_kinds() {
        let mut r = rng(4);
        let dom0 = random_dom(&mut r, 20);
        for i in 0..50 {
            assert_eq!(classify(&random_monotone_program(&mut r, &dom0, i)), Monotonicity::Monotone);
        }
        let reg = random_registry(&mut r, &dom0, 5, false);
        assert_eq!(reg.execution_order().len(), 5);
    }
}

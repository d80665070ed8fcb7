#![allow(dead_code)]

use pguard_core::dom::{el, text, DomNode, DomTree, NodePath};
use pguard_core::gen::GenRng;
use pguard_core::patch::{apply, PatchEntry};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn element_paths(tree: &DomTree) -> Vec<(NodePath, usize)> {
    let mut out = Vec::new();
    tree.root().walk(&mut |p, n| {
        if let DomNode::Element(e) = n {
            out.push((p.clone(), e.children.len()));
        }
    });
    out
}

pub fn random_leaf(rng: &mut GenRng) -> DomNode {
    match rng.gen_range(0..3) {
        0 => text(["x", "y", "hello"].choose(rng).unwrap()),
        1 => el(["span", "div", "b"].choose(rng).unwrap()).into(),
        _ => el("i").with_attr("k", "v").with_child(text("z")).into(),
    }
}

/// A tree reached from `tree` by `count` insertions, with the entries used.
pub fn insert_only(rng: &mut GenRng, tree: &DomTree, count: usize) -> (DomTree, Vec<PatchEntry>) {
    let mut t = tree.clone();
    let mut used = Vec::new();
    for _ in 0..count {
        let paths = element_paths(&t);
        let (p, n) = paths.choose(rng).unwrap().clone();
        let entry = PatchEntry::insert(p.child(rng.gen_range(0..=n)), random_leaf(rng));
        t = apply(&t, std::slice::from_ref(&entry)).unwrap();
        used.push(entry);
    }
    (t, used)
}

mod common;

use pguard_core::diff::diff;
use pguard_core::dom::{el, parse, subtree_leq, DomTree};
use pguard_core::gen::{all_small_trees, mutate, random_pair, random_tree, rng};
use pguard_core::oracle::oracle_diff;
use pguard_core::patch::{apply, invert, PatchEntry};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn apply_diff_reaches_target(seed: u64) {
        let (a, b) = random_pair(&mut rng(seed), 50);
        let d = diff(&a, &b);
        prop_assert_eq!(apply(&a, &d).unwrap(), b);
    }

    #[test]
    fn inverse_restores_source(seed: u64) {
        let (a, b) = random_pair(&mut rng(seed), 50);
        let inv = invert(&diff(&a, &b)).unwrap();
        prop_assert_eq!(apply(&b, &inv).unwrap(), a);
    }

    #[test]
    fn empty_diff_iff_equal(seed: u64, n in 1usize..30, edits in 0usize..3) {
        let mut r = rng(seed);
        let a = random_tree(&mut r, n);
        let b = mutate(&mut r, &a, edits);
        prop_assert_eq!(diff(&a, &b).is_empty(), a == b);
        prop_assert!(diff(&a, &a).is_empty());
    }

    #[test]
    fn insert_only_edits_diff_to_inserts(seed: u64, n in 1usize..30, k in 1usize..5) {
        let mut r = rng(seed);
        let a = random_tree(&mut r, n);
        let (b, _) = common::insert_only(&mut r, &a, k);
        let d = diff(&a, &b);
        prop_assert!(d.iter().all(|e| matches!(e, PatchEntry::Insert { .. })), "{:?}", d);
        prop_assert!(subtree_leq(&a, &b));
    }

    #[test]
    fn oracle_agrees_on_small_pairs(seed: u64) {
        let (a, b) = random_pair(&mut rng(seed), 5);
        let ours = apply(&a, &diff(&a, &b)).unwrap();
        let best = apply(&a, &oracle_diff(&a, &b).unwrap()).unwrap();
        prop_assert_eq!(&ours, &b);
        prop_assert_eq!(best, b);
    }
}

#[test]
fn span_injection_is_two_inserts() {
    let a = parse("<body><img></img><img></img></body>");
    let b = parse("<body><img><span class=hidden></span></img><img><span class=hidden></span></img></body>");
    let span = el("span").with_attr("class", "hidden");
    let expected = vec![PatchEntry::insert([0, 0], span.clone()), PatchEntry::insert([1, 0], span)];
    assert_eq!(diff(&a, &b), expected);
    assert_eq!(oracle_diff(&a, &b).unwrap().len(), 2);
}

#[test]
fn body_img_to_anything() {
    let a = parse("<body><img></img></body>");
    for seed in 0..50 {
        let x = random_tree(&mut rng(seed), 1 + seed as usize % 20);
        assert_eq!(apply(&a, &diff(&a, &x)).unwrap(), x);
    }
}

#[test]
fn exhaustive_three_node_agreement() {
    let trees: Vec<DomTree> = all_small_trees(3);
    for a in &trees {
        for b in &trees {
            let d = diff(a, b);
            assert_eq!(apply(a, &d).unwrap(), *b);
            assert_eq!(apply(b, &invert(&d).unwrap()).unwrap(), *a);
            assert_eq!(apply(a, &oracle_diff(a, b).unwrap()).unwrap(), *b);
        }
    }
}

use pguard_core::diff::diff;
use pguard_core::dom::parse;
use pguard_core::extension::{EffectProgram, Extension, Manifest, Phase, Privilege, Privileges, RunAt};
use pguard_core::gen::{random_dom, random_manifest, random_registry, rng};
use pguard_core::merge::{merge_store, ConflictPolicy};
use pguard_core::monitor::{
    guard, interleave_observers, run_guarded, verify_pipeline_integrity, MonitorConfig, MonitorError, SlotRole,
    ViolationKind,
};
use pguard_core::pipeline::{make_usual_attacker, run_pipeline, Registry};
use proptest::prelude::*;

fn management() -> Privileges {
    [Privilege::Management].into_iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn victims_only_see_the_initial_tree(seed: u64, n in 1usize..7, monotone: bool) {
        let mut r = rng(seed);
        let dom = random_dom(&mut r, 20);
        let reg = random_registry(&mut r, &dom, n, monotone);
        let mut g = guard(reg, MonitorConfig::default()).unwrap();
        let run = run_guarded(&mut g, &dom).unwrap();
        for (slot, step) in g.slots().iter().zip(&run.trace.steps) {
            if let SlotRole::Victim(_) = slot {
                prop_assert_eq!(&step.input, &dom);
            }
        }
    }

    #[test]
    fn monotone_guarded_matches_unguarded(seed: u64, n in 1usize..7) {
        let mut r = rng(seed);
        let dom = random_dom(&mut r, 20);
        let mut reg = random_registry(&mut r, &dom, n, true);
        let plain = run_pipeline(&mut reg, &dom).unwrap();
        let mut g = guard(reg, MonitorConfig::default()).unwrap();
        let run = run_guarded(&mut g, &dom).unwrap();
        prop_assert_eq!(run.final_tree(), plain.final_tree());
    }

    #[test]
    fn store_replays_to_final(seed: u64, n in 1usize..7, monotone: bool, p in 0usize..2) {
        let policy = [ConflictPolicy::LastWins, ConflictPolicy::FirstWins][p];
        let mut r = rng(seed);
        let dom = random_dom(&mut r, 20);
        let reg = random_registry(&mut r, &dom, n, monotone);
        let mut g = guard(reg, MonitorConfig::with_policy(policy)).unwrap();
        let run = run_guarded(&mut g, &dom).unwrap();
        prop_assert_eq!(&merge_store(&dom, &run.store, policy).unwrap().tree, run.final_tree());
    }

    #[test]
    fn interleaved_probes_learn_nothing(seed: u64, n in 1usize..6, monotone: bool) {
        let mut r = rng(seed);
        let dom = random_dom(&mut r, 20);
        let reg = random_registry(&mut r, &dom, n, monotone);
        let spy = random_manifest(&mut r, "spy", 100).with_privilege(Privilege::Management);
        let mut g = guard(reg, MonitorConfig::default()).unwrap();
        prop_assert_eq!(interleave_observers(&mut g, &spy).unwrap(), n + 1);
        let run = run_guarded(&mut g, &dom).unwrap();
        let probes: Vec<_> = g
            .slots()
            .iter()
            .zip(&run.trace.steps)
            .filter(|(s, _)| matches!(s, SlotRole::Foreign(_)))
            .map(|(_, step)| &step.input)
            .collect();
        prop_assert_eq!(probes.len(), n + 1);
        for w in probes.windows(2) {
            prop_assert!(diff(w[0], w[1]).is_empty());
        }
    }

    #[test]
    fn detection_counts_foreign_slots(seed: u64, n in 1usize..6) {
        let mut r = rng(seed);
        let dom = random_dom(&mut r, 10);
        let reg = random_registry(&mut r, &dom, n, true);
        let mut g = guard(reg, MonitorConfig::default()).unwrap();
        prop_assert!(g.verify(&management()).unwrap().is_empty());
        interleave_observers(&mut g, &random_manifest(&mut r, "spy", 100).with_privilege(Privilege::Management)).unwrap();
        let v = g.verify(&management()).unwrap();
        prop_assert_eq!(v.len(), n + 1);
        prop_assert!(v.iter().all(|x| x.kind == ViolationKind::ForeignSlot));
        prop_assert!(matches!(g.verify(&Privileges::new()), Err(MonitorError::PrivilegeDenied(_))));
    }
}

#[test]
fn template_break_is_flagged() {
    let mut slots = vec![
        SlotRole::Initial,
        SlotRole::Victim("a".into()),
        SlotRole::Monitor(1),
        SlotRole::Victim("b".into()),
        SlotRole::Final,
    ];
    assert!(verify_pipeline_integrity(&slots, &management()).unwrap().is_empty());
    slots.swap(1, 2);
    let v = verify_pipeline_integrity(&slots, &management()).unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].kind, ViolationKind::TemplateBreak);
}

#[test]
fn guarded_slot_count_is_two_n_plus_one() {
    let dom = random_dom(&mut rng(1), 10);
    for n in 1..6 {
        let g = guard(random_registry(&mut rng(n as u64), &dom, n, true), MonitorConfig::default()).unwrap();
        assert_eq!((g.victim_count(), g.monitor_count()), (n, n + 1));
        assert_eq!(g.slot_count(), 2 * n + 1);
    }
}

#[test]
fn usual_attacker_learns_nothing_when_guarded() {
    let dom = parse("<body><img></img><img></img></body>");
    let pin = Extension::new(
        Manifest::new("pin", RunAt::DocumentEnd, Phase::Bubble, 1),
        EffectProgram::parse("on tag=img insert-child \"<span class=hidden></span>\" all").unwrap(),
    );
    let reg = Registry::new().with(pin).unwrap().with(make_usual_attacker("spy", 2)).unwrap();
    let mut g = guard(reg, MonitorConfig::default()).unwrap();
    let run = run_guarded(&mut g, &dom).unwrap();
    let spy = run.trace.steps.iter().find(|s| s.extension_id == "spy").unwrap();
    assert!(diff(&dom, &spy.input).is_empty());
    assert_eq!(run.final_tree().size(), 5);
}

// Two append-only programs that both insert at the front of the same parent
// do interfere: unguarded, the later insert lands first; guarded, insert
// ties put the earlier slot first. Soundness is only claimed for programs
// that append.
#[test]
fn interfering_prepends_diverge() {
    let dom = parse("<body><p>x</p></body>");
    let ext = |id: &str, t: u64, tag: &str| {
        Extension::new(
            Manifest::new(id, RunAt::DocumentEnd, Phase::Bubble, t),
            EffectProgram::parse(&format!("on root insert-child \"<{tag}></{tag}>\" at=0")).unwrap(),
        )
    };
    let mut reg = Registry::new().with(ext("a", 1, "aa")).unwrap().with(ext("b", 2, "bb")).unwrap();
    assert!(reg.extensions().all(|e| e.classify() == pguard_core::extension::Monotonicity::Monotone));
    let plain = run_pipeline(&mut reg, &dom).unwrap();
    assert_eq!(plain.final_tree(), &parse("<body><bb></bb><aa></aa><p>x</p></body>"));
    let mut g = guard(reg, MonitorConfig::default()).unwrap();
    let run = run_guarded(&mut g, &dom).unwrap();
    assert_eq!(run.final_tree(), &parse("<body><aa></aa><bb></bb><p>x</p></body>"));
}

#[test]
fn policies_differ_only_on_conflicts() {
    let dom = parse("<body><div id=m></div></body>");
    let ext = |id: &str, t: u64, v: &str| {
        Extension::new(
            Manifest::new(id, RunAt::DocumentEnd, Phase::Bubble, t),
            EffectProgram::parse(&format!("on attr=id=m set-attr theme \"{v}\"")).unwrap(),
        )
    };
    let reg = Registry::new().with(ext("a", 1, "light")).unwrap().with(ext("b", 2, "dark")).unwrap();
    let run = |p| run_guarded(&mut guard(reg.clone(), MonitorConfig::with_policy(p)).unwrap(), &dom);
    let last = run(ConflictPolicy::LastWins).unwrap();
    let first = run(ConflictPolicy::FirstWins).unwrap();
    assert_eq!(last.final_tree(), &parse("<body><div id=m theme=dark></div></body>"));
    assert_eq!(first.final_tree(), &parse("<body><div id=m theme=light></div></body>"));
    let a = last.merge.applied_origins();
    let b = first.merge.applied_origins();
    let changed: std::collections::BTreeSet<_> = a.symmetric_difference(&b).copied().collect();
    assert!(changed.is_subset(&last.merge.involved_origins()));
    assert!(matches!(run(ConflictPolicy::Fail), Err(MonitorError::Merge(_))));
}

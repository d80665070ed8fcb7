//! The guarded pipeline.
//!
//! [`guard`] wraps the `n` victims of a registry into `2n + 1` slots: an
//! initial normalizer, each victim followed by a monitor, and a final slot in
//! place of the last monitor. Every monitor diffs its victim's output against
//! the victim's input, records the diff in the shared store and hands the
//! unchanged input to the next victim, so each victim only ever sees `DOM_0`.
//! The final slot merges the store onto `DOM_0`.

use std::fmt;
use std::time::Instant;

use thiserror::Error;

use crate::diff::diff;
use crate::dom::{parse, serialize, DomTree};
use crate::extension::{EffectProgram, Extension, Manifest, Privilege, Privileges};
use crate::merge::{merge_store, ConflictPolicy, MergeError, MergeOutcome};
use crate::patch::{apply, invert, ApplyError, InvertError, PatchTable, SlotOrderError};
use crate::pipeline::{strong_copy_id, ExecutionTrace, Registry, Step};

pub const INITIAL_ID: &str = "pguard:initial";
pub const FINAL_ID: &str = "pguard:final";

pub fn monitor_id(k: usize) -> String {
    format!("pguard:monitor#{k}")
}

/// What a monitor does with a victim's changes before the next victim runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelPolicy {
    #[default]
    StripAll,
}

impl DelPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            DelPolicy::StripAll => "strip-all",
        }
    }
}

impl std::str::FromStr for DelPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strip-all" => Ok(DelPolicy::StripAll),
            other => Err(format!("unknown del policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MonitorConfig {
    pub conflict_policy: ConflictPolicy,
    pub del_policy: DelPolicy,
}

impl MonitorConfig {
    pub fn with_policy(conflict_policy: ConflictPolicy) -> Self {
        MonitorConfig {
            conflict_policy,
            del_policy: DelPolicy::StripAll,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("no enabled extension to guard")]
    EmptyRegistry,
    #[error("{0:?} lacks the management privilege")]
    PrivilegeDenied(String),
    #[error("slot {0} is outside the guarded pipeline")]
    SlotOutOfRange(usize),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error(transparent)]
    Invert(#[from] InvertError),
    #[error(transparent)]
    Store(#[from] SlotOrderError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotRole {
    Initial,
    Victim(String),
    /// Middle monitor after the `k`-th victim (1-based).
    Monitor(usize),
    Final,
    /// An extension that does not belong to the guarded template.
    Foreign(Extension),
}

impl SlotRole {
    pub fn id(&self) -> String {
        match self {
            SlotRole::Initial => INITIAL_ID.to_string(),
            SlotRole::Victim(id) => id.clone(),
            SlotRole::Monitor(k) => monitor_id(*k),
            SlotRole::Final => FINAL_ID.to_string(),
            SlotRole::Foreign(e) => e.id().to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SlotRole::Initial => "initial",
            SlotRole::Victim(_) => "victim",
            SlotRole::Monitor(_) => "monitor",
            SlotRole::Final => "final",
            SlotRole::Foreign(_) => "foreign",
        }
    }
}

/// A registry wrapped with monitors, plus the shared patch store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardedRegistry {
    base: Registry,
    config: MonitorConfig,
    slots: Vec<SlotRole>,
    store: PatchTable,
}

pub fn guard(registry: Registry, config: MonitorConfig) -> Result<GuardedRegistry, MonitorError> {
    let order = registry.execution_order();
    if order.is_empty() {
        return Err(MonitorError::EmptyRegistry);
    }
    let n = order.len();
    let mut slots = Vec::with_capacity(2 * n + 1);
    slots.push(SlotRole::Initial);
    for (i, id) in order.into_iter().enumerate() {
        slots.push(SlotRole::Victim(id));
        slots.push(if i + 1 < n { SlotRole::Monitor(i + 1) } else { SlotRole::Final });
    }
    Ok(GuardedRegistry {
        base: registry,
        config,
        slots,
        store: PatchTable::new(),
    })
}

impl GuardedRegistry {
    pub fn base(&self) -> &Registry {
        &self.base
    }

    pub fn config(&self) -> MonitorConfig {
        self.config
    }

    pub fn set_config(&mut self, config: MonitorConfig) {
        self.config = config;
    }

    pub fn slots(&self) -> &[SlotRole] {
        &self.slots
    }

    pub fn slot_ids(&self) -> Vec<String> {
        self.slots.iter().map(SlotRole::id).collect()
    }

    pub fn store(&self) -> &PatchTable {
        &self.store
    }

    pub fn victim_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, SlotRole::Victim(_))).count()
    }

    /// Initial, middle and final monitors.
    pub fn monitor_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, SlotRole::Initial | SlotRole::Monitor(_) | SlotRole::Final))
            .count()
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Places a foreign extension before slot `position`.
    pub fn insert_foreign(&mut self, position: usize, extension: Extension) -> Result<(), MonitorError> {
        if position > self.slots.len() {
            return Err(MonitorError::SlotOutOfRange(position));
        }
        self.slots.insert(position, SlotRole::Foreign(extension));
        Ok(())
    }

    /// Observer copies of `attacker` that ran in this pipeline.
    pub fn foreign(&self) -> impl Iterator<Item = &Extension> {
        self.slots.iter().filter_map(|s| match s {
            SlotRole::Foreign(e) => Some(e),
            _ => None,
        })
    }

    /// Checks this pipeline's slot sequence with [`verify_pipeline_integrity`].
    pub fn verify(&self, verifier: &Privileges) -> Result<Vec<Violation>, MonitorError> {
        verify_pipeline_integrity(&self.slots, verifier)
    }
}

/// Interleaves `n + 1` empty-program copies of `attacker` into a guarded
/// pipeline with `n` victims: one before the initial slot and one before each
/// victim. Monitors sit directly after their victim, so these are the only
/// gaps left to an attacker. Returns the number of copies placed.
pub fn interleave_observers(guarded: &mut GuardedRegistry, attacker: &Manifest) -> Result<usize, MonitorError> {
    if !attacker.has_management() {
        return Err(MonitorError::PrivilegeDenied(attacker.id.clone()));
    }
    let victims: Vec<usize> = guarded
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, SlotRole::Victim(_)))
        .map(|(i, _)| i)
        .collect();
    let copy = |k: usize| {
        let mut m = attacker.clone();
        m.id = strong_copy_id(&attacker.id, k);
        Extension::new(m, EffectProgram::default())
    };
    // insert from the back so earlier indices stay valid
    for (k, &pos) in victims.iter().enumerate().rev() {
        guarded.insert_foreign(pos, copy(k + 1))?;
    }
    guarded.insert_foreign(0, copy(0))?;
    Ok(victims.len() + 1)
}

/// Diffs a victim's output against its input, records the diff under
/// `slot`, and returns the output with the diff undone.
pub fn middle_monitor_step(
    victim_input: &DomTree,
    victim_output: &DomTree,
    store: &mut PatchTable,
    slot: usize,
) -> Result<DomTree, MonitorError> {
    let d = diff(victim_input, victim_output);
    let stripped = apply(victim_output, &invert(&d)?)?;
    store.push_all(slot, d)?;
    Ok(stripped)
}

/// Records the last victim's diff against `dom0` under `slot`, then merges
/// the whole store onto `dom0`.
pub fn final_apply(
    dom0: &DomTree,
    last_output: &DomTree,
    store: &mut PatchTable,
    slot: usize,
    config: MonitorConfig,
) -> Result<MergeOutcome, MonitorError> {
    store.push_all(slot, diff(dom0, last_output))?;
    Ok(merge_store(dom0, store, config.conflict_policy)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardedRun {
    pub trace: ExecutionTrace,
    pub store: PatchTable,
    pub merge: MergeOutcome,
}

impl GuardedRun {
    pub fn final_tree(&self) -> &DomTree {
        &self.merge.tree
    }
}

fn normalize(tree: &DomTree) -> DomTree {
    parse(&serialize(tree))
}

/// Executes every slot in order. Victim observations are logged on the
/// base registry's extensions; foreign observations on the slot's copy.
pub fn run_guarded(guarded: &mut GuardedRegistry, dom0: &DomTree) -> Result<GuardedRun, MonitorError> {
    guarded.store.clear();
    let config = guarded.config;
    let mut steps = Vec::with_capacity(guarded.slots.len());
    let mut elapsed = Vec::with_capacity(guarded.slots.len());
    let mut current = dom0.clone();
    let mut normalized = dom0.clone();
    let mut victim_input = dom0.clone();
    let mut ordinal = 0;
    let mut merged = None;

    for role in guarded.slots.iter_mut() {
        let id = role.id();
        let clock = Instant::now();
        let output = match role {
            SlotRole::Initial => {
                normalized = normalize(&current);
                normalized.clone()
            }
            SlotRole::Victim(vid) => {
                ordinal += 1;
                victim_input = current.clone();
                guarded
                    .base
                    .get_mut(vid)
                    .expect("guarded victims come from the base registry")
                    .evaluate(&current)
            }
            SlotRole::Monitor(_) => match config.del_policy {
                DelPolicy::StripAll => middle_monitor_step(&victim_input, &current, &mut guarded.store, ordinal)?,
            },
            SlotRole::Final => {
                let outcome = final_apply(&normalized, &current, &mut guarded.store, ordinal, config)?;
                let tree = outcome.tree.clone();
                merged = Some(outcome);
                tree
            }
            SlotRole::Foreign(ext) => ext.evaluate(&current),
        };
        elapsed.push(clock.elapsed());
        steps.push(Step {
            extension_id: id,
            input: current,
            output: output.clone(),
        });
        current = output;
    }

    let merge = match merged {
        Some(m) => m,
        // no final slot: merge what was stored so far
        None => merge_store(&normalized, &guarded.store, config.conflict_policy)?,
    };
    Ok(GuardedRun {
        trace: ExecutionTrace {
            initial: dom0.clone(),
            steps,
            elapsed,
        },
        store: guarded.store.clone(),
        merge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// A slot held by an extension outside the template.
    ForeignSlot,
    /// The remaining slots do not follow initial, (victim, monitor)*, victim, final.
    TemplateBreak,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub position: usize,
    pub id: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::ForeignSlot => "foreign extension",
            ViolationKind::TemplateBreak => "template break at",
        };
        write!(f, "slot {}: {what} {}", self.position, self.id)
    }
}

/// Checks a slot sequence against the guarded template. Each foreign slot is
/// one violation; after removing those, the first deviation from the
/// template (if any) is one more.
pub fn verify_pipeline_integrity(slots: &[SlotRole], verifier: &Privileges) -> Result<Vec<Violation>, MonitorError> {
    if !verifier.contains(&Privilege::Management) {
        return Err(MonitorError::PrivilegeDenied("verifier".to_string()));
    }
    let mut violations = Vec::new();
    let mut rest = Vec::new();
    for (position, role) in slots.iter().enumerate() {
        if let SlotRole::Foreign(e) = role {
            violations.push(Violation {
                position,
                id: e.id().to_string(),
                kind: ViolationKind::ForeignSlot,
            });
        } else {
            rest.push((position, role));
        }
    }

    let victims = rest.iter().filter(|(_, r)| matches!(r, SlotRole::Victim(_))).count();
    let mut expected = Vec::with_capacity(2 * victims + 1);
    expected.push(SlotRole::Initial);
    for i in 0..victims {
        expected.push(SlotRole::Victim(String::new()));
        expected.push(if i + 1 < victims { SlotRole::Monitor(i + 1) } else { SlotRole::Final });
    }
    let fits = |want: &SlotRole, got: &SlotRole| match (want, got) {
        (SlotRole::Victim(_), SlotRole::Victim(_)) => true,
        _ => want == got,
    };
    let break_at = (0..rest.len().max(expected.len())).find(|&i| match (expected.get(i), rest.get(i)) {
        (Some(w), Some((_, g))) => !fits(w, g),
        _ => true,
    });
    if let Some(i) = break_at {
        let (position, id) = match rest.get(i) {
            Some((p, r)) => (*p, r.id()),
            None => (slots.len(), "<missing>".to_string()),
        };
        violations.push(Violation {
            position,
            id,
            kind: ViolationKind::TemplateBreak,
        });
    }
    violations.sort_by_key(|v| v.position);
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::parse;
    use crate::extension::{Phase, RunAt};
    use crate::pipeline::run_pipeline;

    fn ext(id: &str, t: u64, program: &str) -> Extension {
        Extension::new(
            Manifest::new(id, RunAt::DocumentEnd, Phase::Bubble, t),
            EffectProgram::parse(program).unwrap(),
        )
    }

    fn registry(exts: Vec<Extension>) -> Registry {
        let mut r = Registry::new();
        for e in exts {
            r.install(e).unwrap();
        }
        r
    }

    fn management() -> Privileges {
        [Privilege::Management].into_iter().collect()
    }

    #[test]
    fn slot_layout() {
        let g = guard(
            registry(vec![ext("e1", 0, ""), ext("e2", 1, ""), ext("e3", 2, "")]),
            MonitorConfig::default(),
        )
        .unwrap();
        assert_eq!(
            g.slot_ids(),
            [INITIAL_ID, "e1", "pguard:monitor#1", "e2", "pguard:monitor#2", "e3", FINAL_ID]
        );
        assert_eq!((g.slot_count(), g.monitor_count(), g.victim_count()), (7, 4, 3));

        let g = guard(registry(vec![ext("e1", 0, "")]), MonitorConfig::default()).unwrap();
        assert_eq!(g.slot_ids(), [INITIAL_ID, "e1", FINAL_ID]);

        assert_eq!(guard(Registry::new(), MonitorConfig::default()), Err(MonitorError::EmptyRegistry));
    }

    #[test]
    fn monitor_step_strips_changes() {
        let dom0 = parse("<body><p></p></body>");
        let out = parse("<body><p></p><span></span></body>");
        let mut store = PatchTable::new();
        assert_eq!(middle_monitor_step(&dom0, &out, &mut store, 1).unwrap(), dom0);
        assert_eq!(store.len(), 1);

        let mut store = PatchTable::new();
        assert_eq!(middle_monitor_step(&dom0, &dom0, &mut store, 1).unwrap(), dom0);
        assert!(store.is_empty());

        let removed = parse("<body></body>");
        assert_eq!(middle_monitor_step(&dom0, &removed, &mut store, 2).unwrap(), dom0);
        assert!(matches!(&store.entries()[0].1, crate::patch::PatchEntry::Delete { node: Some(_), .. }));
    }

    #[test]
    fn victims_see_dom0_and_final_matches() {
        let victims = vec![
            ext("a", 0, r#"on tag=img insert-child "<span class=hidden></span>" all"#),
            ext("b", 1, r#"on root insert-child "<div id=x></div>""#),
            ext("c", 2, r#"on tag=p insert-child "note""#),
        ];
        let dom0 = parse("<body><img></img><p></p><img></img></body>");
        let mut plain = registry(victims.clone());
        let unguarded = run_pipeline(&mut plain, &dom0).unwrap();

        let mut g = guard(registry(victims), MonitorConfig::default()).unwrap();
        let run = run_guarded(&mut g, &dom0).unwrap();
        for id in ["a", "b", "c"] {
            assert_eq!(g.base().get(id).unwrap().last_observation(), Some(&dom0));
        }
        assert_eq!(run.final_tree(), unguarded.final_tree());
        assert_eq!(run.trace.steps.len(), 7);
        assert_eq!(merge_store(&dom0, &run.store, ConflictPolicy::LastWins).unwrap().tree, *run.final_tree());
    }

    #[test]
    fn attribute_clash_follows_policy() {
        let victims = || {
            vec![
                ext("a", 0, r#"on tag=div set-attr id "a""#),
                ext("b", 1, r#"on tag=div set-attr id "b""#),
            ]
        };
        let dom0 = parse(r#"<body><div id="1"></div></body>"#);
        let run = |policy| {
            let mut g = guard(registry(victims()), MonitorConfig::with_policy(policy)).unwrap();
            run_guarded(&mut g, &dom0)
        };
        assert_eq!(run(ConflictPolicy::LastWins).unwrap().final_tree(), &parse(r#"<body><div id="b"></div></body>"#));
        assert_eq!(run(ConflictPolicy::FirstWins).unwrap().final_tree(), &parse(r#"<body><div id="a"></div></body>"#));
        assert!(matches!(
            run(ConflictPolicy::Fail),
            Err(MonitorError::Merge(MergeError::ConflictDetected { slot_a: 1, slot_b: 2, .. }))
        ));
    }

    #[test]
    fn interleaved_observers_are_detected_and_blind() {
        let atk = Manifest::new("atk", RunAt::DocumentIdle, Phase::Bubble, 50).with_privilege(Privilege::Management);
        for n in 1..=4 {
            let victims = (0..n)
                .map(|i| ext(&format!("v{i}"), i as u64, r#"on root insert-child "<span></span>""#))
                .collect();
            let mut g = guard(registry(victims), MonitorConfig::default()).unwrap();
            assert_eq!(g.verify(&management()).unwrap(), vec![]);
            assert_eq!(interleave_observers(&mut g, &atk).unwrap(), n + 1);
            let violations = g.verify(&management()).unwrap();
            assert_eq!(violations.len(), n + 1);
            assert!(violations.iter().all(|v| v.kind == ViolationKind::ForeignSlot));

            let dom0 = parse("<body></body>");
            run_guarded(&mut g, &dom0).unwrap();
            for copy in g.foreign() {
                assert_eq!(copy.last_observation(), Some(&dom0));
            }
        }
        let weak = Manifest::new("atk", RunAt::DocumentIdle, Phase::Bubble, 50);
        let mut g = guard(registry(vec![ext("v", 0, "")]), MonitorConfig::default()).unwrap();
        assert_eq!(interleave_observers(&mut g, &weak), Err(MonitorError::PrivilegeDenied("atk".into())));
        assert_eq!(g.verify(&Privileges::new()), Err(MonitorError::PrivilegeDenied("verifier".into())));
    }

    #[test]
    fn template_breaks() {
        let v = |s: &str| SlotRole::Victim(s.to_string());
        let missing_monitor = [SlotRole::Initial, v("a"), v("b"), SlotRole::Final];
        let got = verify_pipeline_integrity(&missing_monitor, &management()).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].position, got[0].kind), (2, ViolationKind::TemplateBreak));

        let no_final = [SlotRole::Initial, v("a")];
        assert_eq!(verify_pipeline_integrity(&no_final, &management()).unwrap().len(), 1);

        let swapped = [v("a"), SlotRole::Initial, SlotRole::Final];
        assert_eq!(verify_pipeline_integrity(&swapped, &management()).unwrap()[0].position, 0);
    }
}

//! The unprotected execution pipeline.
//!
//! Enabled extensions run one after another in [`Registry::execution_order`],
//! each receiving the previous one's output. The module also provides default
//! knowledge measurement and the two attacker models, including the registry
//! manipulations a malicious extension can use to move itself in the order.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::diff::diff;
use crate::dom::DomTree;
use crate::extension::{EffectProgram, Extension, Manifest, Phase, RunAt};
use crate::patch::PatchEntry;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("no enabled extension in the registry")]
    EmptyRegistry,
    #[error("extension id {0:?} already installed")]
    DuplicateId(String),
    #[error("install time {0} already taken")]
    DuplicateInstallTime(u64),
    #[error("unknown extension {0:?}")]
    UnknownExtension(String),
    #[error("{0:?} lacks the management privilege")]
    PrivilegeDenied(String),
    #[error("knowledge index {index} out of range 1..={steps}")]
    IndexOutOfRange { index: usize, steps: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Installed {
    extension: Extension,
    enabled: bool,
}

/// Installed extensions keyed by id, with per-extension enabled flags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    installed: Vec<Installed>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, extension: Extension) -> Result<(), PipelineError> {
        let m = &extension.manifest;
        if self.get(&m.id).is_some() {
            return Err(PipelineError::DuplicateId(m.id.clone()));
        }
        if self
            .installed
            .iter()
            .any(|i| i.extension.manifest.install_time == m.install_time)
        {
            return Err(PipelineError::DuplicateInstallTime(m.install_time));
        }
        self.installed.push(Installed {
            extension,
            enabled: true,
        });
        Ok(())
    }

    pub fn with(mut self, extension: Extension) -> Result<Self, PipelineError> {
        self.install(extension)?;
        Ok(self)
    }

    pub fn get(&self, id: &str) -> Option<&Extension> {
        self.installed
            .iter()
            .find(|i| i.extension.id() == id)
            .map(|i| &i.extension)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Extension> {
        self.installed
            .iter_mut()
            .find(|i| i.extension.id() == id)
            .map(|i| &mut i.extension)
    }

    pub fn is_enabled(&self, id: &str) -> Option<bool> {
        self.installed
            .iter()
            .find(|i| i.extension.id() == id)
            .map(|i| i.enabled)
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool) -> Result<(), PipelineError> {
        let entry = self
            .installed
            .iter_mut()
            .find(|i| i.extension.id() == id)
            .ok_or_else(|| PipelineError::UnknownExtension(id.to_string()))?;
        entry.enabled = enabled;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.installed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.installed.is_empty()
    }

    pub fn extensions(&self) -> impl Iterator<Item = &Extension> {
        self.installed.iter().map(|i| &i.extension)
    }

    pub fn max_install_time(&self) -> Option<u64> {
        self.extensions().map(|e| e.manifest.install_time).max()
    }

    /// Enabled extension ids sorted by (run_at, phase, install time).
    pub fn execution_order(&self) -> Vec<String> {
        let mut enabled: Vec<&Manifest> = self
            .installed
            .iter()
            .filter(|i| i.enabled)
            .map(|i| &i.extension.manifest)
            .collect();
        enabled.sort_by_key(|m| m.order_key());
        enabled.into_iter().map(|m| m.id.clone()).collect()
    }

    pub fn clear_observations(&mut self) {
        for i in &mut self.installed {
            i.extension.clear_observations();
        }
    }
}

/// Free-function form of [`Registry::execution_order`].
pub fn execution_order(registry: &Registry) -> Vec<String> {
    registry.execution_order()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub extension_id: String,
    pub input: DomTree,
    pub output: DomTree,
}

/// `DOM_0`, each step's input and output, and the final tree.
///
/// `elapsed` holds one wall-clock duration per step and is ignored by
/// equality.
#[derive(Debug, Clone)]
pub struct ExecutionTrace {
    pub initial: DomTree,
    pub steps: Vec<Step>,
    pub elapsed: Vec<Duration>,
}

impl PartialEq for ExecutionTrace {
    fn eq(&self, other: &Self) -> bool {
        self.initial == other.initial && self.steps == other.steps
    }
}

impl Eq for ExecutionTrace {}

impl ExecutionTrace {
    pub fn final_tree(&self) -> &DomTree {
        self.steps.last().map_or(&self.initial, |s| &s.output)
    }

    /// Checks that each step's input is the previous step's output.
    pub fn is_threaded(&self) -> bool {
        let mut expected = &self.initial;
        for step in &self.steps {
            if &step.input != expected {
                return false;
            }
            expected = &step.output;
        }
        true
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.extension_id == id).map(|p| p + 1)
    }
}

/// Runs every enabled extension in execution order, threading outputs.
pub fn run_pipeline(registry: &mut Registry, dom0: &DomTree) -> Result<ExecutionTrace, PipelineError> {
    let order = registry.execution_order();
    if order.is_empty() {
        return Err(PipelineError::EmptyRegistry);
    }
    let mut current = dom0.clone();
    let mut steps = Vec::with_capacity(order.len());
    let mut elapsed = Vec::with_capacity(order.len());
    for id in order {
        let ext = registry.get_mut(&id).expect("ordered ids are installed");
        let clock = Instant::now();
        let output = ext.evaluate(&current);
        elapsed.push(clock.elapsed());
        steps.push(Step {
            extension_id: id,
            input: current,
            output: output.clone(),
        });
        current = output;
    }
    Ok(ExecutionTrace {
        initial: dom0.clone(),
        steps,
        elapsed,
    })
}

/// The set of DOM snapshots an extension can observe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Knowledge {
    snapshots: Vec<DomTree>,
}

impl Knowledge {
    pub fn from_snapshots(snapshots: impl IntoIterator<Item = DomTree>) -> Self {
        let mut k = Knowledge { snapshots: Vec::new() };
        for s in snapshots {
            k.insert(s);
        }
        k
    }

    fn insert(&mut self, tree: DomTree) {
        if !self.snapshots.contains(&tree) {
            self.snapshots.push(tree);
        }
    }

    pub fn snapshots(&self) -> &[DomTree] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn contains(&self, tree: &DomTree) -> bool {
        self.snapshots.contains(tree)
    }

    pub fn is_subset_of(&self, other: &Knowledge) -> bool {
        self.snapshots.iter().all(|s| other.contains(s))
    }
}

/// Default knowledge of the extension at 1-based position `i`: `{DOM_0}` for
/// the first, `{DOM_0, DOM_(i-1)}` otherwise. The load event always fires in
/// this simulator, so `DOM_0` is always included.
pub fn default_knowledge(trace: &ExecutionTrace, i: usize) -> Result<Knowledge, PipelineError> {
    if i == 0 || i > trace.steps.len() {
        return Err(PipelineError::IndexOutOfRange {
            index: i,
            steps: trace.steps.len(),
        });
    }
    let mut k = Knowledge::from_snapshots([trace.initial.clone()]);
    if i > 1 {
        k.insert(trace.steps[i - 2].output.clone());
    }
    Ok(k)
}

// ---------------------------------------------------------------------------
// Attackers

/// An observer with an empty program. It runs at `document_idle` in the
/// bubble phase so that, with the newest install time, it lands last.
pub fn make_usual_attacker(id: &str, install_time: u64) -> Extension {
    Extension::new(
        Manifest::new(id, RunAt::DocumentIdle, Phase::Bubble, install_time),
        EffectProgram::default(),
    )
}

/// What a usual attacker infers: `diff(DOM_0, input)` for its latest input.
/// There is no per-extension attribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LearnedPatch {
    pub entries: Vec<PatchEntry>,
}

pub fn usual_attacker_learned(attacker: &Extension, dom0: &DomTree) -> Option<LearnedPatch> {
    attacker.last_observation().map(|input| LearnedPatch {
        entries: diff(dom0, input),
    })
}

/// Id of the `k`-th observer copy of a strong attacker.
pub fn strong_copy_id(attacker_id: &str, k: usize) -> String {
    format!("{attacker_id}#{k}")
}

/// Interleaves `n + 1` observer copies of `attacker` around the `n` enabled
/// victims of `registry`: one before the first, one after each victim.
///
/// The attacker uses its management privilege to re-enable every victim with
/// fresh install times `1, 3, 5, ...`; copy `0` takes the first victim's
/// run_at and phase with time `0`, and copy `k` takes victim `k`'s run_at and
/// phase with time `2k`. Disabled extensions are left untouched.
pub fn make_strong_attacker(registry: &Registry, attacker: &Manifest) -> Result<Registry, PipelineError> {
    if !attacker.has_management() {
        return Err(PipelineError::PrivilegeDenied(attacker.id.clone()));
    }
    let order = registry.execution_order();
    let Some(first) = order.first() else {
        return Err(PipelineError::EmptyRegistry);
    };
    let base = registry
        .max_install_time()
        .map_or(0, |t| t + 1);
    let mut out = Registry::new();
    for ext in registry.extensions() {
        if registry.is_enabled(ext.id()) == Some(false) {
            let mut ext = ext.clone();
            // keep disabled extensions out of the fresh range
            ext.manifest.install_time += base + 2 * order.len() as u64 + 2;
            let id = ext.id().to_string();
            out.install(ext)?;
            out.set_enabled(&id, false)?;
        }
    }
    let observer = |k: usize, like: &Manifest, time: u64| {
        let mut m = Manifest::new(&strong_copy_id(&attacker.id, k), like.run_at, like.phase, time);
        m.privileges = attacker.privileges.clone();
        Extension::new(m, EffectProgram::default())
    };
    let first = &registry.get(first).expect("ordered ids are installed").manifest;
    out.install(observer(0, first, base))?;
    for (k, id) in order.iter().enumerate() {
        let mut victim = registry.get(id).expect("ordered ids are installed").clone();
        victim.manifest.install_time = base + 2 * k as u64 + 1;
        let like = victim.manifest.clone();
        out.install(victim)?;
        out.install(observer(k + 1, &like, base + 2 * k as u64 + 2))?;
    }
    Ok(out)
}

/// Per-victim effects reconstructed from consecutive observer snapshots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribution {
    pub extension_id: String,
    pub entries: Vec<PatchEntry>,
}

/// Reads the strong attacker's copies out of a finished trace and attributes
/// `diff(obs_(k-1), obs_k)` to the victim that ran between them.
pub fn strong_attacker_attribution(trace: &ExecutionTrace, attacker_id: &str) -> Vec<Attribution> {
    let prefix = format!("{attacker_id}#");
    let mut out = Vec::new();
    let mut last_probe: Option<&DomTree> = None;
    let mut between: Vec<&str> = Vec::new();
    for step in &trace.steps {
        if step.extension_id.starts_with(&prefix) {
            if let Some(prev) = last_probe {
                out.push(Attribution {
                    extension_id: between.join("+"),
                    entries: diff(prev, &step.input),
                });
            }
            last_probe = Some(&step.input);
            between.clear();
        } else {
            between.push(&step.extension_id);
        }
    }
    out
}

/// Rewrites `id`'s install time, as an external edit of the browser's
/// preferences file would.
pub fn reorder_via_secure_preferences(registry: &Registry, id: &str, new_time: u64) -> Result<Registry, PipelineError> {
    let mut out = registry.clone();
    if out
        .extensions()
        .any(|e| e.id() != id && e.manifest.install_time == new_time)
    {
        return Err(PipelineError::DuplicateInstallTime(new_time));
    }
    let ext = out
        .get_mut(id)
        .ok_or_else(|| PipelineError::UnknownExtension(id.to_string()))?;
    ext.manifest.install_time = new_time;
    Ok(out)
}

/// Disables every enabled extension and re-enables them in their current
/// order with the attacker last. Re-enabling assigns fresh consecutive
/// install times above the current maximum.
pub fn reorder_via_management(registry: &Registry, attacker_id: &str) -> Result<Registry, PipelineError> {
    let attacker = registry
        .get(attacker_id)
        .ok_or_else(|| PipelineError::UnknownExtension(attacker_id.to_string()))?;
    if !attacker.manifest.has_management() {
        return Err(PipelineError::PrivilegeDenied(attacker_id.to_string()));
    }
    let mut order = registry.execution_order();
    order.retain(|id| id != attacker_id);
    if registry.is_enabled(attacker_id) == Some(true) {
        order.push(attacker_id.to_string());
    }
    let mut out = registry.clone();
    for id in &order {
        out.set_enabled(id, false)?;
    }
    let first = registry.max_install_time().map_or(0, |t| t + 1);
    for (clock, id) in (first..).zip(&order) {
        out.get_mut(id).expect("id from this registry").manifest.install_time = clock;
        out.set_enabled(id, true)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{parse, subtree_leq};
    use crate::extension::Privilege;
    use crate::patch::PatchOp;

    fn ext(id: &str, run_at: RunAt, phase: Phase, t: u64, program: &str) -> Extension {
        Extension::new(Manifest::new(id, run_at, phase, t), EffectProgram::parse(program).unwrap())
    }

    fn plain(id: &str, t: u64, program: &str) -> Extension {
        ext(id, RunAt::DocumentEnd, Phase::Bubble, t, program)
    }

    #[test]
    fn ordering_examples() {
        let r = Registry::new()
            .with(ext("a", RunAt::DocumentEnd, Phase::Bubble, 0, ""))
            .unwrap()
            .with(ext("b", RunAt::DocumentStart, Phase::Bubble, 1, ""))
            .unwrap();
        assert_eq!(execution_order(&r), ["b", "a"]);

        let r = Registry::new()
            .with(ext("a", RunAt::DocumentStart, Phase::Capture, 5, ""))
            .unwrap()
            .with(ext("b", RunAt::DocumentStart, Phase::Bubble, 0, ""))
            .unwrap();
        assert_eq!(execution_order(&r), ["a", "b"]);

        let r = Registry::new()
            .with(ext("b", RunAt::DocumentStart, Phase::Capture, 1, ""))
            .unwrap()
            .with(ext("a", RunAt::DocumentStart, Phase::Capture, 0, ""))
            .unwrap();
        assert_eq!(execution_order(&r), ["a", "b"]);
    }

    #[test]
    fn registry_uniqueness() {
        let mut r = Registry::new();
        r.install(plain("a", 0, "")).unwrap();
        assert_eq!(r.install(plain("a", 1, "")), Err(PipelineError::DuplicateId("a".into())));
        assert_eq!(r.install(plain("b", 0, "")), Err(PipelineError::DuplicateInstallTime(0)));
    }

    #[test]
    fn disabled_extensions_skipped() {
        let mut r = Registry::new().with(plain("a", 0, "")).unwrap().with(plain("b", 1, "")).unwrap();
        r.set_enabled("a", false).unwrap();
        assert_eq!(r.execution_order(), ["b"]);
        r.set_enabled("b", false).unwrap();
        assert_eq!(run_pipeline(&mut r, &parse("")), Err(PipelineError::EmptyRegistry));
    }

    #[test]
    fn single_identity_extension() {
        let mut r = Registry::new().with(plain("id", 0, "")).unwrap();
        let t = parse("<body><p>x</p></body>");
        let trace = run_pipeline(&mut r, &t).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].input, t);
        assert_eq!(trace.steps[0].output, t);
        assert_eq!(trace.final_tree(), &t);
    }

    #[test]
    fn insert_only_pipeline_is_monotone() {
        let mut r = Registry::new()
            .with(plain("a", 0, r#"on tag=img insert-child "<span></span>" all"#))
            .unwrap()
            .with(plain("b", 1, r#"on root insert-child "<div id=x></div>""#))
            .unwrap();
        let dom0 = parse("<body><img></img><img></img></body>");
        let trace = run_pipeline(&mut r, &dom0).unwrap();
        assert!(trace.is_threaded());
        assert!(subtree_leq(&dom0, trace.final_tree()));
        assert!(subtree_leq(&trace.steps[0].output, trace.final_tree()));
    }

    #[test]
    fn delete_then_reinsert_is_invisible() {
        let mut r = Registry::new()
            .with(plain("del", 0, "on tag=p delete-self"))
            .unwrap()
            .with(plain("re", 1, r#"on root insert-child "<p></p>""#))
            .unwrap();
        let dom0 = parse("<body><div></div><p></p></body>");
        let trace = run_pipeline(&mut r, &dom0).unwrap();
        assert_ne!(trace.steps[0].output, dom0);
        assert!(diff(&dom0, trace.final_tree()).is_empty());
    }

    #[test]
    fn knowledge_sets() {
        let mut r = Registry::new()
            .with(plain("a", 0, r#"on root insert-child "<p></p>""#))
            .unwrap()
            .with(plain("b", 1, ""))
            .unwrap();
        let dom0 = parse("<body></body>");
        let trace = run_pipeline(&mut r, &dom0).unwrap();
        let k1 = default_knowledge(&trace, 1).unwrap();
        assert_eq!(k1.snapshots(), std::slice::from_ref(&dom0));
        let k2 = default_knowledge(&trace, 2).unwrap();
        assert_eq!(k2.snapshots(), &[dom0.clone(), trace.steps[0].output.clone()]);
        assert_eq!((k1.len(), k2.len()), (1, 2));
        assert!(k1.is_subset_of(&k2));
        assert_eq!(
            default_knowledge(&trace, 3),
            Err(PipelineError::IndexOutOfRange { index: 3, steps: 2 })
        );
        assert!(default_knowledge(&trace, 0).is_err());
    }

    #[test]
    fn usual_attacker_sees_spans() {
        let mut r = Registry::new()
            .with(plain("pin", 0, r#"on tag=img insert-child "<span class=hidden></span>" all"#))
            .unwrap()
            .with(make_usual_attacker("spy", 1))
            .unwrap();
        let dom0 = parse("<body><img></img><p></p><img></img></body>");
        run_pipeline(&mut r, &dom0).unwrap();
        let learned = usual_attacker_learned(r.get("spy").unwrap(), &dom0).unwrap();
        assert_eq!(learned.entries.len(), 2);
        assert!(learned.entries.iter().all(|e| e.op() == PatchOp::Insert));
    }

    #[test]
    fn usual_attacker_first_learns_nothing() {
        let mut r = Registry::new()
            .with(plain("pin", 5, r#"on tag=img insert-child "<span></span>" all"#))
            .unwrap()
            .with(ext("spy", RunAt::DocumentStart, Phase::Capture, 0, ""))
            .unwrap();
        let dom0 = parse("<body><img></body>");
        run_pipeline(&mut r, &dom0).unwrap();
        let learned = usual_attacker_learned(r.get("spy").unwrap(), &dom0).unwrap();
        assert!(learned.entries.is_empty());
    }

    #[test]
    fn strong_attacker_interleaves() {
        let r = Registry::new()
            .with(plain("a", 0, r#"on root insert-child "<span></span>""#))
            .unwrap()
            .with(ext("b", RunAt::DocumentStart, Phase::Capture, 7, r#"on root insert-child "<div></div>""#))
            .unwrap();
        let atk = Manifest::new("atk", RunAt::DocumentIdle, Phase::Bubble, 99).with_privilege(Privilege::Management);
        let mut attacked = make_strong_attacker(&r, &atk).unwrap();
        assert_eq!(attacked.execution_order(), ["atk#0", "b", "atk#1", "a", "atk#2"]);

        let dom0 = parse("<body></body>");
        let trace = run_pipeline(&mut attacked, &dom0).unwrap();
        let attribution = strong_attacker_attribution(&trace, "atk");
        assert_eq!(attribution.len(), 2);
        assert_eq!(attribution[0].extension_id, "b");
        assert_eq!(attribution[0].entries, diff(&trace.steps[1].input, &trace.steps[1].output));
        assert_eq!(attribution[1].extension_id, "a");

        let weak = Manifest::new("atk", RunAt::DocumentIdle, Phase::Bubble, 99);
        assert_eq!(make_strong_attacker(&r, &weak), Err(PipelineError::PrivilegeDenied("atk".into())));
    }

    #[test]
    fn secure_preferences_reorder() {
        let r = Registry::new()
            .with(plain("atk", 0, ""))
            .unwrap()
            .with(plain("a", 1, ""))
            .unwrap()
            .with(plain("b", 2, ""))
            .unwrap();
        let last = reorder_via_secure_preferences(&r, "atk", 3).unwrap();
        assert_eq!(last.execution_order(), ["a", "b", "atk"]);
        let first = reorder_via_secure_preferences(&last, "atk", 0).unwrap();
        assert_eq!(first.execution_order(), ["atk", "a", "b"]);
        assert_eq!(
            reorder_via_secure_preferences(&r, "ghost", 9),
            Err(PipelineError::UnknownExtension("ghost".into()))
        );
        assert_eq!(
            reorder_via_secure_preferences(&r, "atk", 2),
            Err(PipelineError::DuplicateInstallTime(2))
        );
    }

    #[test]
    fn management_reorder() {
        let mut atk = plain("atk", 1, "");
        atk.manifest.privileges.insert(Privilege::Management);
        let r = Registry::new()
            .with(plain("a", 0, ""))
            .unwrap()
            .with(atk)
            .unwrap()
            .with(plain("b", 2, ""))
            .unwrap();
        assert_eq!(r.execution_order(), ["a", "atk", "b"]);
        let out = reorder_via_management(&r, "atk").unwrap();
        assert_eq!(out.execution_order(), ["a", "b", "atk"]);
        assert_eq!(out.get("a").unwrap().manifest.install_time, 3);
        assert_eq!(out.get("atk").unwrap().manifest.install_time, 5);

        let mut solo = plain("atk", 4, "");
        solo.manifest.privileges.insert(Privilege::Management);
        let single = Registry::new().with(solo).unwrap();
        assert_eq!(reorder_via_management(&single, "atk").unwrap().execution_order(), ["atk"]);

        let r = Registry::new().with(plain("a", 0, "")).unwrap().with(plain("atk", 1, "")).unwrap();
        assert_eq!(reorder_via_management(&r, "atk"), Err(PipelineError::PrivilegeDenied("atk".into())));
    }
}

//! Scenario runs and their reports.

use std::fmt::Write as _;

use thiserror::Error;

use crate::diff::diff;
use crate::dom::{serialize, DomTree};
use crate::extension::Extension;
use crate::merge::{merge_store, ConflictPolicy, MergeError};
use crate::monitor::{guard, interleave_observers, run_guarded, GuardedRegistry, MonitorConfig, MonitorError, SlotRole, Violation};
use crate::patch::PatchTable;
use crate::pipeline::{
    default_knowledge, make_strong_attacker, make_usual_attacker, reorder_via_management, reorder_via_secure_preferences,
    run_pipeline, strong_attacker_attribution, ExecutionTrace, PipelineError, Registry,
};
use crate::records::{format_entries, format_table, parse_table, RecordError};
use crate::scenario::{AttackerKind, AttackerSpec, Manipulation, Scenario, ScenarioError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Unguarded,
    Guarded,
    Differential,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unguarded => "unguarded",
            Mode::Guarded => "guarded",
            Mode::Differential => "differential",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unguarded" => Ok(Mode::Unguarded),
            "guarded" => Ok(Mode::Guarded),
            "differential" => Ok(Mode::Differential),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Merge(#[from] MergeError),
}

impl RunError {
    /// 2 for a conflict under the fail policy, 4 for anything else wrong
    /// with the scenario.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Monitor(MonitorError::Merge(MergeError::ConflictDetected { .. }))
            | RunError::Merge(MergeError::ConflictDetected { .. }) => 2,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotRow {
    pub id: String,
    pub role: String,
    pub input_size: usize,
    pub output_size: usize,
    pub nanos: u128,
}

/// What one extension could learn from its default knowledge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeRow {
    pub id: String,
    pub position: usize,
    pub snapshots: usize,
    /// Entries of `diff(DOM_0, input)`.
    pub learned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackerOutcome {
    Ran {
        kind: AttackerKind,
        id: String,
        learned: usize,
        /// Strong attacker only: entry counts attributed between probes.
        attributed: Vec<(String, usize)>,
    },
    Denied {
        id: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verification {
    Checked(Vec<Violation>),
    Denied,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineReport {
    pub guarded: bool,
    pub slots: Vec<SlotRow>,
    pub knowledge: Vec<KnowledgeRow>,
    pub attacker: Option<AttackerOutcome>,
    pub final_tree: DomTree,
    /// Guarded runs: the patch store, conflicts and dropped entry counts.
    pub store: Option<PatchTable>,
    pub conflicts: usize,
    pub dropped: usize,
    pub verification: Option<Verification>,
    /// Unguarded runs: per-step diffs, for the records format.
    pub step_diffs: Vec<(usize, String)>,
}

impl PipelineReport {
    pub fn violations(&self) -> &[Violation] {
        match &self.verification {
            Some(Verification::Checked(v)) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub scenario: String,
    pub mode: Mode,
    pub policy: ConflictPolicy,
    pub runs: Vec<PipelineReport>,
    /// Differential mode: whether both final trees are equal.
    pub equal: Option<bool>,
}

impl RunReport {
    pub fn unguarded(&self) -> Option<&PipelineReport> {
        self.runs.iter().find(|r| !r.guarded)
    }

    pub fn guarded(&self) -> Option<&PipelineReport> {
        self.runs.iter().find(|r| r.guarded)
    }

    /// 3 when any integrity violation was found, 0 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.runs.iter().any(|r| !r.violations().is_empty()) {
            3
        } else {
            0
        }
    }
}

fn denied(spec: &AttackerSpec, err: impl std::fmt::Display) -> AttackerOutcome {
    AttackerOutcome::Denied {
        id: spec.id.clone(),
        reason: err.to_string(),
    }
}

fn victims(scenario: &Scenario) -> Result<Registry, PipelineError> {
    let mut r = Registry::new();
    for e in &scenario.extensions {
        r.install(e.clone())?;
    }
    Ok(r)
}

fn usual_attacker(spec: &AttackerSpec) -> Extension {
    let mut e = make_usual_attacker(&spec.id, spec.install_time);
    e.manifest.privileges = spec.privileges.clone();
    e
}

/// Installs a usual attacker and applies its manipulation. A denied
/// manipulation leaves the registry as installed.
fn with_usual_attacker(mut registry: Registry, spec: &AttackerSpec) -> Result<(Registry, Option<String>), PipelineError> {
    registry.install(usual_attacker(spec))?;
    let outcome = match spec.manipulation {
        Manipulation::None => Ok(registry.clone()),
        Manipulation::SecurePrefs => {
            let last = registry.max_install_time().map_or(0, |t| t + 1);
            reorder_via_secure_preferences(&registry, &spec.id, last)
        }
        Manipulation::Management => reorder_via_management(&registry, &spec.id),
    };
    match outcome {
        Ok(r) => Ok((r, None)),
        Err(e @ PipelineError::PrivilegeDenied(_)) => Ok((registry, Some(e.to_string()))),
        Err(e) => Err(e),
    }
}

fn knowledge_rows(trace: &ExecutionTrace, skip: impl Fn(&str) -> bool) -> Vec<KnowledgeRow> {
    let dom0 = &trace.initial;
    trace
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| !skip(&s.extension_id))
        .map(|(i, s)| KnowledgeRow {
            id: s.extension_id.clone(),
            position: i + 1,
            snapshots: default_knowledge(trace, i + 1).map_or(0, |k| k.len()),
            learned: diff(dom0, &s.input).len(),
        })
        .collect()
}

fn slot_rows(trace: &ExecutionTrace, role: impl Fn(usize) -> String) -> Vec<SlotRow> {
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| SlotRow {
            id: s.extension_id.clone(),
            role: role(i),
            input_size: s.input.size(),
            output_size: s.output.size(),
            nanos: trace.elapsed.get(i).map_or(0, |d| d.as_nanos()),
        })
        .collect()
}

fn attacker_row(trace: &ExecutionTrace, spec: &AttackerSpec) -> AttackerOutcome {
    let learned = match spec.kind {
        AttackerKind::Usual => trace
            .steps
            .iter()
            .find(|s| s.extension_id == spec.id)
            .map_or(0, |s| diff(&trace.initial, &s.input).len()),
        AttackerKind::Strong => trace
            .steps
            .iter()
            .rfind(|s| s.extension_id.starts_with(&format!("{}#", spec.id)))
            .map_or(0, |s| diff(&trace.initial, &s.input).len()),
    };
    let attributed = match spec.kind {
        AttackerKind::Usual => Vec::new(),
        AttackerKind::Strong => strong_attacker_attribution(trace, &spec.id)
            .into_iter()
            .map(|a| (a.extension_id, a.entries.len()))
            .collect(),
    };
    AttackerOutcome::Ran {
        kind: spec.kind,
        id: spec.id.clone(),
        learned,
        attributed,
    }
}

/// Runs the scenario without monitors.
pub fn run_unguarded(scenario: &Scenario) -> Result<PipelineReport, RunError> {
    let base = victims(scenario)?;
    let mut attacker = None;
    let mut registry = match &scenario.attacker {
        None => base,
        Some(spec) if spec.kind == AttackerKind::Usual => {
            let (r, refused) = with_usual_attacker(base, spec)?;
            attacker = refused.map(|reason| denied(spec, reason));
            r
        }
        Some(spec) => match make_strong_attacker(&base, &spec.manifest()) {
            Ok(r) => r,
            Err(e @ PipelineError::PrivilegeDenied(_)) => {
                attacker = Some(denied(spec, e));
                base
            }
            Err(e) => return Err(e.into()),
        },
    };
    let trace = run_pipeline(&mut registry, &scenario.dom0)?;
    if let (None, Some(spec)) = (&attacker, &scenario.attacker) {
        attacker = Some(attacker_row(&trace, spec));
    }
    let step_diffs = trace
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (i + 1, format_entries(i + 1, &diff(&s.input, &s.output))))
        .collect();
    let attacker_id = scenario.attacker.as_ref().map(|a| a.id.clone());
    let is_probe = |id: &str| match &attacker_id {
        Some(a) => id.starts_with(&format!("{a}#")),
        None => false,
    };
    Ok(PipelineReport {
        guarded: false,
        slots: slot_rows(&trace, |i| {
            if is_probe(&trace.steps[i].extension_id) { "probe" } else { "extension" }.to_string()
        }),
        knowledge: knowledge_rows(&trace, is_probe),
        attacker,
        final_tree: trace.final_tree().clone(),
        store: None,
        conflicts: 0,
        dropped: 0,
        verification: None,
        step_diffs,
    })
}

/// Builds the guarded registry for a scenario: a usual attacker becomes one
/// more victim; a strong attacker's copies are interleaved as foreign slots.
pub fn guarded_registry(scenario: &Scenario, config: MonitorConfig) -> Result<(GuardedRegistry, Option<AttackerOutcome>), RunError> {
    let base = victims(scenario)?;
    let mut refused = None;
    let base = match &scenario.attacker {
        Some(spec) if spec.kind == AttackerKind::Usual => {
            let (r, denial) = with_usual_attacker(base, spec)?;
            refused = denial.map(|reason| denied(spec, reason));
            r
        }
        _ => base,
    };
    let mut g = guard(base, config)?;
    if let Some(spec) = scenario.attacker.as_ref().filter(|a| a.kind == AttackerKind::Strong) {
        match interleave_observers(&mut g, &spec.manifest()) {
            Ok(_) => {}
            Err(e @ MonitorError::PrivilegeDenied(_)) => refused = Some(denied(spec, e)),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((g, refused))
}

pub fn run_guarded_report(scenario: &Scenario, policy: ConflictPolicy) -> Result<PipelineReport, RunError> {
    let spec = scenario.guard_spec();
    let config = MonitorConfig {
        conflict_policy: policy,
        ..spec.config
    };
    let (mut g, mut attacker) = guarded_registry(scenario, config)?;
    let verification = match g.verify(&spec.privileges) {
        Ok(v) => Verification::Checked(v),
        Err(MonitorError::PrivilegeDenied(_)) => Verification::Denied,
        Err(e) => return Err(e.into()),
    };
    let run = run_guarded(&mut g, &scenario.dom0)?;
    if let (None, Some(a)) = (&attacker, &scenario.attacker) {
        attacker = Some(attacker_row(&run.trace, a));
    }
    let roles: Vec<String> = g.slots().iter().map(|s| SlotRole::kind(s).to_string()).collect();
    let trusted = |id: &str| id.starts_with("pguard:");
    let attacker_id = scenario.attacker.as_ref().map(|a| a.id.clone());
    let skip = |id: &str| {
        trusted(id)
            || match &attacker_id {
                Some(a) => id.starts_with(&format!("{a}#")),
                None => false,
            }
    };
    Ok(PipelineReport {
        guarded: true,
        slots: slot_rows(&run.trace, |i| roles[i].clone()),
        knowledge: knowledge_rows(&run.trace, skip)
            .into_iter()
            .map(|mut k| {
                // a victim's knowledge is what it observed: DOM_0 only
                k.snapshots = if run.trace.steps[k.position - 1].input == run.trace.initial { 1 } else { 2 };
                k
            })
            .collect(),
        attacker,
        final_tree: run.final_tree().clone(),
        conflicts: run.merge.conflicts.len(),
        dropped: run.merge.dropped.len(),
        store: Some(run.store),
        verification: Some(verification),
        step_diffs: Vec::new(),
    })
}

pub fn run_command(scenario: &Scenario, mode: Mode, policy: Option<ConflictPolicy>) -> Result<RunReport, RunError> {
    let policy = policy.unwrap_or(scenario.guard_spec().config.conflict_policy);
    let runs = match mode {
        Mode::Unguarded => vec![run_unguarded(scenario)?],
        Mode::Guarded => vec![run_guarded_report(scenario, policy)?],
        Mode::Differential => vec![run_unguarded(scenario)?, run_guarded_report(scenario, policy)?],
    };
    let equal = (mode == Mode::Differential).then(|| runs[0].final_tree == runs[1].final_tree);
    Ok(RunReport {
        scenario: scenario.name.clone(),
        mode,
        policy,
        runs,
        equal,
    })
}

/// The guarded run's patch store in record format, headed by comments
/// naming the scenario and policy.
pub fn dump_store(scenario: &Scenario, policy: Option<ConflictPolicy>) -> Result<String, RunError> {
    let report = run_command(scenario, Mode::Guarded, policy)?;
    let run = report.guarded().expect("guarded mode");
    let mut out = format!("# scenario {}\n# policy {}\n", report.scenario, report.policy);
    out.push_str(&format_table(run.store.as_ref().expect("guarded runs keep the store")));
    Ok(out)
}

/// Re-merges dumped records onto `dom0`.
pub fn replay_records(dom0: &DomTree, records: &str, policy: ConflictPolicy) -> Result<DomTree, RunError> {
    let table = parse_table(records)?;
    Ok(merge_store(dom0, &table, policy)?.tree)
}

// ---------------------------------------------------------------------------
// Rendering

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::from(" ");
        for (i, cell) in cells.enumerate() {
            let _ = write!(s, " {:<w$}", cell, w = widths[i]);
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(out, &mut header.iter().copied());
    for row in rows {
        line(out, &mut row.iter().map(String::as_str));
    }
}

fn render_run(out: &mut String, run: &PipelineReport, mask_timings: bool) {
    let label = if run.guarded { "guarded" } else { "unguarded" };
    let _ = writeln!(out, "[{label}]");
    out.push_str("slots\n");
    let rows: Vec<Vec<String>> = run
        .slots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                i.to_string(),
                s.id.clone(),
                s.role.clone(),
                s.input_size.to_string(),
                s.output_size.to_string(),
                if mask_timings { "-".to_string() } else { s.nanos.to_string() },
            ]
        })
        .collect();
    table(out, &["#", "id", "role", "in", "out", "time_ns"], &rows);

    out.push_str("knowledge\n");
    let rows: Vec<Vec<String>> = run
        .knowledge
        .iter()
        .map(|k| vec![k.id.clone(), k.position.to_string(), k.snapshots.to_string(), k.learned.to_string()])
        .collect();
    table(out, &["id", "position", "snapshots", "learned"], &rows);

    match &run.attacker {
        None => {}
        Some(AttackerOutcome::Denied { id, reason }) => {
            let _ = writeln!(out, "attacker {id}: denied ({reason})");
        }
        Some(AttackerOutcome::Ran {
            kind,
            id,
            learned,
            attributed,
        }) => {
            let kind = match kind {
                AttackerKind::Usual => "usual",
                AttackerKind::Strong => "strong",
            };
            let _ = writeln!(out, "attacker {id}: {kind}, learned {learned} entries");
            for (victim, n) in attributed {
                let _ = writeln!(out, "  attributed to {victim}: {n}");
            }
        }
    }

    if let Some(store) = &run.store {
        let _ = writeln!(
            out,
            "store: {} entries, {} conflicts, {} dropped",
            store.len(),
            run.conflicts,
            run.dropped
        );
        for line in format_table(store).lines() {
            let _ = writeln!(out, "  {line}");
        }
    }
    match &run.verification {
        None => {}
        Some(Verification::Denied) => out.push_str("violations: denied (verifier lacks management)\n"),
        Some(Verification::Checked(v)) if v.is_empty() => out.push_str("violations: none\n"),
        Some(Verification::Checked(v)) => {
            let _ = writeln!(out, "violations: {}", v.len());
            for violation in v {
                let _ = writeln!(out, "  {violation}");
            }
        }
    }
    let _ = writeln!(out, "final {}", serialize(&run.final_tree));
}

impl RunReport {
    /// Aligned text tables. With `mask_timings` the output is fully
    /// deterministic.
    pub fn render_table(&self, mask_timings: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}", self.scenario);
        let _ = writeln!(out, "mode {}", self.mode.as_str());
        let _ = writeln!(out, "policy {}", self.policy);
        for run in &self.runs {
            render_run(&mut out, run, mask_timings);
        }
        if let Some(eq) = self.equal {
            let _ = writeln!(out, "equal {eq}");
        }
        out
    }

    /// Patch records: the store for guarded runs, per-step diffs for
    /// unguarded runs.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for run in &self.runs {
            if let Some(store) = &run.store {
                out.push_str("# guarded store\n");
                out.push_str(&format_table(store));
            } else {
                out.push_str("# unguarded steps\n");
                for (_, text) in &run.step_diffs {
                    out.push_str(text);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    const PIN: &str = r#"
name pin
[dom]
<body><img></img><p>hi</p><img></img></body>
[extension pin]
run_at document_end
phase bubble
install_time 1
rule on tag=img insert-child "<span class=hidden></span>" all
[attacker]
kind usual
id spy
install_time 9
"#;

    fn learned(run: &PipelineReport) -> usize {
        match &run.attacker {
            Some(AttackerOutcome::Ran { learned, .. }) => *learned,
            other => panic!("attacker did not run: {other:?}"),
        }
    }

    #[test]
    fn attacker_learns_only_unguarded() {
        let s = parse_scenario(PIN).unwrap();
        let r = run_command(&s, Mode::Differential, None).unwrap();
        assert_eq!(learned(r.unguarded().unwrap()), 2);
        assert_eq!(learned(r.guarded().unwrap()), 0);
        assert_eq!(r.equal, Some(true));
        assert_eq!(r.exit_code(), 0);
    }

    #[test]
    fn masked_render_is_deterministic() {
        let s = parse_scenario(PIN).unwrap();
        let a = run_command(&s, Mode::Differential, None).unwrap().render_table(true);
        let b = run_command(&s, Mode::Differential, None).unwrap().render_table(true);
        assert_eq!(a, b);
        assert!(a.contains("equal true"));
    }

    #[test]
    fn dump_and_replay() {
        let s = parse_scenario(PIN).unwrap();
        let dumped = dump_store(&s, None).unwrap();
        let report = run_command(&s, Mode::Guarded, None).unwrap();
        let replayed = replay_records(&s.dom0, &dumped, ConflictPolicy::LastWins).unwrap();
        assert_eq!(serialize(&replayed), serialize(&report.guarded().unwrap().final_tree));
    }

    #[test]
    fn strong_attacker_without_privilege_is_denied() {
        let text = PIN.replace("kind usual", "kind strong");
        let s = parse_scenario(&text).unwrap();
        for mode in [Mode::Unguarded, Mode::Guarded] {
            let r = run_command(&s, mode, None).unwrap();
            assert!(matches!(r.runs[0].attacker, Some(AttackerOutcome::Denied { .. })));
        }
    }

    #[test]
    fn strong_attacker_in_guarded_run_is_flagged() {
        let text = PIN.replace("kind usual", "kind strong\nprivileges management");
        let s = parse_scenario(&text).unwrap();
        let r = run_command(&s, Mode::Guarded, None).unwrap();
        let run = r.guarded().unwrap();
        assert_eq!(run.violations().len(), 2);
        assert_eq!(r.exit_code(), 3);
        match &run.attacker {
            Some(AttackerOutcome::Ran { attributed, .. }) => assert!(attributed.iter().all(|(_, n)| *n == 0)),
            other => panic!("{other:?}"),
        }
        let r = run_command(&s, Mode::Unguarded, None).unwrap();
        match &r.runs[0].attacker {
            Some(AttackerOutcome::Ran { attributed, .. }) => assert_eq!(attributed, &[("pin".to_string(), 2)]),
            other => panic!("{other:?}"),
        }
    }
}

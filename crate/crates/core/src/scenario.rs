//! Scenario files.
//!
//! A line-oriented format with sections. `#` starts a comment line.
//!
//! ```text
//! name pinterest-span
//!
//! [dom]
//! <body><img></img></body>
//!
//! [extension pinterest]
//! run_at document_end
//! phase bubble
//! install_time 1
//! rule on tag=img insert-child "<span class=hidden></span>" all
//!
//! [attacker]
//! kind usual
//! id spy
//! install_time 9
//! manipulation none
//!
//! [guard]
//! policy last-wins
//! del strip-all
//! privileges management
//! ```
//!
//! `[dom]` lines are joined and parsed as HTML. An extension accepts
//! `run_at`, `phase`, `install_time`, `privileges` and any number of `rule`
//! lines. The attacker section is optional; `kind` is `usual` or `strong`
//! and `manipulation` is `none`, `secure-prefs` or `management`.
//! `privileges none` gives an empty privilege set.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dom::{parse, DomTree};
use crate::extension::{EffectProgram, Extension, Manifest, Phase, Privilege, Privileges, Rule, RunAt};
use crate::merge::ConflictPolicy;
use crate::monitor::{DelPolicy, MonitorConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

fn parse_err(line: usize, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        reason: reason.into(),
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerKind {
    Usual,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manipulation {
    None,
    SecurePrefs,
    Management,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackerSpec {
    pub kind: AttackerKind,
    pub id: String,
    pub install_time: u64,
    pub privileges: Privileges,
    pub manipulation: Manipulation,
}

impl AttackerSpec {
    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(&self.id, RunAt::DocumentIdle, Phase::Bubble, self.install_time);
        m.privileges = self.privileges.clone();
        m
    }

    pub fn has_management(&self) -> bool {
        self.privileges.contains(&Privilege::Management)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardSpec {
    pub config: MonitorConfig,
    /// Privileges of the integrity verifier.
    pub privileges: Privileges,
}

impl Default for GuardSpec {
    fn default() -> Self {
        GuardSpec {
            config: MonitorConfig::default(),
            privileges: [Privilege::Management].into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub dom0: DomTree,
    pub extensions: Vec<Extension>,
    pub attacker: Option<AttackerSpec>,
    pub guard: Option<GuardSpec>,
}

impl Scenario {
    pub fn guard_spec(&self) -> GuardSpec {
        self.guard.clone().unwrap_or_default()
    }
}

#[derive(Default)]
struct ExtensionDraft {
    id: String,
    line: usize,
    run_at: Option<RunAt>,
    phase: Option<Phase>,
    install_time: Option<u64>,
    privileges: Privileges,
    rules: Vec<Rule>,
}

#[derive(Default)]
struct AttackerDraft {
    kind: Option<AttackerKind>,
    id: Option<String>,
    install_time: Option<u64>,
    privileges: Privileges,
    manipulation: Option<Manipulation>,
}

enum Section {
    Top,
    Dom,
    Extension(usize),
    Attacker,
    Guard,
}

fn privileges(value: &str, line: usize) -> Result<Privileges, ScenarioError> {
    if value == "none" {
        return Ok(Privileges::new());
    }
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Privilege>().map_err(|e| parse_err(line, e.to_string())))
        .collect()
}

fn number(field: &str, value: &str) -> Result<u64, ScenarioError> {
    value
        .parse()
        .map_err(|_| invalid(field, format!("{value:?} is not a non-negative integer")))
}

fn set_once<T>(slot: &mut Option<T>, value: T, key: &str, line: usize) -> Result<(), ScenarioError> {
    if slot.is_some() {
        return Err(parse_err(line, format!("duplicate {key}")));
    }
    *slot = Some(value);
    Ok(())
}

/// Parses scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut name: Option<String> = None;
    let mut dom_lines: Vec<&str> = Vec::new();
    let mut saw_dom = false;
    let mut extensions: Vec<ExtensionDraft> = Vec::new();
    let mut attacker: Option<AttackerDraft> = None;
    let mut guard: Option<GuardSpec> = None;
    let mut section = Section::Top;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.starts_with('[') {
            let header = trimmed
                .strip_prefix('[')
                .and_then(|h| h.strip_suffix(']'))
                .ok_or_else(|| parse_err(line, "unterminated section header"))?
                .trim();
            let mut words = header.split_whitespace();
            section = match (words.next(), words.next(), words.next()) {
                (Some("dom"), None, _) => {
                    if saw_dom {
                        return Err(parse_err(line, "duplicate [dom] section"));
                    }
                    saw_dom = true;
                    Section::Dom
                }
                (Some("extension"), Some(id), None) => {
                    if extensions.iter().any(|e| e.id == id) {
                        return Err(invalid("id", format!("extension {id:?} declared twice")));
                    }
                    extensions.push(ExtensionDraft {
                        id: id.to_string(),
                        line,
                        ..Default::default()
                    });
                    Section::Extension(extensions.len() - 1)
                }
                (Some("attacker"), None, _) => {
                    if attacker.is_some() {
                        return Err(parse_err(line, "duplicate [attacker] section"));
                    }
                    attacker = Some(AttackerDraft::default());
                    Section::Attacker
                }
                (Some("guard"), None, _) => {
                    if guard.is_some() {
                        return Err(parse_err(line, "duplicate [guard] section"));
                    }
                    guard = Some(GuardSpec::default());
                    Section::Guard
                }
                _ => return Err(parse_err(line, format!("unknown section [{header}]"))),
            };
            continue;
        }
        if let Section::Dom = section {
            dom_lines.push(raw);
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let (key, value) = match trimmed.split_once(char::is_whitespace) {
            Some((k, v)) => (k, v.trim()),
            None => (trimmed, ""),
        };
        match &mut section {
            Section::Dom => unreachable!("handled above"),
            Section::Top => match key {
                "name" if !value.is_empty() => set_once(&mut name, value.to_string(), key, line)?,
                _ => return Err(parse_err(line, format!("unexpected {trimmed:?} outside a section"))),
            },
            Section::Extension(i) => {
                let ext = &mut extensions[*i];
                match key {
                    "run_at" => {
                        let v = value.parse().map_err(|e: crate::extension::ExtensionError| invalid("run_at", e.to_string()))?;
                        set_once(&mut ext.run_at, v, key, line)?;
                    }
                    "phase" => {
                        let v = value.parse().map_err(|e: crate::extension::ExtensionError| invalid("phase", e.to_string()))?;
                        set_once(&mut ext.phase, v, key, line)?;
                    }
                    "install_time" => set_once(&mut ext.install_time, number("install_time", value)?, key, line)?,
                    "privileges" => ext.privileges = privileges(value, line)?,
                    "rule" => ext
                        .rules
                        .push(value.parse().map_err(|e: crate::extension::ExtensionError| parse_err(line, e.to_string()))?),
                    _ => return Err(parse_err(line, format!("unknown extension key {key:?}"))),
                }
            }
            Section::Attacker => {
                let a = attacker.as_mut().expect("section opened");
                match key {
                    "kind" => {
                        let kind = match value {
                            "usual" => AttackerKind::Usual,
                            "strong" => AttackerKind::Strong,
                            other => return Err(invalid("kind", format!("{other:?} is not usual or strong"))),
                        };
                        set_once(&mut a.kind, kind, key, line)?;
                    }
                    "id" => set_once(&mut a.id, value.to_string(), key, line)?,
                    "install_time" => set_once(&mut a.install_time, number("install_time", value)?, key, line)?,
                    "privileges" => a.privileges = privileges(value, line)?,
                    "manipulation" => {
                        let m = match value {
                            "none" => Manipulation::None,
                            "secure-prefs" => Manipulation::SecurePrefs,
                            "management" => Manipulation::Management,
                            other => return Err(invalid("manipulation", format!("unknown manipulation {other:?}"))),
                        };
                        set_once(&mut a.manipulation, m, key, line)?;
                    }
                    _ => return Err(parse_err(line, format!("unknown attacker key {key:?}"))),
                }
            }
            Section::Guard => {
                let g = guard.as_mut().expect("section opened");
                match key {
                    "policy" => {
                        g.config.conflict_policy = value
                            .parse::<ConflictPolicy>()
                            .map_err(|e| invalid("policy", e.to_string()))?
                    }
                    "del" => g.config.del_policy = value.parse::<DelPolicy>().map_err(|e| invalid("del", e))?,
                    "privileges" => g.privileges = privileges(value, line)?,
                    _ => return Err(parse_err(line, format!("unknown guard key {key:?}"))),
                }
            }
        }
    }

    let name = name.ok_or_else(|| invalid("name", "missing name line"))?;
    let dom_text = dom_lines.join("\n");
    if !saw_dom || dom_text.trim().is_empty() {
        return Err(invalid("dom0", "missing or empty [dom] section"));
    }
    let dom0 = parse(&dom_text);

    let mut built = Vec::with_capacity(extensions.len());
    for e in extensions {
        let field = |f: &str| invalid(f, format!("extension {:?} (line {}) has no {f}", e.id, e.line));
        let mut manifest = Manifest::new(
            &e.id,
            e.run_at.ok_or_else(|| field("run_at"))?,
            e.phase.ok_or_else(|| field("phase"))?,
            e.install_time.ok_or_else(|| field("install_time"))?,
        );
        manifest.privileges = e.privileges;
        built.push(Extension::new(manifest, EffectProgram::new(e.rules)));
    }
    if built.is_empty() {
        return Err(invalid("extensions", "at least one [extension] section is required"));
    }

    let attacker = match attacker {
        None => None,
        Some(a) => {
            let id = a.id.ok_or_else(|| invalid("id", "attacker has no id"))?;
            let install_time = a.install_time.ok_or_else(|| invalid("install_time", "attacker has no install_time"))?;
            if built.iter().any(|e| e.id() == id) {
                return Err(invalid("id", format!("attacker id {id:?} is also an extension")));
            }
            Some(AttackerSpec {
                kind: a.kind.unwrap_or(AttackerKind::Usual),
                id,
                install_time,
                privileges: a.privileges,
                manipulation: a.manipulation.unwrap_or(Manipulation::None),
            })
        }
    };

    let mut times: Vec<u64> = built.iter().map(|e| e.manifest.install_time).collect();
    times.extend(attacker.as_ref().map(|a| a.install_time));
    times.sort_unstable();
    if let Some(w) = times.windows(2).find(|w| w[0] == w[1]) {
        return Err(invalid("install_time", format!("install time {} used twice", w[0])));
    }

    Ok(Scenario {
        name,
        dom0,
        extensions: built,
        attacker,
        guard,
    })
}

/// Reads and parses a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_scenario(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
name demo
# a comment
[dom]
<body>
  <img></img>
</body>

[extension pin]
run_at document_end
phase bubble
install_time 1
rule on tag=img insert-child "<span class=hidden></span>" all

[attacker]
kind usual
id spy
install_time 9

[guard]
policy first-wins
"#;

    #[test]
    fn parses_all_sections() {
        let s = parse_scenario(BASIC).unwrap();
        assert_eq!(s.name, "demo");
        assert_eq!(s.dom0, parse("<body><img></img></body>"));
        assert_eq!(s.extensions.len(), 1);
        assert_eq!(s.extensions[0].program.rules.len(), 1);
        let a = s.attacker.unwrap();
        assert_eq!((a.kind, a.manipulation, a.install_time), (AttackerKind::Usual, Manipulation::None, 9));
        let g = s.guard.unwrap();
        assert_eq!(g.config.conflict_policy, ConflictPolicy::FirstWins);
        assert!(g.privileges.contains(&Privilege::Management));
    }

    #[test]
    fn validation_errors_name_the_field() {
        let bad_run_at = BASIC.replace("run_at document_end", "run_at document_later");
        assert!(matches!(
            parse_scenario(&bad_run_at),
            Err(ScenarioError::Validation { field, .. }) if field == "run_at"
        ));
        let no_dom = BASIC.replace("[dom]\n<body>\n  <img></img>\n</body>\n", "");
        assert!(matches!(
            parse_scenario(&no_dom),
            Err(ScenarioError::Validation { field, .. }) if field == "dom0"
        ));
        let clash = BASIC.replace("install_time 9", "install_time 1");
        assert!(matches!(
            parse_scenario(&clash),
            Err(ScenarioError::Validation { field, .. }) if field == "install_time"
        ));
    }

    #[test]
    fn parse_errors_carry_lines() {
        let bad_rule = BASIC.replace("rule on tag=img", "rule under tag=img");
        assert!(matches!(parse_scenario(&bad_rule), Err(ScenarioError::Parse { line: 13, .. })));
        assert!(matches!(
            parse_scenario("name x\n[extra]\n"),
            Err(ScenarioError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_scenario("stray\n"),
            Err(ScenarioError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_scenario("/nonexistent/x.scn"), Err(ScenarioError::Io { .. })));
    }
}

//! Extensions: manifest metadata plus a declarative effect program.
//!
//! Content scripts are replaced by a closed rule language so that every
//! effect is deterministic and analyzable. A rule selects nodes and applies
//! one action to the first match or to all matches.
//!
//! Rule text syntax (one rule per line in scenario files):
//!
//! ```text
//! on <selector> <action> [first|all]
//!
//! selector := tag=<name> | attr=<name>=<value> | path=/i/j | root
//! action   := insert-child "<html>" [at=<index>]
//!           | delete-self
//!           | set-attr <name> "<value>"
//!           | set-text "<value>"
//!           | nothing
//! ```
//!
//! Quoted strings use `\"` and `\\` escapes. The scope defaults to `first`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dom::{parse_fragment, serialize_node, DomNode, DomTree, NodePath};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtensionError {
    #[error("invalid run_at value {0:?}")]
    InvalidRunAt(String),
    #[error("invalid phase {0:?}")]
    InvalidPhase(String),
    #[error("invalid privilege {0:?}")]
    InvalidPrivilege(String),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
}

/// Injection moment; the first-level ordering key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunAt {
    DocumentStart,
    DocumentEnd,
    DocumentIdle,
}

impl RunAt {
    pub const ALL: [RunAt; 3] = [RunAt::DocumentStart, RunAt::DocumentEnd, RunAt::DocumentIdle];

    pub fn rank(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunAt::DocumentStart => "document_start",
            RunAt::DocumentEnd => "document_end",
            RunAt::DocumentIdle => "document_idle",
        }
    }
}

impl fmt::Display for RunAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunAt {
    type Err = ExtensionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RunAt::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| ExtensionError::InvalidRunAt(s.to_string()))
    }
}

/// Event propagation phase; the second-level ordering key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Capture,
    Bubble,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Capture, Phase::Bubble];

    pub fn rank(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Capture => "capture",
            Phase::Bubble => "bubble",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = ExtensionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ExtensionError::InvalidPhase(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Privilege {
    Management,
}

impl FromStr for Privilege {
    type Err = ExtensionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "management" => Ok(Privilege::Management),
            _ => Err(ExtensionError::InvalidPrivilege(s.to_string())),
        }
    }
}

impl fmt::Display for Privilege {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Privilege::Management => f.write_str("management"),
        }
    }
}

pub type Privileges = BTreeSet<Privilege>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub id: String,
    pub run_at: RunAt,
    pub phase: Phase,
    /// Logical install clock; unique within a registry.
    pub install_time: u64,
    pub privileges: Privileges,
}

impl Manifest {
    pub fn new(id: &str, run_at: RunAt, phase: Phase, install_time: u64) -> Self {
        Manifest {
            id: id.to_string(),
            run_at,
            phase,
            install_time,
            privileges: Privileges::new(),
        }
    }

    pub fn with_privilege(mut self, p: Privilege) -> Self {
        self.privileges.insert(p);
        self
    }

    pub fn has_management(&self) -> bool {
        self.privileges.contains(&Privilege::Management)
    }

    /// Execution-order key: run_at rank, then phase rank, then install time.
    pub fn order_key(&self) -> (u8, u8, u64) {
        (self.run_at.rank(), self.phase.rank(), self.install_time)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Tag(String),
    Attribute { name: String, value: String },
    Path(NodePath),
    Root,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertIndex {
    At(usize),
    Append,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    InsertChild { node: DomNode, index: InsertIndex },
    DeleteSelf,
    SetAttribute { name: String, value: String },
    SetText(String),
    Nothing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    FirstMatch,
    AllMatches,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub selector: Selector,
    pub action: Action,
    pub scope: Scope,
}

impl Rule {
    pub fn new(selector: Selector, action: Action, scope: Scope) -> Self {
        Rule {
            selector,
            action,
            scope,
        }
    }

    fn is_monotone(&self) -> bool {
        matches!(self.action, Action::InsertChild { .. } | Action::Nothing)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EffectProgram {
    pub rules: Vec<Rule>,
}

impl EffectProgram {
    pub fn new(rules: Vec<Rule>) -> Self {
        EffectProgram { rules }
    }

    /// Parses one rule per non-empty line.
    pub fn parse(text: &str) -> Result<Self, ExtensionError> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Rule>, _>>()
            .map(EffectProgram::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    Monotone,
    NonMonotone,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extension {
    pub manifest: Manifest,
    pub program: EffectProgram,
    observation_log: Vec<DomTree>,
}

impl Extension {
    pub fn new(manifest: Manifest, program: EffectProgram) -> Self {
        Extension {
            manifest,
            program,
            observation_log: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    /// Every input this extension has been handed, oldest first.
    pub fn observation_log(&self) -> &[DomTree] {
        &self.observation_log
    }

    pub fn last_observation(&self) -> Option<&DomTree> {
        self.observation_log.last()
    }

    pub fn clear_observations(&mut self) {
        self.observation_log.clear();
    }

    /// Runs the program against `input`, logging the input. Rule `k` sees
    /// the effects of rules before it; matches are collected before a rule's
    /// action runs, so a rule never matches nodes it inserted itself.
    pub fn evaluate(&mut self, input: &DomTree) -> DomTree {
        self.observation_log.push(input.clone());
        apply_program(&self.program, input)
    }

    pub fn classify(&self) -> Monotonicity {
        classify(&self.program)
    }
}

pub fn classify(program: &EffectProgram) -> Monotonicity {
    if program.rules.iter().all(Rule::is_monotone) {
        Monotonicity::Monotone
    } else {
        Monotonicity::NonMonotone
    }
}

fn matches(selector: &Selector, path: &NodePath, node: &DomNode) -> bool {
    match selector {
        Selector::Root => path.is_root(),
        Selector::Path(p) => p == path,
        Selector::Tag(tag) => node.as_element().is_some_and(|e| e.tag() == tag),
        Selector::Attribute { name, value } => node
            .as_element()
            .is_some_and(|e| e.attr(name) == Some(value.as_str())),
    }
}

/// Pure effect of a program on a tree.
pub fn apply_program(program: &EffectProgram, input: &DomTree) -> DomTree {
    if program.rules.iter().all(|r| r.action == Action::Nothing) {
        return input.clone();
    }
    let mut root = input.to_node();
    for rule in &program.rules {
        let mut targets = Vec::new();
        root.walk(&mut |path, node| {
            if matches(&rule.selector, path, node) {
                targets.push(path.clone());
            }
        });
        if rule.scope == Scope::FirstMatch {
            targets.truncate(1);
        }
        // Reverse document order keeps the paths of earlier targets valid.
        for path in targets.iter().rev() {
            apply_action(&mut root, path, &rule.action);
        }
    }
    DomTree::from_node(root).expect("actions never replace the root element")
}

fn apply_action(root: &mut DomNode, path: &NodePath, action: &Action) {
    match action {
        Action::Nothing => {}
        Action::DeleteSelf => {
            // The root element cannot be removed.
            if let Some((parent, idx)) = path.split_last() {
                if let Some(DomNode::Element(p)) = root.resolve_mut(parent) {
                    p.children.remove(idx);
                }
            }
        }
        Action::InsertChild { node, index } => {
            if let Some(DomNode::Element(e)) = root.resolve_mut(path.steps()) {
                let at = match *index {
                    InsertIndex::At(i) => i.min(e.children.len()),
                    InsertIndex::Append => e.children.len(),
                };
                e.children.insert(at, node.clone());
            }
        }
        Action::SetAttribute { name, value } => {
            if let Some(DomNode::Element(e)) = root.resolve_mut(path.steps()) {
                // Names are validated when the rule is built.
                let _ = e.set_attr(name, value);
            }
        }
        Action::SetText(value) => match root.resolve_mut(path.steps()) {
            Some(DomNode::Text(t)) => *t = value.clone(),
            Some(DomNode::Element(e)) => e.children = vec![DomNode::Text(value.clone())],
            None => {}
        },
    }
}

// ---------------------------------------------------------------------------
// Rule text form

fn tokenize(line: &str) -> Result<Vec<String>, ExtensionError> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(tokens);
        }
        let mut token = String::new();
        let mut in_quotes = false;
        while let Some(&c) = chars.peek() {
            if !in_quotes && c.is_whitespace() {
                break;
            }
            chars.next();
            match c {
                '"' => in_quotes = !in_quotes,
                '\\' if in_quotes => match chars.next() {
                    Some(e @ ('"' | '\\')) => token.push(e),
                    Some('n') => token.push('\n'),
                    Some('t') => token.push('\t'),
                    _ => return Err(ExtensionError::InvalidRule(format!("bad escape in {line:?}"))),
                },
                _ => token.push(c),
            }
        }
        if in_quotes {
            return Err(ExtensionError::InvalidRule(format!("unterminated quote in {line:?}")));
        }
        tokens.push(token);
    }
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn valid_attr_name(name: &str) -> bool {
    crate::dom::el("x").set_attr(name, "").is_ok()
}

impl FromStr for Rule {
    type Err = ExtensionError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = |msg: &str| ExtensionError::InvalidRule(format!("{msg} in {line:?}"));
        let tokens = tokenize(line)?;
        let mut it = tokens.iter().map(String::as_str);
        if it.next() != Some("on") {
            return Err(bad("rule must start with 'on'"));
        }

        let selector = match it.next().ok_or_else(|| bad("missing selector"))? {
            "root" => Selector::Root,
            s => {
                let (kind, arg) = s.split_once('=').ok_or_else(|| bad("malformed selector"))?;
                match kind {
                    "tag" => {
                        let tag = arg.to_ascii_lowercase();
                        crate::dom::Element::try_new(&tag).map_err(|_| bad("invalid tag"))?;
                        Selector::Tag(tag)
                    }
                    "attr" => {
                        let (name, value) = arg.split_once('=').ok_or_else(|| bad("attr selector needs name=value"))?;
                        let name = name.to_lowercase();
                        if !valid_attr_name(&name) {
                            return Err(bad("invalid attribute name"));
                        }
                        Selector::Attribute {
                            name,
                            value: value.to_string(),
                        }
                    }
                    "path" => Selector::Path(arg.parse().map_err(|_| bad("invalid path"))?),
                    _ => return Err(bad("unknown selector")),
                }
            }
        };

        let action = match it.next().ok_or_else(|| bad("missing action"))? {
            "insert-child" => {
                let html = it.next().ok_or_else(|| bad("insert-child needs a node"))?;
                let mut nodes = parse_fragment(html);
                if nodes.len() != 1 {
                    return Err(bad("insert-child payload must be exactly one node"));
                }
                let node = nodes.pop().expect("length checked");
                Action::InsertChild { node, index: InsertIndex::Append }
            }
            "delete-self" => Action::DeleteSelf,
            "set-attr" => {
                let name = it.next().ok_or_else(|| bad("set-attr needs a name"))?.to_lowercase();
                if !valid_attr_name(&name) {
                    return Err(bad("invalid attribute name"));
                }
                let value = it.next().ok_or_else(|| bad("set-attr needs a value"))?.to_string();
                Action::SetAttribute { name, value }
            }
            "set-text" => Action::SetText(it.next().ok_or_else(|| bad("set-text needs a value"))?.to_string()),
            "nothing" => Action::Nothing,
            _ => return Err(bad("unknown action")),
        };

        let mut action = action;
        let mut scope = Scope::FirstMatch;
        for tok in it {
            match tok {
                "first" => scope = Scope::FirstMatch,
                "all" => scope = Scope::AllMatches,
                t if t.starts_with("at=") => match &mut action {
                    Action::InsertChild { index, .. } => {
                        *index = InsertIndex::At(t[3..].parse().map_err(|_| bad("invalid insert index"))?)
                    }
                    _ => return Err(bad("at= only applies to insert-child")),
                },
                _ => return Err(bad("unexpected trailing token")),
            }
        }
        Ok(Rule {
            selector,
            action,
            scope,
        })
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("on ")?;
        match &self.selector {
            Selector::Root => f.write_str("root")?,
            Selector::Tag(t) => write!(f, "tag={t}")?,
            Selector::Attribute { name, value } => write!(f, "attr={name}={}", quote(value))?,
            Selector::Path(p) => write!(f, "path={p}")?,
        }
        match &self.action {
            Action::InsertChild { node, index } => {
                write!(f, " insert-child {}", quote(&serialize_node(node)))?;
                if let InsertIndex::At(i) = index {
                    write!(f, " at={i}")?;
                }
            }
            Action::DeleteSelf => f.write_str(" delete-self")?,
            Action::SetAttribute { name, value } => write!(f, " set-attr {name} {}", quote(value))?,
            Action::SetText(v) => write!(f, " set-text {}", quote(v))?,
            Action::Nothing => f.write_str(" nothing")?,
        }
        f.write_str(match self.scope {
            Scope::FirstMatch => " first",
            Scope::AllMatches => " all",
        })
    }
}

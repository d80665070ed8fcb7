//! Patch entries, sequential application and inversion.
//!
//! A patch is a program, not a set: each entry's position is interpreted in
//! the tree produced by applying every earlier entry of the same sequence.

use std::fmt;

use thiserror::Error;

use crate::dom::{DomNode, DomTree, NodePath};

/// What an [`PatchEntry::Update`] changes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum UpdateTarget {
    Attribute(String),
    Text,
}

impl fmt::Display for UpdateTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateTarget::Attribute(name) => write!(f, "@{name}"),
            UpdateTarget::Text => f.write_str("#text"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchOp {
    Insert,
    Delete,
    Update,
}

impl fmt::Display for PatchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchOp::Insert => "INSERT",
            PatchOp::Delete => "DELETE",
            PatchOp::Update => "UPDATE",
        })
    }
}

/// One `<operation, position, action>` record.
///
/// For `Insert`, `at` is the insertion slot (its last step may equal the
/// parent's child count). For `Delete`, `node` retains the removed subtree so
/// the entry can be inverted. For attribute updates `None` means "absent":
/// `None -> Some` appends the attribute, `Some -> None` removes it and
/// `Some -> Some` changes it in place.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PatchEntry {
    Insert {
        at: NodePath,
        node: DomNode,
    },
    Delete {
        at: NodePath,
        node: Option<DomNode>,
    },
    Update {
        at: NodePath,
        target: UpdateTarget,
        old: Option<String>,
        new: Option<String>,
    },
}

impl PatchEntry {
    pub fn insert(at: impl Into<NodePath>, node: impl Into<DomNode>) -> Self {
        PatchEntry::Insert {
            at: at.into(),
            node: node.into(),
        }
    }

    pub fn delete(at: impl Into<NodePath>, node: impl Into<DomNode>) -> Self {
        PatchEntry::Delete {
            at: at.into(),
            node: Some(node.into()),
        }
    }

    pub fn set_attr(at: impl Into<NodePath>, name: &str, old: Option<&str>, new: Option<&str>) -> Self {
        PatchEntry::Update {
            at: at.into(),
            target: UpdateTarget::Attribute(name.to_string()),
            old: old.map(str::to_string),
            new: new.map(str::to_string),
        }
    }

    pub fn set_text(at: impl Into<NodePath>, old: &str, new: &str) -> Self {
        PatchEntry::Update {
            at: at.into(),
            target: UpdateTarget::Text,
            old: Some(old.to_string()),
            new: Some(new.to_string()),
        }
    }

    pub fn op(&self) -> PatchOp {
        match self {
            PatchEntry::Insert { .. } => PatchOp::Insert,
            PatchEntry::Delete { .. } => PatchOp::Delete,
            PatchEntry::Update { .. } => PatchOp::Update,
        }
    }

    pub fn position(&self) -> &NodePath {
        match self {
            PatchEntry::Insert { at, .. }
            | PatchEntry::Delete { at, .. }
            | PatchEntry::Update { at, .. } => at,
        }
    }

    pub fn position_mut(&mut self) -> &mut NodePath {
        match self {
            PatchEntry::Insert { at, .. }
            | PatchEntry::Delete { at, .. }
            | PatchEntry::Update { at, .. } => at,
        }
    }

    /// The inverse entry, or `None` for a delete without retained payload.
    pub fn inverse(&self) -> Option<PatchEntry> {
        Some(match self {
            PatchEntry::Insert { at, node } => PatchEntry::Delete {
                at: at.clone(),
                node: Some(node.clone()),
            },
            PatchEntry::Delete { at, node } => PatchEntry::Insert {
                at: at.clone(),
                node: node.clone()?,
            },
            PatchEntry::Update {
                at,
                target,
                old,
                new,
            } => PatchEntry::Update {
                at: at.clone(),
                target: target.clone(),
                old: new.clone(),
                new: old.clone(),
            },
        })
    }
}

impl fmt::Display for PatchEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchEntry::Insert { at, node } => {
                write!(f, "INSERT {at} {}", crate::dom::serialize_node(node))
            }
            PatchEntry::Delete { at, node } => match node {
                Some(n) => write!(f, "DELETE {at} {}", crate::dom::serialize_node(n)),
                None => write!(f, "DELETE {at}"),
            },
            PatchEntry::Update {
                at,
                target,
                old,
                new,
            } => write!(f, "UPDATE {at} {target} {old:?} -> {new:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("entry {index} ({entry}) references a position absent from the tree")]
    PositionUnresolvable { index: usize, entry: PatchEntry },
    #[error("entry {index} ({entry}) expects a value the tree does not hold")]
    UpdateMismatch { index: usize, entry: PatchEntry },
    #[error("patch leaves the tree without a root element")]
    NoRoot,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvertError {
    #[error("delete entry {index} at {at} has no retained payload")]
    MissingPayload { index: usize, at: NodePath },
}

/// Why a single entry could not be applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryFault {
    Unresolvable,
    Mismatch,
}

/// Applies one entry to a root slot that may be temporarily empty (between a
/// root delete and a root insert).
pub fn apply_entry(root: &mut Option<DomNode>, entry: &PatchEntry) -> Result<(), EntryFault> {
    match entry {
        PatchEntry::Insert { at, node } => match at.split_last() {
            None => match (root.as_ref(), node) {
                (None, DomNode::Element(_)) => {
                    *root = Some(node.clone());
                    Ok(())
                }
                _ => Err(EntryFault::Unresolvable),
            },
            Some((parent, idx)) => {
                let parent = root
                    .as_mut()
                    .and_then(|r| r.resolve_mut(parent))
                    .and_then(DomNode::as_element_mut)
                    .ok_or(EntryFault::Unresolvable)?;
                if idx > parent.children.len() {
                    return Err(EntryFault::Unresolvable);
                }
                parent.children.insert(idx, node.clone());
                Ok(())
            }
        },
        PatchEntry::Delete { at, .. } => match at.split_last() {
            None => root.take().map(|_| ()).ok_or(EntryFault::Unresolvable),
            Some((parent, idx)) => {
                let parent = root
                    .as_mut()
                    .and_then(|r| r.resolve_mut(parent))
                    .and_then(DomNode::as_element_mut)
                    .ok_or(EntryFault::Unresolvable)?;
                if idx >= parent.children.len() {
                    return Err(EntryFault::Unresolvable);
                }
                parent.children.remove(idx);
                Ok(())
            }
        },
        PatchEntry::Update {
            at,
            target,
            old,
            new,
        } => {
            let node = root
                .as_mut()
                .and_then(|r| r.resolve_mut(at.steps()))
                .ok_or(EntryFault::Unresolvable)?;
            match (target, node) {
                (UpdateTarget::Attribute(name), DomNode::Element(e)) => {
                    if e.attr(name) != old.as_deref() {
                        return Err(EntryFault::Mismatch);
                    }
                    match new {
                        Some(v) => e.set_attr(name, v).map_err(|_| EntryFault::Mismatch),
                        None => {
                            e.remove_attr(name);
                            Ok(())
                        }
                    }
                }
                (UpdateTarget::Text, DomNode::Text(s)) => {
                    if Some(s.as_str()) != old.as_deref() {
                        return Err(EntryFault::Mismatch);
                    }
                    match new {
                        Some(v) => {
                            *s = v.clone();
                            Ok(())
                        }
                        None => Err(EntryFault::Mismatch),
                    }
                }
                _ => Err(EntryFault::Mismatch),
            }
        }
    }
}

/// Applies `entries` in order, returning the edited tree. The input tree is
/// untouched.
pub fn apply(tree: &DomTree, entries: &[PatchEntry]) -> Result<DomTree, ApplyError> {
    if entries.is_empty() {
        return Ok(tree.clone());
    }
    let mut root = Some(tree.to_node());
    for (index, entry) in entries.iter().enumerate() {
        apply_entry(&mut root, entry).map_err(|fault| match fault {
            EntryFault::Unresolvable => ApplyError::PositionUnresolvable {
                index,
                entry: entry.clone(),
            },
            EntryFault::Mismatch => ApplyError::UpdateMismatch {
                index,
                entry: entry.clone(),
            },
        })?;
    }
    root.and_then(|r| DomTree::from_node(r).ok())
        .ok_or(ApplyError::NoRoot)
}

/// Reverses the order and swaps Insert/Delete and old/new values, so that
/// `apply(apply(t, e), invert(e)) == t`.
pub fn invert(entries: &[PatchEntry]) -> Result<Vec<PatchEntry>, InvertError> {
    entries
        .iter()
        .enumerate()
        .rev()
        .map(|(index, entry)| {
            entry.inverse().ok_or_else(|| InvertError::MissingPayload {
                index,
                at: entry.position().clone(),
            })
        })
        .collect()
}

/// Ordered `(slot, entry)` records gathered by the monitors. Slot indices are
/// non-decreasing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatchTable {
    entries: Vec<(usize, PatchEntry)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("slot {slot} appended after slot {last}")]
pub struct SlotOrderError {
    pub slot: usize,
    pub last: usize,
}

impl PatchTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_all(
        &mut self,
        slot: usize,
        entries: impl IntoIterator<Item = PatchEntry>,
    ) -> Result<(), SlotOrderError> {
        if let Some(last) = self.last_slot() {
            if slot < last {
                return Err(SlotOrderError { slot, last });
            }
        }
        self.entries
            .extend(entries.into_iter().map(|entry| (slot, entry)));
        Ok(())
    }

    pub fn last_slot(&self) -> Option<usize> {
        self.entries.last().map(|(s, _)| *s)
    }

    pub fn entries(&self) -> &[(usize, PatchEntry)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Entries grouped by slot, in slot order.
    pub fn by_slot(&self) -> Vec<(usize, Vec<PatchEntry>)> {
        let mut groups: Vec<(usize, Vec<PatchEntry>)> = Vec::new();
        for (slot, entry) in &self.entries {
            match groups.last_mut() {
                Some((s, group)) if s == slot => group.push(entry.clone()),
                _ => groups.push((*slot, vec![entry.clone()])),
            }
        }
        groups
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
    fn apply_empty_is_identity() {
        let t = body(vec![el("img").into()]);
        assert_eq!(apply(&t, &[]).unwrap(), t);
    }

    #[test]
    fn apply_delete_missing_child() {
        let t = body(vec![]);
        let err = apply(&t, &[PatchEntry::delete([0], el("div"))]).unwrap_err();
        assert!(matches!(err, ApplyError::PositionUnresolvable { index: 0, .. }));
    }

    #[test]
    fn apply_insert_and_update() {
        let t = body(vec![el("img").into()]);
        let out = apply(
            &t,
            &[
                PatchEntry::insert([0, 0], el("span").with_attr("class", "hidden")),
                PatchEntry::set_attr([0], "src", None, Some("a.png")),
                PatchEntry::insert([1], text("hi")),
                PatchEntry::set_text([1], "hi", "ho"),
            ],
        )
        .unwrap();
        assert_eq!(
            out,
            body(vec![
                el("img")
                    .with_attr("src", "a.png")
                    .with_child(el("span").with_attr("class", "hidden"))
                    .into(),
                text("ho"),
            ])
        );
        // input untouched
        assert_eq!(t, body(vec![el("img").into()]));
    }

    #[test]
    fn update_mismatch_detected() {
        let t = body(vec![el("div").with_attr("id", "1").into()]);
        let err = apply(&t, &[PatchEntry::set_attr([0], "id", Some("2"), Some("3"))]).unwrap_err();
        assert!(matches!(err, ApplyError::UpdateMismatch { .. }));
        let err = apply(&t, &[PatchEntry::set_text([0], "a", "b")]).unwrap_err();
        assert!(matches!(err, ApplyError::UpdateMismatch { .. }));
    }

    #[test]
    fn insert_past_end_unresolvable() {
        let t = body(vec![]);
        assert!(apply(&t, &[PatchEntry::insert([1], el("p"))]).is_err());
        assert!(apply(&t, &[PatchEntry::insert([0], el("p"))]).is_ok());
    }

    #[test]
    fn root_replacement() {
        let t = body(vec![]);
        let out = apply(
            &t,
            &[
                PatchEntry::delete(NodePath::root(), t.to_node()),
                PatchEntry::insert(NodePath::root(), el("html")),
            ],
        )
        .unwrap();
        assert_eq!(out, DomTree::new(el("html")));
        let err = apply(&t, &[PatchEntry::delete(NodePath::root(), t.to_node())]).unwrap_err();
        assert_eq!(err, ApplyError::NoRoot);
        assert!(apply(&t, &[PatchEntry::insert(NodePath::root(), el("html"))]).is_err());
    }

    #[test]
    fn invert_examples() {
        let span = DomNode::from(el("span"));
        let inv = invert(&[PatchEntry::insert([0, 0], span.clone())]).unwrap();
        assert_eq!(inv, vec![PatchEntry::delete([0, 0], span)]);
        assert_eq!(invert(&[]).unwrap(), vec![]);
        let err = invert(&[PatchEntry::Delete {
            at: NodePath::from([0]),
            node: None,
        }])
        .unwrap_err();
        assert!(matches!(err, InvertError::MissingPayload { index: 0, .. }));
    }

    #[test]
    fn invert_round_trip_attribute_ops() {
        let t = body(vec![el("div").with_attr("a", "1").with_attr("b", "2").into()]);
        let entries = vec![
            PatchEntry::set_attr([0], "b", Some("2"), None),
            PatchEntry::set_attr([0], "a", Some("1"), Some("9")),
            PatchEntry::set_attr([0], "c", None, Some("3")),
        ];
        let out = apply(&t, &entries).unwrap();
        let back = apply(&out, &invert(&entries).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn table_slot_order() {
        let mut table = PatchTable::new();
        table.push_all(1, [PatchEntry::insert([0], el("a"))]).unwrap();
        table.push_all(1, []).unwrap();
        table.push_all(3, [PatchEntry::insert([0], el("b"))]).unwrap();
        assert!(table.push_all(2, []).is_err());
        let groups = table.by_slot();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].0, 3);
    }
}

//! Merging per-slot patch sequences that were all computed against the same
//! base tree.
//!
//! Each slot's sequence is rebased over everything applied before it with a
//! pairwise transform: indices shift around inserts and deletes, identical
//! deletes and identical updates collapse, and edits that land inside a
//! deleted subtree or set one value two different ways are conflicts. An
//! insert-insert tie at one slot puts the earlier slot's node first.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dom::{DomNode, DomTree};
use crate::patch::{apply_entry, EntryFault, PatchEntry, PatchTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConflictPolicy {
    #[default]
    LastWins,
    FirstWins,
    Fail,
}

impl ConflictPolicy {
    pub const ALL: [ConflictPolicy; 3] = [ConflictPolicy::LastWins, ConflictPolicy::FirstWins, ConflictPolicy::Fail];

    pub fn as_str(self) -> &'static str {
        match self {
            ConflictPolicy::LastWins => "last-wins",
            ConflictPolicy::FirstWins => "first-wins",
            ConflictPolicy::Fail => "fail",
        }
    }
}

impl fmt::Display for ConflictPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown conflict policy {0:?}")]
pub struct UnknownPolicy(pub String);

impl FromStr for ConflictPolicy {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "last-wins" => Ok(ConflictPolicy::LastWins),
            "first-wins" => Ok(ConflictPolicy::FirstWins),
            "fail" | "fail-on-conflict" => Ok(ConflictPolicy::Fail),
            other => Err(UnknownPolicy(other.to_string())),
        }
    }
}

/// A store entry with its origin: slot number and index within the slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tagged {
    pub slot: usize,
    pub index: usize,
    pub entry: PatchEntry,
}

impl Tagged {
    /// `(slot, index)` in the store.
    pub fn origin(&self) -> (usize, usize) {
        (self.slot, self.index)
    }

    fn with_entry(&self, entry: PatchEntry) -> Tagged {
        Tagged {
            slot: self.slot,
            index: self.index,
            entry,
        }
    }
}

/// Two entries from different slots that cannot both take effect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub earlier: Tagged,
    pub later: Tagged,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MergeError {
    #[error("conflict between slot {slot_a} and slot {slot_b} on {entry}")]
    ConflictDetected {
        slot_a: usize,
        slot_b: usize,
        entry: Box<PatchEntry>,
    },
    #[error("slot {slot} entry {index} ({entry}) does not apply: {fault:?}")]
    Unapplicable {
        slot: usize,
        index: usize,
        entry: Box<PatchEntry>,
        fault: EntryFault,
    },
    #[error("merged patches leave no root element")]
    NoRoot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub tree: DomTree,
    /// Entries as actually applied, after rebasing.
    pub applied: Vec<Tagged>,
    /// Entries that became no-ops because an earlier slot made the same edit.
    pub absorbed: Vec<Tagged>,
    /// Entries removed by the conflict policy, including cascaded removals.
    pub dropped: Vec<Tagged>,
    pub conflicts: Vec<Conflict>,
}

impl MergeOutcome {
    pub fn applied_origins(&self) -> BTreeSet<(usize, usize)> {
        self.applied.iter().map(Tagged::origin).collect()
    }

    /// Origins of every entry that took part in a conflict or was dropped.
    pub fn involved_origins(&self) -> BTreeSet<(usize, usize)> {
        let mut out: BTreeSet<_> = self.dropped.iter().map(Tagged::origin).collect();
        for c in &self.conflicts {
            out.insert(c.earlier.origin());
            out.insert(c.later.origin());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Pairwise transform

struct Clash;

/// Shifts `p` for an insert at slot `q`. Ties move `p` right.
fn insert_shift(p: &mut [usize], q: &[usize]) {
    let Some((&qi, parent)) = q.split_last() else {
        return;
    };
    let k = parent.len();
    if p.len() > k && &p[..k] == parent && p[k] >= qi {
        p[k] += 1;
    }
}

/// Shifts node path `p` for a delete of `q`; a target inside `q` clashes.
fn delete_shift(p: &mut [usize], q: &[usize]) -> Result<(), Clash> {
    if p.starts_with(q) {
        return Err(Clash);
    }
    let (&qi, parent) = q.split_last().expect("the root path prefixes every path");
    let k = parent.len();
    if p.len() > k && &p[..k] == parent && p[k] > qi {
        p[k] -= 1;
    }
    Ok(())
}

/// Like [`delete_shift`] for an insert slot, which may equal `q`.
fn slot_delete_shift(p: &mut [usize], q: &[usize]) -> Result<(), Clash> {
    if p == q {
        return Ok(());
    }
    delete_shift(p, q)
}

fn steps_mut(e: &mut PatchEntry) -> &mut Vec<usize> {
    &mut e.position_mut().0
}

/// Given `a` and `b` defined on the same tree, returns `a` rebased to run
/// after `b` and `b` rebased to run after `a`. `None` means the edit became
/// a no-op. `a` is treated as the later of the two.
fn transform_pair(a: &PatchEntry, b: &PatchEntry) -> Result<(Option<PatchEntry>, Option<PatchEntry>), Clash> {
    use PatchEntry::*;
    let (mut a2, mut b2) = (a.clone(), b.clone());
    let (p, q) = (a.position().steps(), b.position().steps());
    match (a, b) {
        (Insert { .. }, Insert { .. }) => {
            if p.is_empty() || q.is_empty() {
                return if a == b { Ok((None, None)) } else { Err(Clash) };
            }
            insert_shift(steps_mut(&mut a2), q);
            if p != q {
                insert_shift(steps_mut(&mut b2), p);
            }
        }
        (Insert { .. }, Delete { .. }) => {
            slot_delete_shift(steps_mut(&mut a2), q)?;
            insert_shift(steps_mut(&mut b2), p);
        }
        (Delete { .. }, Insert { .. }) => {
            slot_delete_shift(steps_mut(&mut b2), p)?;
            insert_shift(steps_mut(&mut a2), q);
        }
        (Delete { .. }, Delete { .. }) => {
            if p == q {
                return Ok((None, None));
            }
            delete_shift(steps_mut(&mut a2), q)?;
            delete_shift(steps_mut(&mut b2), p)?;
        }
        (Update { .. }, Insert { .. }) => insert_shift(steps_mut(&mut a2), q),
        (Insert { .. }, Update { .. }) => insert_shift(steps_mut(&mut b2), p),
        (Update { .. }, Delete { .. }) => delete_shift(steps_mut(&mut a2), q)?,
        (Delete { .. }, Update { .. }) => delete_shift(steps_mut(&mut b2), p)?,
        (
            Update {
                target: ta, new: na, ..
            },
            Update {
                target: tb, new: nb, ..
            },
        ) => {
            if p == q && ta == tb {
                return if na == nb { Ok((None, None)) } else { Err(Clash) };
            }
        }
    }
    Ok((Some(a2), Some(b2)))
}

/// Rebases `a` over the sequence `seq` (both starting from the same tree).
/// Returns the rebased `a` and `seq` rebased to run after `a`, or the index
/// of the first clashing element of `seq`.
fn transform_over(a: &PatchEntry, seq: &[Tagged]) -> Result<(Option<PatchEntry>, Vec<Tagged>), usize> {
    let mut cur = Some(a.clone());
    let mut rest = Vec::with_capacity(seq.len());
    for (i, b) in seq.iter().enumerate() {
        match &cur {
            None => rest.push(b.clone()),
            Some(x) => {
                let (x2, b2) = transform_pair(x, &b.entry).map_err(|_| i)?;
                cur = x2;
                rest.extend(b2.map(|e| b.with_entry(e)));
            }
        }
    }
    Ok((cur, rest))
}

struct SeqClash {
    later_pos: usize,
    earlier: Box<Tagged>,
}

struct Rebased {
    applied: Vec<Tagged>,
    absorbed: Vec<Tagged>,
}

fn transform_seq(program: &[Tagged], log: &[Tagged]) -> Result<Rebased, SeqClash> {
    let mut log = log.to_vec();
    let mut out = Rebased {
        applied: Vec::new(),
        absorbed: Vec::new(),
    };
    for (i, a) in program.iter().enumerate() {
        match transform_over(&a.entry, &log) {
            Ok((Some(e), rest)) => {
                out.applied.push(a.with_entry(e));
                log = rest;
            }
            Ok((None, rest)) => {
                out.absorbed.push(a.clone());
                log = rest;
            }
            Err(j) => {
                return Err(SeqClash {
                    later_pos: i,
                    earlier: Box::new(log[j].clone()),
                })
            }
        }
    }
    Ok(out)
}

/// Removes `program[pos]` and rebases the entries after it so the program
/// still runs from the same start tree. Entries that cannot survive the
/// removal are removed as well.
fn remove_entry(program: &mut Vec<Tagged>, pos: usize, dropped: &mut Vec<Tagged>) {
    let removed = program.remove(pos);
    let tail = program.split_off(pos);
    let Some(inverse) = removed.entry.inverse() else {
        dropped.push(removed);
        dropped.extend(tail);
        return;
    };
    let mut undo = vec![removed.with_entry(inverse)];
    dropped.push(removed);
    let mut tail = tail.into_iter();
    while let Some(r) = tail.next() {
        match transform_over(&r.entry, &undo) {
            Ok((Some(e), rest)) => {
                program.push(r.with_entry(e));
                undo = rest;
            }
            Ok((None, rest)) => {
                dropped.push(r);
                undo = rest;
            }
            Err(_) => match r.entry.inverse() {
                Some(inv) => {
                    undo.insert(0, r.with_entry(inv));
                    dropped.push(r);
                }
                None => {
                    dropped.push(r);
                    dropped.extend(tail);
                    return;
                }
            },
        }
    }
}

fn programs_of(table: &PatchTable) -> Vec<(usize, Vec<Tagged>)> {
    table
        .by_slot()
        .into_iter()
        .map(|(slot, entries)| {
            let tagged = entries
                .into_iter()
                .enumerate()
                .map(|(index, entry)| Tagged { slot, index, entry })
                .collect();
            (slot, tagged)
        })
        .collect()
}

/// Applies every slot of `store` to `base` in slot order, rebasing each
/// slot over the ones before it and resolving conflicts per `policy`.
///
/// Under [`ConflictPolicy::LastWins`] the earlier entry of a conflicting pair
/// is removed from its slot and the merge restarts; under
/// [`ConflictPolicy::FirstWins`] the later entry is removed in place.
pub fn merge_store(base: &DomTree, store: &PatchTable, policy: ConflictPolicy) -> Result<MergeOutcome, MergeError> {
    let programs = programs_of(store);
    let mut banned: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut conflicts: Vec<Conflict> = Vec::new();

    'restart: loop {
        let mut dropped = Vec::new();
        let mut absorbed = Vec::new();
        let mut log: Vec<Tagged> = Vec::new();
        let mut root: Option<DomNode> = Some(base.to_node());

        for (slot, original) in &programs {
            let mut program = original.clone();
            for &(_, index) in banned.range((*slot, 0)..=(*slot, usize::MAX)) {
                if let Some(pos) = program.iter().position(|t| t.index == index) {
                    remove_entry(&mut program, pos, &mut dropped);
                }
            }
            let rebased = loop {
                match transform_seq(&program, &log) {
                    Ok(r) => break r,
                    Err(clash) => {
                        let later = program[clash.later_pos].clone();
                        conflicts.push(Conflict {
                            earlier: (*clash.earlier).clone(),
                            later: later.clone(),
                        });
                        match policy {
                            ConflictPolicy::Fail => {
                                return Err(MergeError::ConflictDetected {
                                    slot_a: clash.earlier.slot,
                                    slot_b: later.slot,
                                    entry: Box::new(later.entry),
                                })
                            }
                            ConflictPolicy::FirstWins => {
                                remove_entry(&mut program, clash.later_pos, &mut dropped);
                            }
                            ConflictPolicy::LastWins => {
                                banned.insert(clash.earlier.origin());
                                continue 'restart;
                            }
                        }
                    }
                }
            };
            for t in &rebased.applied {
                apply_entry(&mut root, &t.entry).map_err(|fault| MergeError::Unapplicable {
                    slot: t.slot,
                    index: t.index,
                    entry: Box::new(t.entry.clone()),
                    fault,
                })?;
            }
            absorbed.extend(rebased.absorbed);
            log.extend(rebased.applied);
        }

        let tree = root
            .and_then(|r| DomTree::from_node(r).ok())
            .ok_or(MergeError::NoRoot)?;
        return Ok(MergeOutcome {
            tree,
            applied: log,
            absorbed,
            dropped,
            conflicts,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::diff;
    use crate::dom::{el, parse};
    use crate::patch::apply;

    fn store(slots: &[(usize, Vec<PatchEntry>)]) -> PatchTable {
        let mut t = PatchTable::new();
        for (slot, entries) in slots {
            t.push_all(*slot, entries.clone()).unwrap();
        }
        t
    }

    #[test]
    fn appends_keep_slot_order() {
        let base = parse("<body><p></p></body>");
        let s = store(&[
            (1, vec![PatchEntry::insert([1], el("a"))]),
            (2, vec![PatchEntry::insert([1], el("b"))]),
        ]);
        let out = merge_store(&base, &s, ConflictPolicy::Fail).unwrap();
        assert_eq!(out.tree, parse("<body><p></p><a></a><b></b></body>"));
    }

    #[test]
    fn inserts_shift_later_paths() {
        let base = parse("<body><p></p><q></q></body>");
        let s = store(&[
            (1, vec![PatchEntry::insert([0], el("a"))]),
            (2, vec![PatchEntry::insert([1, 0], el("b")), PatchEntry::set_attr([0], "x", None, Some("1"))]),
        ]);
        let out = merge_store(&base, &s, ConflictPolicy::Fail).unwrap();
        assert_eq!(out.tree, parse(r#"<body><a></a><p x="1"></p><q><b></b></q></body>"#));
    }

    #[test]
    fn deletes_shift_and_absorb() {
        let base = parse("<body><p></p><q></q><r></r></body>");
        let s = store(&[
            (1, vec![PatchEntry::delete([0], el("p"))]),
            (2, vec![PatchEntry::delete([0], el("p")), PatchEntry::set_attr([1], "k", None, Some("v"))]),
        ]);
        let out = merge_store(&base, &s, ConflictPolicy::Fail).unwrap();
        assert_eq!(out.tree, parse(r#"<body><q></q><r k="v"></r></body>"#));
        assert_eq!(out.absorbed.len(), 1);
    }

    #[test]
    fn update_conflict_policies() {
        let base = parse(r#"<body><div id="1"></div></body>"#);
        let s = store(&[
            (1, vec![PatchEntry::set_attr([0], "id", Some("1"), Some("a"))]),
            (2, vec![PatchEntry::set_attr([0], "id", Some("1"), Some("b"))]),
        ]);
        let last = merge_store(&base, &s, ConflictPolicy::LastWins).unwrap();
        assert_eq!(last.tree, parse(r#"<body><div id="b"></div></body>"#));
        let first = merge_store(&base, &s, ConflictPolicy::FirstWins).unwrap();
        assert_eq!(first.tree, parse(r#"<body><div id="a"></div></body>"#));
        assert_eq!(last.conflicts.len(), 1);
        assert_eq!(
            merge_store(&base, &s, ConflictPolicy::Fail),
            Err(MergeError::ConflictDetected {
                slot_a: 1,
                slot_b: 2,
                entry: Box::new(PatchEntry::set_attr([0], "id", Some("1"), Some("b"))),
            })
        );
    }

    #[test]
    fn edit_inside_deleted_subtree() {
        let base = parse("<body><div><p></p></div></body>");
        let s = store(&[
            (1, vec![PatchEntry::delete([0], el("div").with_child(el("p")))]),
            (2, vec![PatchEntry::insert([0, 1], el("span"))]),
        ]);
        let first = merge_store(&base, &s, ConflictPolicy::FirstWins).unwrap();
        assert_eq!(first.tree, parse("<body></body>"));
        let last = merge_store(&base, &s, ConflictPolicy::LastWins).unwrap();
        assert_eq!(last.tree, parse("<body><div><p></p><span></span></div></body>"));
    }

    #[test]
    fn dropping_cascades_to_dependent_entries() {
        let base = parse("<body><div></div></body>");
        let s = store(&[
            (1, vec![PatchEntry::delete([0], el("div"))]),
            (2, vec![PatchEntry::insert([0, 0], el("span")), PatchEntry::insert([0, 0, 0], el("b"))]),
        ]);
        let first = merge_store(&base, &s, ConflictPolicy::FirstWins).unwrap();
        assert_eq!(first.tree, parse("<body></body>"));
        assert_eq!(first.dropped.len(), 2);
    }

    #[test]
    fn removal_rebases_tail() {
        let mut prog = vec![
            Tagged { slot: 1, index: 0, entry: PatchEntry::insert([0], el("a")) },
            Tagged { slot: 1, index: 1, entry: PatchEntry::insert([2], el("b")) },
        ];
        let mut dropped = Vec::new();
        remove_entry(&mut prog, 0, &mut dropped);
        assert_eq!(prog.len(), 1);
        assert_eq!(prog[0].entry, PatchEntry::insert([1], el("b")));
    }

    #[test]
    fn single_slot_matches_apply() {
        let a = parse("<body><p>x</p><q></q></body>");
        let b = parse(r#"<body><q k="1"></q><p>y</p><r></r></body>"#);
        let d = diff(&a, &b);
        let s = store(&[(1, d.clone())]);
        let out = merge_store(&a, &s, ConflictPolicy::Fail).unwrap();
        assert_eq!(out.tree, apply(&a, &d).unwrap());
    }

    #[test]
    fn policy_names() {
        for p in ConflictPolicy::ALL {
            assert_eq!(p.as_str().parse::<ConflictPolicy>().unwrap(), p);
        }
        assert_eq!("fail-on-conflict".parse::<ConflictPolicy>().unwrap(), ConflictPolicy::Fail);
        assert!("random".parse::<ConflictPolicy>().is_err());
    }
}

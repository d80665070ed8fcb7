//! Line-oriented text records for patch tables.
//!
//! One entry per line, tab-separated:
//!
//! ```text
//! INSERT  <slot>  <path>  <node>
//! DELETE  <slot>  <path>  <node>|~
//! UPDATE  <slot>  <path>  @<attr>|#text  <value>|~  <value>|~
//! ```
//!
//! `<path>` is `/` for the root, otherwise `/i/j/...`. `<node>` is `E:` followed
//! by the serialized element or `T:` followed by raw text. `<value>` is `=`
//! followed by the raw string; `~` means absent. Inside payloads and values a
//! backslash escapes `\\`, `\t`, `\n` and `\r`. Blank lines and lines starting
//! with `#` are ignored.

use thiserror::Error;

use crate::dom::{parse_fragment, serialize_node, DomNode, NodePath};
use crate::patch::{PatchEntry, PatchTable, UpdateTarget};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record line {line}: {reason}")]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

fn format_node(node: &DomNode) -> String {
    match node {
        DomNode::Element(_) => format!("E:{}", escape(&serialize_node(node))),
        DomNode::Text(t) => format!("T:{}", escape(t)),
    }
}

fn parse_node(field: &str) -> Result<DomNode, String> {
    if let Some(t) = field.strip_prefix("T:") {
        return Ok(DomNode::Text(unescape(t)?));
    }
    let html = field
        .strip_prefix("E:")
        .ok_or_else(|| format!("node payload must start with E: or T:, got {field:?}"))?;
    let mut nodes = parse_fragment(&unescape(html)?);
    match (nodes.pop(), nodes.is_empty()) {
        (Some(node @ DomNode::Element(_)), true) => Ok(node),
        _ => Err(format!("element payload {html:?} is not a single element")),
    }
}

fn format_value(v: &Option<String>) -> String {
    match v {
        Some(s) => format!("={}", escape(s)),
        None => "~".to_string(),
    }
}

fn parse_value(field: &str) -> Result<Option<String>, String> {
    if field == "~" {
        return Ok(None);
    }
    field
        .strip_prefix('=')
        .ok_or_else(|| format!("value must be ~ or start with =, got {field:?}"))
        .and_then(unescape)
        .map(Some)
}

pub fn format_entry(slot: usize, entry: &PatchEntry) -> String {
    match entry {
        PatchEntry::Insert { at, node } => format!("INSERT\t{slot}\t{at}\t{}", format_node(node)),
        PatchEntry::Delete { at, node } => {
            let payload = node.as_ref().map_or_else(|| "~".to_string(), format_node);
            format!("DELETE\t{slot}\t{at}\t{payload}")
        }
        PatchEntry::Update {
            at,
            target,
            old,
            new,
        } => format!(
            "UPDATE\t{slot}\t{at}\t{target}\t{}\t{}",
            format_value(old),
            format_value(new)
        ),
    }
}

/// Formats every record of `table`, one per line, each line newline-terminated.
pub fn format_table(table: &PatchTable) -> String {
    table
        .entries()
        .iter()
        .map(|(slot, entry)| format_entry(*slot, entry) + "\n")
        .collect()
}

/// Formats a bare entry sequence under a single slot number.
pub fn format_entries(slot: usize, entries: &[PatchEntry]) -> String {
    entries.iter().map(|e| format_entry(slot, e) + "\n").collect()
}

fn parse_line(line: &str) -> Result<(usize, PatchEntry), String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let expect = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(format!("{} expects {n} fields, got {}", fields[0], fields.len()))
        }
    };
    if fields.len() < 3 {
        return Err("too few fields".to_string());
    }
    let slot: usize = fields[1]
        .parse()
        .map_err(|_| format!("bad slot {:?}", fields[1]))?;
    let at: NodePath = fields[2].parse().map_err(|e| format!("{e}"))?;
    let entry = match fields[0] {
        "INSERT" => {
            expect(4)?;
            PatchEntry::Insert {
                at,
                node: parse_node(fields[3])?,
            }
        }
        "DELETE" => {
            expect(4)?;
            let node = match fields[3] {
                "~" => None,
                f => Some(parse_node(f)?),
            };
            PatchEntry::Delete { at, node }
        }
        "UPDATE" => {
            expect(6)?;
            let target = match fields[3] {
                "#text" => UpdateTarget::Text,
                f => UpdateTarget::Attribute(
                    f.strip_prefix('@')
                        .filter(|n| !n.is_empty())
                        .ok_or_else(|| format!("bad update target {f:?}"))?
                        .to_string(),
                ),
            };
            PatchEntry::Update {
                at,
                target,
                old: parse_value(fields[4])?,
                new: parse_value(fields[5])?,
            }
        }
        other => return Err(format!("unknown operation {other:?}")),
    };
    Ok((slot, entry))
}

/// Parses records back into a table. Slot indices must be non-decreasing.
pub fn parse_table(text: &str) -> Result<PatchTable, RecordError> {
    let mut table = PatchTable::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (slot, entry) = parse_line(trimmed).map_err(|reason| RecordError { line, reason })?;
        table.push_all(slot, [entry]).map_err(|e| RecordError {
            line,
            reason: e.to_string(),
        })?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{el, text};

    #[test]
    fn known_lines() {
        let insert = PatchEntry::insert([0, 0], el("span").with_attr("class", "hidden"));
        assert_eq!(
            format_entry(1, &insert),
            "INSERT\t1\t/0/0\tE:<span class=\"hidden\"></span>"
        );
        let upd = PatchEntry::set_attr([0], "id", Some("1"), None);
        assert_eq!(format_entry(3, &upd), "UPDATE\t3\t/0\t@id\t=1\t~");
        let del = PatchEntry::delete(NodePath::root(), el("body"));
        assert_eq!(format_entry(0, &del), "DELETE\t0\t/\tE:<body></body>");
    }

    #[test]
    fn round_trip_awkward_payloads() {
        let mut table = PatchTable::new();
        table
            .push_all(
                1,
                [
                    PatchEntry::insert([1], text("tab\there\nnew \\ line")),
                    PatchEntry::set_text([1], "tab\there\nnew \\ line", "  "),
                    PatchEntry::set_attr([0], "title", Some(""), Some("a\"b<c>&d")),
                    PatchEntry::Delete {
                        at: NodePath::from([2]),
                        node: None,
                    },
                ],
            )
            .unwrap();
        table
            .push_all(2, [PatchEntry::insert([0, 1], el("p").with_child(text("x\ty")))])
            .unwrap();
        let text = format_table(&table);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(parse_table(&text).unwrap(), table);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_table("# header\nINSERT\t1\t/0\tE:<p></p>\nBOGUS\t1\t/\n").unwrap_err();
        assert_eq!(err.line, 3);
        let err = parse_table("INSERT\t2\t/0\tE:<p></p>\nINSERT\t1\t/0\tE:<p></p>\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(parse_table("INSERT\t1\t0\tE:<p></p>").is_err());
        assert!(parse_table("UPDATE\t1\t/0\t@\t=1\t=2").is_err());
        assert!(parse_table("INSERT\t1\t/0\tE:<p></p><q></q>").is_err());
    }
}

//! Ordered, attributed DOM trees.
//!
//! A [`DomTree`] is an immutable value: every edit produces a new tree. Nodes
//! are either elements (lowercase tag, ordered attributes, ordered children) or
//! text. Equality is structural and order-sensitive for both children and
//! attributes.
//!
//! The text form understood by [`parse`] is a restricted, lenient HTML: tags and
//! attribute names are lowercased, unclosed tags are closed at their parent's
//! boundary, whitespace-only text is dropped and a `html` root is synthesized
//! when the input does not consist of exactly one top-level element.
//! [`serialize`] always writes explicit close tags and never emits
//! self-closing syntax, comments or a doctype.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomError {
    #[error("invalid tag name {0:?}")]
    InvalidTag(String),
    #[error("invalid attribute name {0:?}")]
    InvalidAttributeName(String),
    #[error("root of a tree must be an element")]
    TextRoot,
    #[error("invalid node path {0:?}")]
    InvalidPath(String),
}

/// An element node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Element {
    tag: String,
    attrs: Vec<(String, String)>,
    pub children: Vec<DomNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DomNode {
    Element(Element),
    Text(String),
}

fn is_valid_tag(tag: &str) -> bool {
    let mut chars = tag.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

fn is_attr_name_char(c: char) -> bool {
    !(c.is_whitespace() || matches!(c, '"' | '\'' | '<' | '>' | '/' | '=' | '&'))
        && !c.is_control()
        && !c.is_uppercase()
}

fn is_valid_attr_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(is_attr_name_char)
}

impl Element {
    /// Creates an element with the given tag.
    ///
    /// # Panics
    ///
    /// Panics if the tag is not a valid lowercase tag name. Use
    /// [`Element::try_new`] for untrusted input.
    pub fn new(tag: &str) -> Self {
        Self::try_new(tag).expect("invalid tag name")
    }

    pub fn try_new(tag: &str) -> Result<Self, DomError> {
        if !is_valid_tag(tag) {
            return Err(DomError::InvalidTag(tag.to_string()));
        }
        Ok(Element {
            tag: tag.to_string(),
            attrs: Vec::new(),
            children: Vec::new(),
        })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn attrs(&self) -> &[(String, String)] {
        &self.attrs
    }

    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    /// Sets an attribute. An existing attribute keeps its position; a new one
    /// is appended.
    pub fn set_attr(&mut self, name: &str, value: &str) -> Result<(), DomError> {
        if !is_valid_attr_name(name) {
            return Err(DomError::InvalidAttributeName(name.to_string()));
        }
        match self.attrs.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.attrs.push((name.to_string(), value.to_string())),
        }
        Ok(())
    }

    /// Removes an attribute, returning its previous value.
    pub fn remove_attr(&mut self, name: &str) -> Option<String> {
        let idx = self.attrs.iter().position(|(n, _)| n == name)?;
        Some(self.attrs.remove(idx).1)
    }

    /// Builder form of [`Element::set_attr`].
    ///
    /// # Panics
    ///
    /// Panics on an invalid attribute name.
    pub fn with_attr(mut self, name: &str, value: &str) -> Self {
        self.set_attr(name, value).expect("invalid attribute name");
        self
    }

    pub fn with_child(mut self, child: impl Into<DomNode>) -> Self {
        self.children.push(child.into());
        self
    }

    pub fn with_children<I, N>(mut self, children: I) -> Self
    where
        I: IntoIterator<Item = N>,
        N: Into<DomNode>,
    {
        self.children.extend(children.into_iter().map(Into::into));
        self
    }

    /// Same tag and attributes (in order); children are not compared.
    pub fn same_label(&self, other: &Element) -> bool {
        self.tag == other.tag && self.attrs == other.attrs
    }
}

impl From<Element> for DomNode {
    fn from(e: Element) -> Self {
        DomNode::Element(e)
    }
}

/// Shorthand for [`Element::new`].
pub fn el(tag: &str) -> Element {
    Element::new(tag)
}

/// Shorthand for a text node.
pub fn text(s: &str) -> DomNode {
    DomNode::Text(s.to_string())
}

impl DomNode {
    pub fn as_element(&self) -> Option<&Element> {
        match self {
            DomNode::Element(e) => Some(e),
            DomNode::Text(_) => None,
        }
    }

    pub fn as_element_mut(&mut self) -> Option<&mut Element> {
        match self {
            DomNode::Element(e) => Some(e),
            DomNode::Text(_) => None,
        }
    }

    pub fn children(&self) -> &[DomNode] {
        match self {
            DomNode::Element(e) => &e.children,
            DomNode::Text(_) => &[],
        }
    }

    /// Number of nodes in this subtree, including `self`.
    pub fn size(&self) -> usize {
        1 + self.children().iter().map(DomNode::size).sum::<usize>()
    }

    pub fn resolve(&self, path: &[usize]) -> Option<&DomNode> {
        let mut node = self;
        for &step in path {
            node = node.children().get(step)?;
        }
        Some(node)
    }

    pub fn resolve_mut(&mut self, path: &[usize]) -> Option<&mut DomNode> {
        let mut node = self;
        for &step in path {
            node = match node {
                DomNode::Element(e) => e.children.get_mut(step)?,
                DomNode::Text(_) => return None,
            };
        }
        Some(node)
    }

    /// Visits every node in document (pre-)order together with its path.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&NodePath, &'a DomNode)) {
        fn go<'a>(
            node: &'a DomNode,
            path: &mut Vec<usize>,
            f: &mut impl FnMut(&NodePath, &'a DomNode),
        ) {
            f(&NodePath(path.clone()), node);
            for (i, child) in node.children().iter().enumerate() {
                path.push(i);
                go(child, path, f);
                path.pop();
            }
        }
        go(self, &mut Vec::new(), f)
    }
}

/// Positional address of a node: child indices from the root. The empty path
/// is the root itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePath(pub Vec<usize>);

impl NodePath {
    pub fn root() -> Self {
        NodePath(Vec::new())
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, index: usize) -> NodePath {
        let mut steps = self.0.clone();
        steps.push(index);
        NodePath(steps)
    }

    /// Splits into (parent path, last index). `None` for the root.
    pub fn split_last(&self) -> Option<(&[usize], usize)> {
        let (last, parent) = self.0.split_last()?;
        Some((parent, *last))
    }

    pub fn starts_with(&self, prefix: &NodePath) -> bool {
        self.0.starts_with(&prefix.0)
    }
}

impl From<Vec<usize>> for NodePath {
    fn from(v: Vec<usize>) -> Self {
        NodePath(v)
    }
}

impl<const N: usize> From<[usize; N]> for NodePath {
    fn from(v: [usize; N]) -> Self {
        NodePath(v.to_vec())
    }
}

/// Renders as `/` for the root and `/0/2` otherwise.
impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("/");
        }
        for step in &self.0 {
            write!(f, "/{step}")?;
        }
        Ok(())
    }
}

impl FromStr for NodePath {
    type Err = DomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix('/')
            .ok_or_else(|| DomError::InvalidPath(s.to_string()))?;
        if rest.is_empty() {
            return Ok(NodePath::root());
        }
        rest.split('/')
            .map(|step| step.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map(NodePath)
            .map_err(|_| DomError::InvalidPath(s.to_string()))
    }
}

/// An immutable document tree whose root is always an element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DomTree {
    root: Arc<DomNode>,
}

impl DomTree {
    pub fn new(root: Element) -> Self {
        DomTree {
            root: Arc::new(DomNode::Element(root)),
        }
    }

    pub fn from_node(root: DomNode) -> Result<Self, DomError> {
        match root {
            DomNode::Element(_) => Ok(DomTree {
                root: Arc::new(root),
            }),
            DomNode::Text(_) => Err(DomError::TextRoot),
        }
    }

    pub fn root(&self) -> &DomNode {
        &self.root
    }

    pub fn root_element(&self) -> &Element {
        match &*self.root {
            DomNode::Element(e) => e,
            DomNode::Text(_) => unreachable!("DomTree root is always an element"),
        }
    }

    /// A copy of the root node for building an edited tree.
    pub fn to_node(&self) -> DomNode {
        (*self.root).clone()
    }

    pub fn resolve(&self, path: &NodePath) -> Option<&DomNode> {
        self.root.resolve(path.steps())
    }

    pub fn size(&self) -> usize {
        self.root.size()
    }

    /// Re-normalizes through a serialize/parse pass. Identity on trees that
    /// came out of [`parse`].
    pub fn normalized(&self) -> DomTree {
        parse(&serialize(self))
    }

    /// Whether both trees share the same allocation (cheap pre-check).
    pub fn ptr_eq(&self, other: &DomTree) -> bool {
        Arc::ptr_eq(&self.root, &other.root)
    }
}

impl fmt::Display for DomTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

impl FromStr for DomTree {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(parse(s))
    }
}

/// Looks up the node at `path`; `None` when the path does not resolve.
pub fn resolve<'a>(tree: &'a DomTree, path: &NodePath) -> Option<&'a DomNode> {
    tree.resolve(path)
}

// ---------------------------------------------------------------------------
// Serialization

fn escape_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
}

fn escape_attr(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
}

fn is_blank(s: &str) -> bool {
    s.chars().all(char::is_whitespace)
}

/// Serializes a single node (and its subtree).
pub fn serialize_node(node: &DomNode) -> String {
    let mut out = String::new();
    write_node(node, &mut out);
    out
}

fn write_node(node: &DomNode, out: &mut String) {
    match node {
        // Whitespace-only text is not representable in the parsed form.
        DomNode::Text(s) if is_blank(s) => {}
        DomNode::Text(s) => escape_text(s, out),
        DomNode::Element(e) => {
            out.push('<');
            out.push_str(&e.tag);
            for (name, value) in &e.attrs {
                out.push(' ');
                out.push_str(name);
                out.push_str("=\"");
                escape_attr(value, out);
                out.push('"');
            }
            out.push('>');
            for child in &e.children {
                write_node(child, out);
            }
            out.push_str("</");
            out.push_str(&e.tag);
            out.push('>');
        }
    }
}

pub fn serialize(tree: &DomTree) -> String {
    serialize_node(tree.root())
}

// ---------------------------------------------------------------------------
// Parsing

struct OpenElement {
    element: Element,
}

struct TreeBuilder {
    stack: Vec<OpenElement>,
    top: Vec<DomNode>,
    pending_text: String,
}

impl TreeBuilder {
    fn new() -> Self {
        TreeBuilder {
            stack: Vec::new(),
            top: Vec::new(),
            pending_text: String::new(),
        }
    }

    fn push_node(&mut self, node: DomNode) {
        match self.stack.last_mut() {
            Some(open) => open.element.children.push(node),
            None => self.top.push(node),
        }
    }

    fn flush_text(&mut self) {
        if self.pending_text.is_empty() {
            return;
        }
        let text = std::mem::take(&mut self.pending_text);
        if !is_blank(&text) {
            self.push_node(DomNode::Text(text));
        }
    }

    fn open(&mut self, element: Element) {
        self.flush_text();
        self.stack.push(OpenElement { element });
    }

    fn close_top(&mut self) {
        if let Some(open) = self.stack.pop() {
            self.push_node(DomNode::Element(open.element));
        }
    }

    /// Closes the innermost open element with this tag, auto-closing anything
    /// opened inside it. Stray end tags are ignored.
    fn close(&mut self, tag: &str) {
        self.flush_text();
        if let Some(depth) = self.stack.iter().rposition(|o| o.element.tag == tag) {
            while self.stack.len() > depth {
                self.close_top();
            }
        }
    }

    fn finish(mut self) -> Vec<DomNode> {
        self.flush_text();
        while !self.stack.is_empty() {
            self.close_top();
        }
        self.top
    }
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let decoded = rest.find(';').and_then(|end| {
            let name = &rest[1..end];
            let c = match name {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                _ => name
                    .strip_prefix("#x")
                    .or_else(|| name.strip_prefix("#X"))
                    .and_then(|h| u32::from_str_radix(h, 16).ok())
                    .or_else(|| name.strip_prefix('#').and_then(|d| d.parse().ok()))
                    .and_then(char::from_u32),
            }?;
            Some((c, end + 1))
        });
        match decoded {
            Some((c, len)) => {
                out.push(c);
                rest = &rest[len..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

enum Tag {
    Start(Element),
    End(String),
}

/// Tries to read a tag starting at `input[0] == '<'`. Returns the tag and the
/// number of bytes consumed, or `None` when the fragment is not a tag.
fn read_tag(input: &str) -> Option<(Tag, usize)> {
    let bytes = input.as_bytes();
    let mut i = 1;
    let closing = bytes.get(i) == Some(&b'/');
    if closing {
        i += 1;
    }
    let name_start = i;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'-') {
        i += 1;
    }
    if i == name_start || !bytes[name_start].is_ascii_alphabetic() {
        return None;
    }
    let tag = input[name_start..i].to_ascii_lowercase();

    if closing {
        let end = input[i..].find('>')?;
        return Some((Tag::End(tag), i + end + 1));
    }

    let mut element = Element::try_new(&tag).ok()?;
    loop {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'/') {
            i += 1;
        }
        match bytes.get(i) {
            None => return None,
            Some(b'>') => return Some((Tag::Start(element), i + 1)),
            _ => {}
        }
        let rest = &input[i..];
        let name_len = rest
            .char_indices()
            .find(|&(_, c)| !(is_attr_name_char(c) || c.is_uppercase()))
            .map(|(p, _)| p)
            .unwrap_or(rest.len());
        if name_len == 0 {
            // Junk such as a stray quote or '='; skip one character.
            i += rest.chars().next().map_or(1, char::len_utf8);
            continue;
        }
        let name = rest[..name_len].to_lowercase();
        i += name_len;
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let mut value = String::new();
        if bytes.get(i) == Some(&b'=') {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            match bytes.get(i) {
                Some(&q @ (b'"' | b'\'')) => {
                    let close = input[i + 1..].find(q as char)?;
                    value = decode_entities(&input[i + 1..i + 1 + close]);
                    i += close + 2;
                }
                Some(_) => {
                    let rest = &input[i..];
                    let len = rest
                        .find(|c: char| c.is_whitespace() || c == '>')
                        .unwrap_or(rest.len());
                    value = decode_entities(&rest[..len]);
                    i += len;
                }
                None => return None,
            }
        }
        // Duplicate attributes: the first occurrence wins.
        if is_valid_attr_name(&name) && element.attr(&name).is_none() {
            element.set_attr(&name, &value).ok()?;
        }
    }
}

/// Parses a forest of top-level nodes without synthesizing a root.
pub fn parse_fragment(input: &str) -> Vec<DomNode> {
    let mut builder = TreeBuilder::new();
    let mut rest = input;
    while !rest.is_empty() {
        let Some(lt) = rest.find('<') else {
            builder.pending_text.push_str(&decode_entities(rest));
            break;
        };
        builder.pending_text.push_str(&decode_entities(&rest[..lt]));
        rest = &rest[lt..];
        match read_tag(rest) {
            Some((Tag::Start(element), len)) => {
                builder.open(element);
                rest = &rest[len..];
            }
            Some((Tag::End(tag), len)) => {
                builder.close(&tag);
                rest = &rest[len..];
            }
            None => {
                builder.pending_text.push('<');
                rest = &rest[1..];
            }
        }
    }
    builder.finish()
}

/// Parses restricted HTML into a normalized tree. Total: never fails.
pub fn parse(input: &str) -> DomTree {
    let mut top = parse_fragment(input);
    if top.len() == 1 && matches!(top[0], DomNode::Element(_)) {
        let root = top.pop().expect("length checked");
        return DomTree::from_node(root).expect("element root");
    }
    let mut html = Element::new("html");
    html.children = top;
    DomTree::new(html)
}

// ---------------------------------------------------------------------------
// Subtree order

/// Whether `a` embeds into `b`: roots correspond, and every node's children
/// map injectively and in order onto children of its image with identical
/// tag, attributes and text. Reflexive, transitive and antisymmetric.
pub fn subtree_leq(a: &DomTree, b: &DomTree) -> bool {
    node_embeds(a.root(), b.root())
}

/// Node-level form of [`subtree_leq`].
pub fn node_embeds(a: &DomNode, b: &DomNode) -> bool {
    match (a, b) {
        (DomNode::Text(x), DomNode::Text(y)) => x == y,
        (DomNode::Element(x), DomNode::Element(y)) => {
            if !x.same_label(y) || x.children.len() > y.children.len() {
                return false;
            }
            // Greedy earliest matching is optimal for ordered subsequence
            // embedding: any feasible image of a child can be replaced by the
            // earliest feasible one without hurting the remainder.
            let mut candidates = y.children.iter();
            x.children
                .iter()
                .all(|child| candidates.by_ref().any(|cand| node_embeds(child, cand)))
        }
        _ => false,
    }
}

//! DOM pipeline: HTML → depth-first node sequence → fixed-length chunks.
//!
//! A page is reduced to the ordered list of DOM nodes that carry rendered
//! text: elements that directly own non-whitespace text, plus `<table>`,
//! `<ol>`, `<ul>` and `<dl>` elements (whose entire subtree text is absorbed
//! into the one node). The 0-based visit order of the retained nodes is the
//! model's location signal.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Category of a retained node.
///
/// `Table` is used only for `<table>` elements, `List` only for `<ol>`,
/// `<ul>` and `<dl>`; every other retained node is `Text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Text,
    Table,
    List,
}

/// One retained DOM node in depth-first visit order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomNode {
    /// 0-based depth-first visit order among retained nodes of the document.
    pub node_id: usize,
    pub kind: NodeKind,
    /// Normalized text content (NFC, whitespace runs collapsed, trimmed).
    pub text: String,
    /// Lowercase source tag name.
    pub tag: String,
    /// Depth in the DOM tree; the root element has depth 0.
    pub depth: usize,
}

/// A retained node plus layout statistics used by heuristic baselines.
#[derive(Debug, Clone)]
pub struct AnnotatedNode {
    pub node: DomNode,
    /// Characters of normalized text that originate inside `<a>` elements.
    pub anchor_chars: usize,
    /// Total characters of normalized text.
    pub total_chars: usize,
}

impl AnnotatedNode {
    /// Fraction of the node's text that is anchor (link) text.
    pub fn link_density(&self) -> f64 {
        if self.total_chars == 0 {
            0.0
        } else {
            self.anchor_chars as f64 / self.total_chars as f64
        }
    }
}

/// One chunk (at most `l_max` nodes) of a document's node sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSequence {
    pub doc_id: String,
    pub chunk_index: usize,
    pub nodes: Vec<DomNode>,
}

/// Debug record for JSONL node dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub doc_id: String,
    pub node_id: usize,
    pub kind: NodeKind,
    pub tag: String,
    pub depth: usize,
    pub text: String,
}

impl NodeRecord {
    pub fn from_node(doc_id: &str, node: &DomNode) -> Self {
        NodeRecord {
            doc_id: doc_id.to_string(),
            node_id: node.node_id,
            kind: node.kind,
            tag: node.tag.clone(),
            depth: node.depth,
            text: node.text.clone(),
        }
    }
}

/// Owned DOM tree with boilerplate regions already removed.
///
/// Content of `script`, `style`, `noscript` and `template` elements, plus
/// comments, doctypes and processing instructions, is dropped at build time
/// and can never leak into node text.
#[derive(Debug, Clone)]
pub struct DomTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

#[derive(Debug, Clone)]
struct TreeNode {
    data: TreeData,
    children: Vec<usize>,
}

#[derive(Debug, Clone)]
enum TreeData {
    Element { tag: String },
    Text(String),
}

/// Handle to one node of a [`DomTree`]; used by tree walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeRef(usize);

const SKIPPED_ELEMENTS: [&str; 4] = ["script", "style", "noscript", "template"];
const LIST_TAGS: [&str; 3] = ["ol", "ul", "dl"];

impl DomTree {
    pub fn root(&self) -> TreeRef {
        TreeRef(self.root)
    }

    pub fn children(&self, node: TreeRef) -> impl Iterator<Item = TreeRef> + '_ {
        self.nodes[node.0].children.iter().copied().map(TreeRef)
    }

    /// Lowercase tag name if `node` is an element.
    pub fn tag(&self, node: TreeRef) -> Option<&str> {
        match &self.nodes[node.0].data {
            TreeData::Element { tag } => Some(tag),
            TreeData::Text(_) => None,
        }
    }

    /// Raw (entity-decoded, unnormalized) text if `node` is a text node.
    pub fn text(&self, node: TreeRef) -> Option<&str> {
        match &self.nodes[node.0].data {
            TreeData::Element { .. } => None,
            TreeData::Text(t) => Some(t),
        }
    }

    fn push(&mut self, data: TreeData) -> usize {
        self.nodes.push(TreeNode {
            data,
            children: Vec::new(),
        });
        self.nodes.len() - 1
    }
}

/// Parse HTML into a [`DomTree`].
///
/// Parsing is error-tolerant: malformed markup yields a best-effort tree and
/// never fails. Only an input with no element content at all is rejected
/// with [`Error::EmptyDocument`].
pub fn parse_html(html: &str) -> Result<DomTree> {
    if html.trim().is_empty() {
        return Err(Error::EmptyDocument);
    }
    let parsed = scraper::Html::parse_document(html);
    let mut tree = DomTree {
        nodes: Vec::new(),
        root: 0,
    };
    let root_el = parsed
        .tree
        .root()
        .children()
        .find(|n| n.value().is_element())
        .ok_or(Error::EmptyDocument)?;
    let root = convert(&mut tree, &root_el);
    match root {
        Some(idx) => {
            tree.root = idx;
            Ok(tree)
        }
        None => Err(Error::EmptyDocument),
    }
}

/// Parse raw bytes claimed to be HTML, decoding lossily to UTF-8 first.
///
/// Returns [`Error::InvalidEncoding`] only when nothing decodable remains.
pub fn parse_html_bytes(bytes: &[u8]) -> Result<DomTree> {
    let text = String::from_utf8_lossy(bytes);
    if text.is_empty() {
        return Err(Error::InvalidEncoding);
    }
    parse_html(&text)
}

fn convert(
    tree: &mut DomTree,
    node: &ego_tree::NodeRef<'_, scraper::Node>,
) -> Option<usize> {
    match node.value() {
        scraper::Node::Element(el) => {
            let tag = el.name().to_ascii_lowercase();
            if SKIPPED_ELEMENTS.contains(&tag.as_str()) {
                return None;
            }
            let idx = tree.push(TreeData::Element { tag });
            for child in node.children() {
                if let Some(c) = convert(tree, &child) {
                    tree.nodes[idx].children.push(c);
                }
            }
            Some(idx)
        }
        scraper::Node::Text(t) => Some(tree.push(TreeData::Text(t.to_string()))),
        _ => None,
    }
}

/// Normalize text: Unicode NFC, whitespace runs (including NBSP) collapsed
/// to a single space, leading/trailing whitespace stripped.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.nfc() {
        if c.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

/// Depth-first node sequencing: retained nodes with 0-based visit order.
///
/// An element is retained when it directly owns at least one non-whitespace
/// text child (kind `Text`, text = its direct text children joined and
/// normalized), or when its tag is `table`/`ol`/`ul`/`dl` (kind
/// `Table`/`List`, text = all subtree text joined and normalized). Table and
/// list subtrees are absorbed into the single outermost node; nothing inside
/// them is emitted again.
pub fn build_node_sequence(tree: &DomTree) -> Vec<DomNode> {
    build_annotated_nodes(tree)
        .into_iter()
        .map(|a| a.node)
        .collect()
}

/// Same walk as [`build_node_sequence`], keeping anchor-text statistics.
pub fn build_annotated_nodes(tree: &DomTree) -> Vec<AnnotatedNode> {
    let mut out = Vec::new();
    walk(tree, tree.root(), 0, false, &mut out);
    out
}

fn walk(
    tree: &DomTree,
    node: TreeRef,
    depth: usize,
    in_anchor: bool,
    out: &mut Vec<AnnotatedNode>,
) {
    let Some(tag) = tree.tag(node) else {
        return;
    };
    let in_anchor = in_anchor || tag == "a";

    if tag == "table" || LIST_TAGS.contains(&tag) {
        let kind = if tag == "table" {
            NodeKind::Table
        } else {
            NodeKind::List
        };
        let mut pieces = Vec::new();
        collect_subtree_text(tree, node, in_anchor, &mut pieces);
        out.push(make_node(out.len(), kind, tag, depth, &pieces));
        return; // subtree absorbed
    }

    let direct: Vec<(String, bool)> = tree
        .children(node)
        .filter_map(|c| tree.text(c).map(|t| (t.to_string(), in_anchor)))
        .collect();
    if direct.iter().any(|(t, _)| !normalize_text(t).is_empty()) {
        out.push(make_node(out.len(), NodeKind::Text, tag, depth, &direct));
    }

    for child in tree.children(node) {
        walk(tree, child, depth + 1, in_anchor, out);
    }
}

fn collect_subtree_text(
    tree: &DomTree,
    node: TreeRef,
    in_anchor: bool,
    pieces: &mut Vec<(String, bool)>,
) {
    for child in tree.children(node) {
        if let Some(t) = tree.text(child) {
            pieces.push((t.to_string(), in_anchor));
        } else {
            let child_anchor = in_anchor || tree.tag(child) == Some("a");
            collect_subtree_text(tree, child, child_anchor, pieces);
        }
    }
}

fn make_node(
    node_id: usize,
    kind: NodeKind,
    tag: &str,
    depth: usize,
    pieces: &[(String, bool)],
) -> AnnotatedNode {
    let mut anchor_chars = 0;
    let mut total_chars = 0;
    let mut joined = String::new();
    for (raw, is_anchor) in pieces {
        let norm = normalize_text(raw);
        let n = norm.chars().count();
        total_chars += n;
        if *is_anchor {
            anchor_chars += n;
        }
        if !norm.is_empty() {
            if !joined.is_empty() {
                joined.push(' ');
            }
            joined.push_str(&norm);
        }
    }
    AnnotatedNode {
        node: DomNode {
            node_id,
            kind,
            text: joined,
            tag: tag.to_string(),
            depth,
        },
        anchor_chars,
        total_chars,
    }
}

/// Split a node sequence into greedy contiguous chunks of at most `l_max`
/// nodes. Concatenating the chunks in `chunk_index` order reproduces the
/// input exactly; every emitted chunk is non-empty.
pub fn chunk_sequence(doc_id: &str, nodes: Vec<DomNode>, l_max: usize) -> Vec<NodeSequence> {
    assert!(l_max >= 1, "l_max must be at least 1");
    let mut chunks = Vec::new();
    let mut nodes = nodes;
    let mut chunk_index = 0;
    while !nodes.is_empty() {
        let rest = if nodes.len() > l_max {
            nodes.split_off(l_max)
        } else {
            Vec::new()
        };
        chunks.push(NodeSequence {
            doc_id: doc_id.to_string(),
            chunk_index,
            nodes,
        });
        nodes = rest;
        chunk_index += 1;
    }
    chunks
}

/// Full pipeline for one document: parse, sequence, chunk.
pub fn document_chunks(doc_id: &str, html: &str, l_max: usize) -> Result<Vec<NodeSequence>> {
    let tree = parse_html(html)?;
    let nodes = build_node_sequence(&tree);
    Ok(chunk_sequence(doc_id, nodes, l_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(nodes: &[DomNode]) -> Vec<&str> {
        nodes.iter().map(|n| n.text.as_str()).collect()
    }

    #[test]
    fn minimal_page_has_one_text_node() {
        let tree = parse_html("<html><body><p>hi</p></body></html>").unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].node_id, 0);
        assert_eq!(nodes[0].kind, NodeKind::Text);
        assert_eq!(nodes[0].text, "hi");
        assert_eq!(nodes[0].tag, "p");
    }

    #[test]
    fn malformed_markup_recovers_all_fragments() {
        // Reference error-tolerant parsers recover both text runs from this
        // unclosed snippet; both must survive into the node sequence.
        let tree = parse_html("<p>unclosed <b>bold").unwrap();
        let nodes = build_node_sequence(&tree);
        let all: Vec<&str> = texts(&nodes);
        assert!(all.contains(&"unclosed"), "nodes: {all:?}");
        assert!(all.contains(&"bold"), "nodes: {all:?}");
    }

    #[test]
    fn script_content_is_excluded() {
        let tree = parse_html("<script>var x=1;</script><p>a</p>").unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(texts(&nodes), vec!["a"]);
    }

    #[test]
    fn no_sentinel_leakage_from_boilerplate_regions() {
        let html = "<html><head><style>p{color:red} SENTINEL_STYLE</style>\
             <script>SENTINEL_SCRIPT</script></head>\
             <body><!-- SENTINEL_COMMENT --><noscript>SENTINEL_NOSCRIPT</noscript>\
             <template><p>SENTINEL_TEMPLATE</p></template><p>keep</p></body></html>";
        let tree = parse_html(html).unwrap();
        let joined: String = build_node_sequence(&tree)
            .iter()
            .map(|n| n.text.clone())
            .collect::<Vec<_>>()
            .join(" ");
        assert!(!joined.contains("SENTINEL"), "leaked: {joined}");
        assert!(joined.contains("keep"));
    }

    #[test]
    fn dfs_order_and_list_absorption() {
        let tree = parse_html(
            "<body><h1>T</h1><p>a</p><ul><li>x</li><li>y</li></ul></body>",
        )
        .unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(nodes.len(), 3);
        assert_eq!(
            (nodes[0].node_id, nodes[0].kind, nodes[0].text.as_str(), nodes[0].tag.as_str()),
            (0, NodeKind::Text, "T", "h1")
        );
        assert_eq!(
            (nodes[1].node_id, nodes[1].kind, nodes[1].text.as_str(), nodes[1].tag.as_str()),
            (1, NodeKind::Text, "a", "p")
        );
        assert_eq!(
            (nodes[2].node_id, nodes[2].kind, nodes[2].text.as_str(), nodes[2].tag.as_str()),
            (2, NodeKind::List, "x y", "ul")
        );
    }

    #[test]
    fn empty_body_yields_empty_sequence() {
        let tree = parse_html("<body></body>").unwrap();
        assert!(build_node_sequence(&tree).is_empty());
    }

    #[test]
    fn table_absorbs_descendant_text() {
        let tree =
            parse_html("<table><tr><td>c1</td><td>c2</td></tr></table>").unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].kind, NodeKind::Table);
        assert_eq!(nodes[0].tag, "table");
        assert_eq!(nodes[0].node_id, 0);
        // Oracle: brute-force concatenation of every descendant text node.
        assert_eq!(nodes[0].text, "c1 c2");
    }

    #[test]
    fn nested_table_and_list_absorbed_into_outermost() {
        let tree = parse_html(
            "<body><table><tr><td>outer<table><tr><td>inner</td></tr></table></td></tr></table>\
             <ul><li>one<ol><li>two</li></ol></li></ul></body>",
        )
        .unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(nodes.len(), 2);
        assert_eq!(nodes[0].kind, NodeKind::Table);
        assert_eq!(nodes[0].text, "outer inner");
        assert_eq!(nodes[1].kind, NodeKind::List);
        assert_eq!(nodes[1].text, "one two");
    }

    #[test]
    fn text_inside_retained_table_not_reemitted() {
        let tree = parse_html("<body><table><tr><td><p>cell</p></td></tr></table></body>")
            .unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(nodes.len(), 1, "inner <p> must be absorbed: {nodes:?}");
        assert_eq!(nodes[0].kind, NodeKind::Table);
    }

    #[test]
    fn table_after_owned_text_is_separate() {
        let tree = parse_html("<body><div>hi<table><tr><td>c</td></tr></table></div></body>")
            .unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(nodes.len(), 2);
        assert_eq!((nodes[0].kind, nodes[0].text.as_str()), (NodeKind::Text, "hi"));
        assert_eq!((nodes[1].kind, nodes[1].text.as_str()), (NodeKind::Table, "c"));
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize_text("  a\n\tb  "), "a b");
    }

    #[test]
    fn normalize_composes_nfc() {
        assert_eq!(normalize_text("cafe\u{301}"), "café");
    }

    #[test]
    fn normalize_treats_nbsp_as_whitespace() {
        assert_eq!(normalize_text("a\u{a0}b"), "a b");
    }

    #[test]
    fn chunking_greedy_sizes() {
        let nodes: Vec<DomNode> = (0..5)
            .map(|i| DomNode {
                node_id: i,
                kind: NodeKind::Text,
                text: format!("n{i}"),
                tag: "p".into(),
                depth: 1,
            })
            .collect();
        let chunks = chunk_sequence("d", nodes, 2);
        let sizes: Vec<usize> = chunks.iter().map(|c| c.nodes.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let indices: Vec<usize> = chunks.iter().map(|c| c.chunk_index).collect();
        assert_eq!(indices, vec![0, 1, 2]);
    }

    #[test]
    fn chunking_exact_fit_is_one_chunk() {
        let nodes: Vec<DomNode> = (0..384)
            .map(|i| DomNode {
                node_id: i,
                kind: NodeKind::Text,
                text: "t".into(),
                tag: "p".into(),
                depth: 1,
            })
            .collect();
        assert_eq!(chunk_sequence("d", nodes, 384).len(), 1);
    }

    #[test]
    fn chunking_empty_input() {
        assert!(chunk_sequence("d", Vec::new(), 384).is_empty());
    }

    #[test]
    fn empty_document_errors() {
        assert!(matches!(parse_html(""), Err(Error::EmptyDocument)));
        assert!(matches!(parse_html("   \n "), Err(Error::EmptyDocument)));
    }

    #[test]
    fn empty_bytes_error_as_invalid_encoding() {
        assert!(matches!(parse_html_bytes(b""), Err(Error::InvalidEncoding)));
    }

    #[test]
    fn invalid_utf8_is_decoded_lossily() {
        let mut bytes = b"<p>caf".to_vec();
        bytes.push(0xE9); // latin-1 e-acute, invalid as UTF-8
        bytes.extend_from_slice(b"</p>");
        let tree = parse_html_bytes(&bytes).unwrap();
        let nodes = build_node_sequence(&tree);
        assert_eq!(nodes.len(), 1);
        assert!(nodes[0].text.starts_with("caf"));
    }

    #[test]
    fn determinism_across_runs() {
        let html = "<body><h1>Title</h1><p>Some text</p><ul><li>a</li></ul></body>";
        let a = build_node_sequence(&parse_html(html).unwrap());
        let b = build_node_sequence(&parse_html(html).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn anchor_fraction_tracked() {
        let tree = parse_html(
            "<body><p>plain words here</p><a href=\"#\">linked text</a>\
             <div><a href=\"#\">ab</a> cd</div></body>",
        )
        .unwrap();
        let nodes = build_annotated_nodes(&tree);
        // <p> has no anchor text
        assert_eq!(nodes[0].anchor_chars, 0);
        // <a> directly owns its text
        let a = nodes.iter().find(|n| n.node.tag == "a").unwrap();
        assert_eq!(a.anchor_chars, a.total_chars);
        // div owns " cd" directly (not anchor); the inner <a> text is its own node
        let div = nodes.iter().find(|n| n.node.tag == "div").unwrap();
        assert_eq!(div.anchor_chars, 0);
        assert_eq!(div.node.text, "cd");
    }

    // Independent brute-force oracle: walk the tree with an explicit stack,
    // applying the retention rules directly, and compare with the
    // implementation's recursive walk.
    fn brute_force_sequence(tree: &DomTree) -> Vec<(NodeKind, String, String)> {
        fn subtree_text(tree: &DomTree, n: TreeRef) -> Vec<String> {
            let mut acc = Vec::new();
            for c in tree.children(n) {
                if let Some(t) = tree.text(c) {
                    acc.push(t.to_string());
                } else {
                    acc.extend(subtree_text(tree, c));
                }
            }
            acc
        }
        fn join_norm(parts: &[String]) -> String {
            let normed: Vec<String> = parts
                .iter()
                .map(|p| normalize_text(p))
                .filter(|p| !p.is_empty())
                .collect();
            normed.join(" ")
        }
        let mut out = Vec::new();
        let mut stack = vec![tree.root()];
        while let Some(n) = stack.pop() {
            let Some(tag) = tree.tag(n) else { continue };
            if tag == "table" || LIST_TAGS.contains(&tag) {
                let kind = if tag == "table" { NodeKind::Table } else { NodeKind::List };
                out.push((kind, join_norm(&subtree_text(tree, n)), tag.to_string()));
                continue;
            }
            let direct: Vec<String> = tree
                .children(n)
                .filter_map(|c| tree.text(c).map(str::to_string))
                .collect();
            if !join_norm(&direct).is_empty() {
                out.push((NodeKind::Text, join_norm(&direct), tag.to_string()));
            }
            let kids: Vec<TreeRef> = tree.children(n).collect();
            for k in kids.into_iter().rev() {
                stack.push(k);
            }
        }
        out
    }

    #[test]
    fn brute_force_walk_agrees_on_fixtures() {
        let fixtures = [
            "<body><h1>T</h1><p>a</p><ul><li>x</li><li>y</li></ul></body>",
            "<body><div>a<p>b</p>c</div><table><tr><td>z</td></tr></table></body>",
            "<p>unclosed <b>bold",
            "<body><section><h2>s</h2><article><p>deep <em>em</em> text</p></article></section></body>",
            "<body><dl><dt>term</dt><dd>def</dd></dl><ol><li>1</li><li>2</li></ol></body>",
        ];
        for html in fixtures {
            let tree = parse_html(html).unwrap();
            let got: Vec<(NodeKind, String, String)> = build_node_sequence(&tree)
                .into_iter()
                .map(|n| (n.kind, n.text, n.tag))
                .collect();
            let want = brute_force_sequence(&tree);
            assert_eq!(got, want, "fixture: {html}");
        }
    }

    #[test]
    fn node_ids_are_consecutive_and_monotone() {
        let html = "<body><p>a</p><div><p>b</p><span>c</span></div><ul><li>d</li></ul><p>e</p></body>";
        let nodes = build_node_sequence(&parse_html(html).unwrap());
        for (i, n) in nodes.iter().enumerate() {
            assert_eq!(n.node_id, i);
        }
    }

    #[test]
    fn multiple_direct_text_runs_merge_into_one_node() {
        let tree = parse_html("<body><div>a<p>x</p>c</div></body>").unwrap();
        let nodes = build_node_sequence(&tree);
        let div = nodes.iter().find(|n| n.tag == "div").unwrap();
        assert_eq!(div.text, "a c");
        let p = nodes.iter().find(|n| n.tag == "p").unwrap();
        assert_eq!(p.text, "x");
        // div (parent) is visited before p (child)
        assert!(div.node_id < p.node_id);
    }
}

//! Identifier-agnostic syntax trees and the structural feature block.
//!
//! Parsing is behind [`SourceParser`]; the default binding is the
//! tree-sitter Java grammar. Trees keep only named node kinds, so
//! identifier names and literal values never reach the features.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Trees larger than this (either side) skip exact tree edit distance.
pub const DEFAULT_TED_NODE_CAP: usize = 1_500;

/// Number of values in [`StructuralVector::to_array`].
pub const STRUCTURAL_DIM: usize = 6;

pub const STRUCTURAL_NAMES: [&str; STRUCTURAL_DIM] = [
    "d_logical_density",
    "d_max_depth",
    "d_node_count",
    "ted_norm",
    "subtree_jaccard",
    "leaf_ratio",
];

/// Control-flow kinds counted by logical density (tree-sitter Java names
/// after normalization).
pub const CONTROL_FLOW_KINDS: [&str; 11] = [
    "if_statement",
    "for_statement",
    "enhanced_for_statement",
    "while_statement",
    "do_statement",
    "switch_expression",
    "switch_statement",
    "switch_label",
    "catch_clause",
    "ternary_expression",
    "return_statement",
];

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum SyntaxError {
    #[error("parse error{}: {message}", fragment_id.as_deref().map(|id| format!(" in fragment {id}")).unwrap_or_default())]
    Parse {
        fragment_id: Option<String>,
        message: String,
    },
    #[error("malformed tree: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxNode {
    pub kind: String,
    pub children: Vec<usize>,
}

/// Ordered rooted tree; node ids are indices into `nodes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxTree {
    nodes: Vec<SyntaxNode>,
    root: usize,
}

impl SyntaxTree {
    /// Validates that `root` reaches every node exactly once.
    pub fn new(nodes: Vec<SyntaxNode>, root: usize) -> Result<Self, SyntaxError> {
        if root >= nodes.len() {
            return Err(SyntaxError::Malformed(format!("root {root} out of range")));
        }
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                return Err(SyntaxError::Malformed(format!("node {id} reached twice")));
            }
            for &c in &nodes[id].children {
                if c >= nodes.len() {
                    return Err(SyntaxError::Malformed(format!("child {c} out of range")));
                }
                stack.push(c);
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(SyntaxError::Malformed(format!("node {orphan} unreachable from root")));
        }
        Ok(Self { nodes, root })
    }

    pub fn leaf(kind: &str) -> Self {
        Self {
            nodes: vec![SyntaxNode {
                kind: kind.to_string(),
                children: vec![],
            }],
            root: 0,
        }
    }

    /// Builds `kind(children...)`, grafting the child trees in order.
    pub fn branch(kind: &str, children: Vec<SyntaxTree>) -> Self {
        let mut nodes = vec![SyntaxNode {
            kind: kind.to_string(),
            children: vec![],
        }];
        for child in children {
            let offset = nodes.len();
            nodes[0].children.push(offset + child.root);
            nodes.extend(child.nodes.into_iter().map(|mut n| {
                n.children.iter_mut().for_each(|c| *c += offset);
                n
            }));
        }
        Self { nodes, root: 0 }
    }

    pub fn nodes(&self) -> &[SyntaxNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: usize) -> &str {
        &self.nodes[id].kind
    }

    /// Node ids in post-order (children left to right, then the parent).
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, 0usize)];
        while let Some((id, next)) = stack.pop() {
            let children = &self.nodes[id].children;
            if next < children.len() {
                stack.push((id, next + 1));
                stack.push((children[next], 0));
            } else {
                out.push(id);
            }
        }
        out
    }

    /// Node ids in pre-order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id].children.iter().rev());
        }
        out
    }
}

/// Parses source text into a [`SyntaxTree`]. Implementations are not
/// required to be reentrant; use one instance per worker.
pub trait SourceParser {
    fn parse(&mut self, source: &str) -> Result<SyntaxTree, SyntaxError>;
}

/// Parses `source`, tagging any error with `fragment_id`.
pub fn parse_fragment<P: SourceParser + ?Sized>(
    parser: &mut P,
    fragment_id: &str,
    source: &str,
) -> Result<SyntaxTree, SyntaxError> {
    parser.parse(source).map_err(|e| match e {
        SyntaxError::Parse { message, .. } => SyntaxError::Parse {
            fragment_id: Some(fragment_id.to_string()),
            message,
        },
        other => other,
    })
}

/// tree-sitter Java binding. Method-level fragments and bare statements
/// parse directly; class members that only parse inside a class body are
/// retried wrapped in a synthetic class.
pub struct JavaParser {
    inner: tree_sitter::Parser,
}

const WRAP_PREFIX: &str = "class __Fragment__ {\n";
const WRAP_SUFFIX: &str = "\n}";

impl JavaParser {
    pub fn new() -> Self {
        let mut inner = tree_sitter::Parser::new();
        inner
            .set_language(&tree_sitter_java::LANGUAGE.into())
            .expect("bundled Java grammar matches the tree-sitter ABI");
        Self { inner }
    }

    fn parse_raw(&mut self, source: &str) -> Option<tree_sitter::Tree> {
        self.inner.parse(source, None)
    }
}

impl Default for JavaParser {
    fn default() -> Self {
        Self::new()
    }
}

impl SourceParser for JavaParser {
    fn parse(&mut self, source: &str) -> Result<SyntaxTree, SyntaxError> {
        let tree = self.parse_raw(source).ok_or_else(|| SyntaxError::Parse {
            fragment_id: None,
            message: "parser returned no tree".into(),
        })?;
        if !tree.root_node().has_error() {
            return Ok(convert(tree.root_node(), None));
        }
        let wrapped = format!("{WRAP_PREFIX}{source}{WRAP_SUFFIX}");
        if let Some(tree2) = self.parse_raw(&wrapped) {
            let root = tree2.root_node();
            if !root.has_error() {
                if let Some(body) = root
                    .named_child(0)
                    .filter(|c| c.kind() == "class_declaration")
                    .and_then(|c| c.child_by_field_name("body"))
                {
                    return Ok(convert(root, Some(body)));
                }
            }
        }
        let err = first_error(tree.root_node());
        Err(SyntaxError::Parse {
            fragment_id: None,
            message: match err {
                Some((row, col)) => format!("syntax error at line {}, column {}", row + 1, col + 1),
                None => "syntax error".into(),
            },
        })
    }
}

fn first_error(node: tree_sitter::Node) -> Option<(usize, usize)> {
    let mut cursor = node.walk();
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        if n.is_error() || n.is_missing() {
            let p = n.start_position();
            return Some((p.row, p.column));
        }
        let children: Vec<_> = n.children(&mut cursor).collect();
        stack.extend(children.into_iter().rev());
    }
    None
}

/// Maps grammar kinds onto the tree vocabulary.
fn normalize_kind(kind: &str) -> &str {
    match kind {
        "assignment_expression" => "assignment",
        "decimal_integer_literal"
        | "hex_integer_literal"
        | "octal_integer_literal"
        | "binary_integer_literal"
        | "decimal_floating_point_literal"
        | "hex_floating_point_literal" => "number_literal",
        "character_literal" => "char_literal",
        "true" | "false" => "boolean_literal",
        other => other,
    }
}

fn is_literal(kind: &str) -> bool {
    matches!(
        kind,
        "number_literal" | "string_literal" | "char_literal" | "boolean_literal" | "null_literal"
    )
}

fn is_comment(kind: &str) -> bool {
    matches!(kind, "line_comment" | "block_comment" | "comment")
}

/// Converts named nodes to a [`SyntaxTree`]. With `body`, the root is
/// `program` and its children are the named children of `body`.
fn convert(root: tree_sitter::Node, body: Option<tree_sitter::Node>) -> SyntaxTree {
    let mut nodes = vec![SyntaxNode {
        kind: "program".into(),
        children: vec![],
    }];
    let mut cursor = root.walk();
    let top = body.unwrap_or(root);
    let mut stack: Vec<(tree_sitter::Node, usize)> = top
        .named_children(&mut cursor)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .map(|c| (c, 0))
        .collect();
    while let Some((ts, parent)) = stack.pop() {
        if is_comment(ts.kind()) {
            continue;
        }
        let kind = normalize_kind(ts.kind());
        let id = nodes.len();
        nodes.push(SyntaxNode {
            kind: kind.to_string(),
            children: vec![],
        });
        nodes[parent].children.push(id);
        if is_literal(kind) {
            continue;
        }
        let kids: Vec<_> = ts.named_children(&mut cursor).collect();
        stack.extend(kids.into_iter().rev().map(|c| (c, id)));
    }
    SyntaxTree { nodes, root: 0 }
}

/// Zhang–Shasha ordered tree edit distance with unit insert, delete and
/// relabel costs.
pub fn tree_edit_distance(a: &SyntaxTree, b: &SyntaxTree) -> usize {
    let mut interner: HashMap<&str, u32> = HashMap::new();
    let pa = PostorderTree::new(a, &mut interner);
    let pb = PostorderTree::new(b, &mut interner);
    zhang_shasha(&pa, &pb)
}

struct PostorderTree {
    labels: Vec<u32>,
    /// leftmost leaf descendant of each node, in post-order indices
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

impl PostorderTree {
    fn new<'t>(tree: &'t SyntaxTree, interner: &mut HashMap<&'t str, u32>) -> Self {
        let order = tree.postorder();
        let mut post_index = vec![0; tree.len()];
        for (i, &id) in order.iter().enumerate() {
            post_index[id] = i;
        }
        let mut labels = Vec::with_capacity(order.len());
        let mut lml = vec![0; order.len()];
        for (i, &id) in order.iter().enumerate() {
            let next = interner.len() as u32;
            labels.push(*interner.entry(tree.kind(id)).or_insert(next));
            lml[i] = match tree.nodes()[id].children.first() {
                Some(&first) => lml[post_index[first]],
                None => i,
            };
        }
        // a keyroot is the highest node with a given leftmost leaf
        let mut highest: HashMap<usize, usize> = HashMap::new();
        for (i, &l) in lml.iter().enumerate() {
            highest.insert(l, i);
        }
        let mut keyroots: Vec<usize> = highest.into_values().collect();
        keyroots.sort_unstable();
        Self {
            labels,
            lml,
            keyroots,
        }
    }
}

fn zhang_shasha(a: &PostorderTree, b: &PostorderTree) -> usize {
    let (n, m) = (a.labels.len(), b.labels.len());
    let mut td = vec![vec![0usize; m]; n];
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &i in &a.keyroots {
        for &j in &b.keyroots {
            let (li, lj) = (a.lml[i], b.lml[j]);
            // forest distance over [li..=x] x [lj..=y], offset by one
            let rows = i - li + 2;
            let cols = j - lj + 2;
            fd[0][0] = 0;
            for x in 1..rows {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..cols {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..rows {
                let ai = li + x - 1;
                for y in 1..cols {
                    let bj = lj + y - 1;
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if a.lml[ai] == li && b.lml[bj] == lj {
                        let rel = fd[x - 1][y - 1] + usize::from(a.labels[ai] != b.labels[bj]);
                        fd[x][y] = del.min(ins).min(rel);
                        td[ai][bj] = fd[x][y];
                    } else {
                        let px = a.lml[ai] - li;
                        let py = b.lml[bj] - lj;
                        fd[x][y] = del.min(ins).min(fd[px][py] + td[ai][bj]);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}

/// Merkle hash of every node over `(kind, ordered child hashes)`.
pub fn node_hashes(t: &SyntaxTree) -> Vec<u64> {
    let mut hashes = vec![0u64; t.len()];
    for id in t.postorder() {
        let node = &t.nodes()[id];
        let mut h = Sha256::new();
        h.update((node.kind.len() as u64).to_le_bytes());
        h.update(node.kind.as_bytes());
        for &c in &node.children {
            h.update(hashes[c].to_le_bytes());
        }
        let digest = h.finalize();
        hashes[id] = u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"));
    }
    hashes
}

/// Set of subtree fingerprints; equal subtrees share one entry.
pub fn subtree_fingerprints(t: &SyntaxTree) -> HashSet<u64> {
    node_hashes(t).into_iter().collect()
}

pub fn fingerprint_jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeStatistics {
    pub max_depth: usize,
    pub width: usize,
    pub leaf_count: usize,
    pub node_count: usize,
    pub logical_density: f64,
}

pub fn shape_statistics(t: &SyntaxTree) -> ShapeStatistics {
    let mut per_depth: Vec<usize> = Vec::new();
    let mut leaves = 0;
    let mut control = 0;
    let mut stack = vec![(t.root(), 1usize)];
    while let Some((id, depth)) = stack.pop() {
        if per_depth.len() < depth {
            per_depth.resize(depth, 0);
        }
        per_depth[depth - 1] += 1;
        let node = &t.nodes()[id];
        if node.children.is_empty() {
            leaves += 1;
        }
        if CONTROL_FLOW_KINDS.contains(&node.kind.as_str()) {
            control += 1;
        }
        stack.extend(node.children.iter().map(|&c| (c, depth + 1)));
    }
    ShapeStatistics {
        max_depth: per_depth.len(),
        width: per_depth.iter().copied().max().unwrap_or(0),
        leaf_count: leaves,
        node_count: t.len(),
        logical_density: control as f64 / t.len() as f64,
    }
}

/// `v_ast`: six identifier-agnostic pair deltas.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructuralVector {
    pub d_logical_density: f64,
    pub d_max_depth: f64,
    pub d_node_count: f64,
    pub ted_norm: f64,
    pub subtree_jaccard: f64,
    pub leaf_ratio: f64,
}

impl StructuralVector {
    pub fn to_array(&self) -> [f64; STRUCTURAL_DIM] {
        [
            self.d_logical_density,
            self.d_max_depth,
            self.d_node_count,
            self.ted_norm,
            self.subtree_jaccard,
            self.leaf_ratio,
        ]
    }

    pub fn from_array(v: [f64; STRUCTURAL_DIM]) -> Self {
        Self {
            d_logical_density: v[0],
            d_max_depth: v[1],
            d_node_count: v[2],
            ted_norm: v[3],
            subtree_jaccard: v[4],
            leaf_ratio: v[5],
        }
    }
}

/// Structural block plus its provenance flags.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StructuralFeatures {
    pub vector: StructuralVector,
    pub parse_failed: bool,
    pub ted_approx: bool,
}

impl StructuralFeatures {
    /// Zero vector used when either side failed to parse.
    pub fn parse_failure() -> Self {
        Self {
            vector: StructuralVector::default(),
            parse_failed: true,
            ted_approx: false,
        }
    }
}

fn rel_delta(x: usize, y: usize) -> f64 {
    let hi = x.max(y);
    if hi == 0 {
        0.0
    } else {
        x.abs_diff(y) as f64 / hi as f64
    }
}

pub fn structural_vector(a: &SyntaxTree, b: &SyntaxTree) -> StructuralFeatures {
    structural_vector_capped(a, b, DEFAULT_TED_NODE_CAP)
}

/// Above `ted_cap` nodes on either side, `ted_norm` falls back to
/// `1 - subtree_jaccard` and `ted_approx` is set.
pub fn structural_vector_capped(a: &SyntaxTree, b: &SyntaxTree, ted_cap: usize) -> StructuralFeatures {
    let (sa, sb) = (shape_statistics(a), shape_statistics(b));
    let subtree_jaccard = fingerprint_jaccard(&subtree_fingerprints(a), &subtree_fingerprints(b));
    let approx = a.len() > ted_cap || b.len() > ted_cap;
    let ted_norm = if approx {
        1.0 - subtree_jaccard
    } else {
        tree_edit_distance(a, b) as f64 / (a.len() + b.len()) as f64
    };
    StructuralFeatures {
        vector: StructuralVector {
            d_logical_density: (sa.logical_density - sb.logical_density).abs(),
            d_max_depth: rel_delta(sa.max_depth, sb.max_depth),
            d_node_count: rel_delta(sa.node_count, sb.node_count),
            ted_norm,
            subtree_jaccard,
            leaf_ratio: sa.leaf_count.min(sb.leaf_count) as f64 / sa.leaf_count.max(sb.leaf_count) as f64,
        },
        parse_failed: false,
        ted_approx: approx,
    }
}

/// Row of the structural feature cache.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructuralCacheRow {
    pub pair_id: String,
    pub structural: Vec<f64>,
    pub parse_failed: bool,
    pub ted_approx: bool,
}

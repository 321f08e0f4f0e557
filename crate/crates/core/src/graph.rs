//! Text-attributed graphs: data model, the `TAG v1` file format, and the
//! dense matrices derived from the adjacency structure.
//!
//! File format (UTF-8, one record per line, blank lines and `#` comments are
//! ignored):
//!
//! ```text
//! TAG v1 <N> <E>
//! node <id> <label-or-"-"> <token> <token> ...
//! edge <u> <v>
//! ```
//!
//! Node lines come first. Each undirected edge is listed exactly once with
//! `u` declared before `v`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Undirected graph whose nodes carry token sequences and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAttributedGraph {
    node_ids: Vec<String>,
    tokens: Vec<Vec<usize>>,
    vocab: Vec<String>,
    labels: Option<Vec<usize>>,
    label_names: Vec<String>,
    neighbors: Vec<Vec<usize>>,
}

impl TextAttributedGraph {
    /// Builds a graph from string tokens, interning tokens and labels in
    /// first-appearance order. Edges are index pairs in any orientation.
    pub fn new(
        node_ids: Vec<String>,
        tokens: Vec<Vec<String>>,
        labels: Option<Vec<String>>,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        if tokens.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} token sequences for {} nodes",
                tokens.len(),
                n
            )));
        }
        let mut seen_ids = HashMap::new();
        for (i, id) in node_ids.iter().enumerate() {
            if seen_ids.insert(id.as_str(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{id}`")));
            }
        }
        let mut vocab = Vec::new();
        let mut vocab_index: HashMap<String, usize> = HashMap::new();
        let mut token_ids = Vec::with_capacity(n);
        for (i, seq) in tokens.into_iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::InvalidGraph(format!(
                    "empty token sequence for node `{}`",
                    node_ids[i]
                )));
            }
            let ids = seq
                .into_iter()
                .map(|t| {
                    let next = vocab.len();
                    *vocab_index.entry(t.clone()).or_insert_with(|| {
                        vocab.push(t);
                        next
                    })
                })
                .collect();
            token_ids.push(ids);
        }
        let (labels, label_names) = match labels {
            None => (None, Vec::new()),
            Some(raw) => {
                if raw.len() != n {
                    return Err(Error::InvalidGraph(format!(
                        "{} labels for {} nodes",
                        raw.len(),
                        n
                    )));
                }
                let mut names: Vec<String> = Vec::new();
                let ids = raw
                    .into_iter()
                    .map(|l| match names.iter().position(|x| *x == l) {
                        Some(p) => p,
                        None => {
                            names.push(l);
                            names.len() - 1
                        }
                    })
                    .collect();
                (Some(ids), names)
            }
        };
        let mut neighbors = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop on node {a}")));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            node_ids,
            tokens: token_ids,
            vocab,
            labels,
            label_names,
            neighbors,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn tokens(&self, v: usize) -> &[usize] {
        &self.tokens[v]
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn class_count(&self) -> usize {
        self.label_names.len()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (u, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        out
    }

    /// Same nodes, tokens and labels; edge set replaced.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        let n = self.node_count();
        let mut neighbors = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidGraph(format!("invalid edge ({a}, {b})")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            neighbors,
            ..self.clone()
        })
    }

    /// Subgraph induced by `nodes`, renumbered in the given order. Token and
    /// label ids are kept, so encoders trained on either graph agree.
    pub fn induced(&self, nodes: &[usize]) -> Result<Self> {
        let n = self.node_count();
        let mut position = vec![usize::MAX; n];
        for (i, &v) in nodes.iter().enumerate() {
            if v >= n || position[v] != usize::MAX {
                return Err(Error::InvalidGraph(format!(
                    "node {v} is out of range or repeated"
                )));
            }
            position[v] = i;
        }
        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        let neighbors = nodes
            .iter()
            .map(|&v| {
                let mut list: Vec<usize> = self.neighbors[v]
                    .iter()
                    .map(|&u| position[u])
                    .filter(|&p| p != usize::MAX)
                    .collect();
                list.sort_unstable();
                list
            })
            .collect();
        Ok(Self {
            node_ids: nodes.iter().map(|&v| self.node_ids[v].clone()).collect(),
            tokens: nodes.iter().map(|&v| self.tokens[v].clone()).collect(),
            vocab: self.vocab.clone(),
            labels: self
                .labels
                .as_ref()
                .map(|l| nodes.iter().map(|&v| l[v]).collect()),
            label_names: self.label_names.clone(),
            neighbors,
        })
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut a = DMatrix::zeros(n, n);
        for (u, list) in self.neighbors.iter().enumerate() {
            for &v in list {
                a[(u, v)] = 1.0;
            }
        }
        a
    }

    /// Parses the `TAG v1` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (header_line, header) = lines.next().ok_or(Error::MalformedLine {
            line: 1,
            reason: "missing `TAG v1 <N> <E>` header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (declared_nodes, declared_edges) = match fields.as_slice() {
            ["TAG", "v1", n, e] => (
                parse_count(n, header_line, "node count")?,
                parse_count(e, header_line, "edge count")?,
            ),
            _ => {
                return Err(Error::MalformedLine {
                    line: header_line,
                    reason: "expected header `TAG v1 <N> <E>`".into(),
                })
            }
        };

        let mut node_ids: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut tokens: Vec<Vec<String>> = Vec::new();
        let mut labels: Vec<Option<String>> = Vec::new();
        let mut first_label_line: Option<(usize, bool)> = None;
        let mut edges: Vec<(usize, usize)> = Vec::new();
        let mut edge_set = BTreeSet::new();

        for (line, content) in lines {
            let mut parts = content.split_whitespace();
            match parts.next() {
                Some("node") => {
                    if !edges.is_empty() {
                        return Err(Error::MalformedLine {
                            line,
                            reason: "node lines must precede edge lines".into(),
                        });
                    }
                    let id = parts.next().ok_or_else(|| Error::MalformedLine {
                        line,
                        reason: "node line missing id".into(),
                    })?;
                    let label = parts.next().ok_or_else(|| Error::MalformedLine {
                        line,
                        reason: "node line missing label field".into(),
                    })?;
                    let toks: Vec<String> = parts.map(str::to_owned).collect();
                    if toks.is_empty() {
                        return Err(Error::EmptyTokens {
                            line,
                            id: id.to_owned(),
                        });
                    }
                    if index.contains_key(id) {
                        return Err(Error::DuplicateNode {
                            line,
                            id: id.to_owned(),
                        });
                    }
                    let has_label = label != "-";
                    match first_label_line {
                        None => first_label_line = Some((line, has_label)),
                        Some((_, expected)) if expected != has_label => {
                            return Err(Error::PartialLabels { line })
                        }
                        _ => {}
                    }
                    index.insert(id.to_owned(), node_ids.len());
                    node_ids.push(id.to_owned());
                    labels.push(has_label.then(|| label.to_owned()));
                    tokens.push(toks);
                }
                Some("edge") => {
                    let ends: Vec<&str> = parts.collect();
                    let [u, v] = ends.as_slice() else {
                        return Err(Error::MalformedLine {
                            line,
                            reason: "edge line must be `edge <u> <v>`".into(),
                        });
                    };
                    let lookup = |id: &str| {
                        index
                            .get(id)
                            .copied()
                            .ok_or_else(|| Error::DanglingEndpoint {
                                line,
                                id: id.to_owned(),
                            })
                    };
                    let (a, b) = (lookup(u)?, lookup(v)?);
                    if a == b {
                        return Err(Error::SelfLoop {
                            line,
                            id: (*u).to_owned(),
                        });
                    }
                    if !edge_set.insert((a.min(b), a.max(b))) {
                        return Err(Error::DuplicateEdge {
                            line,
                            u: (*u).to_owned(),
                            v: (*v).to_owned(),
                        });
                    }
                    if a > b {
                        return Err(Error::AsymmetricEdge {
                            line,
                            u: (*u).to_owned(),
                            v: (*v).to_owned(),
                        });
                    }
                    edges.push((a, b));
                }
                Some(other) => {
                    return Err(Error::MalformedLine {
                        line,
                        reason: format!("unknown record `{other}`"),
                    })
                }
                None => unreachable!("blank lines are filtered"),
            }
        }

        if node_ids.len() != declared_nodes {
            return Err(Error::CountMismatch {
                what: "nodes",
                declared: declared_nodes,
                found: node_ids.len(),
            });
        }
        if edges.len() != declared_edges {
            return Err(Error::CountMismatch {
                what: "edges",
                declared: declared_edges,
                found: edges.len(),
            });
        }
        let labels = match first_label_line {
            Some((_, true)) => Some(labels.into_iter().map(Option::unwrap).collect()),
            _ => None,
        };
        Self::new(node_ids, tokens, labels, &edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes to the `TAG v1` format. Parsing the output reproduces the
    /// graph exactly, including token and label id assignment.
    pub fn to_tag_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "TAG v1 {} {}", self.node_count(), self.edge_count());
        for v in 0..self.node_count() {
            let label = match &self.labels {
                Some(l) => self.label_names[l[v]].as_str(),
                None => "-",
            };
            let _ = write!(out, "node {} {}", self.node_ids[v], label);
            for &t in &self.tokens[v] {
                let _ = write!(out, " {}", self.vocab[t]);
            }
            out.push('\n');
        }
        for (u, v) in self.edges() {
            let _ = writeln!(out, "edge {} {}", self.node_ids[u], self.node_ids[v]);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tag_string())?;
        Ok(())
    }
}

fn parse_count(s: &str, line: usize, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::MalformedLine {
        line,
        reason: format!("invalid {what} `{s}`"),
    })
}

/// Degree vector and the Laplacian-family matrices of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMatrices {
    pub adjacency: DMatrix<f64>,
    pub degree: DVector<f64>,
    /// `L = D - A`.
    pub laplacian: DMatrix<f64>,
    /// `D^{-1/2} L D^{-1/2}`; rows and columns of isolated nodes are zero.
    pub sym_laplacian: DMatrix<f64>,
    /// `A D^{-1}`; columns of isolated nodes are zero.
    pub col_norm_adjacency: DMatrix<f64>,
}

impl GraphMatrices {
    pub fn node_count(&self) -> usize {
        self.degree.len()
    }
}

pub fn build_matrices(g: &TextAttributedGraph) -> GraphMatrices {
    matrices_from_adjacency(g.adjacency())
}

/// Builds the matrix family from any symmetric non-negative adjacency.
pub fn matrices_from_adjacency(adjacency: DMatrix<f64>) -> GraphMatrices {
    let n = adjacency.nrows();
    let degree = DVector::from_iterator(n, adjacency.row_iter().map(|r| r.sum()));
    let laplacian = DMatrix::from_diagonal(&degree) - &adjacency;
    let inv_sqrt = degree.map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let sym_laplacian =
        DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * laplacian[(i, j)] * inv_sqrt[j]);
    let col_norm_adjacency = DMatrix::from_fn(n, n, |i, j| {
        if degree[j] > 0.0 {
            adjacency[(i, j)] / degree[j]
        } else {
            0.0
        }
    });
    GraphMatrices {
        adjacency,
        degree,
        laplacian,
        sym_laplacian,
        col_norm_adjacency,
    }
}

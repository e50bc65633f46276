//! Graph domain type and the line-delimited JSON interchange record.
//!
//! One graph per JSONL record with fields `n`, `edges`, `x` (row-major
//! features), `mask` (0/1 per node or null), `y`, `props`, and an optional
//! `labels` array carrying node labels (atom types) for molecular graphs.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({0}, {1}) endpoint out of range for {2} nodes")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate undirected edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("feature array length {0} is not a multiple of node count {1}")]
    BadFeatureLength(usize, usize),
    #[error("annotation mask length {0} does not match node count {1}")]
    BadMaskLength(usize, usize),
    #[error("node label array length {0} does not match node count {1}")]
    BadLabelLength(usize, usize),
}

/// An undirected simple graph with dense node features, an optional binary
/// node annotation (1 = node belongs to a ground-truth motif), a class label,
/// and named scalar properties used to build OOD splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// Row-major `[num_nodes * feature_dim]`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub annotation: Option<Vec<u8>>,
    pub label: usize,
    pub props: BTreeMap<String, f64>,
    /// Atom types for molecular graphs; `None` for synthetic graphs.
    pub node_labels: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphRecord {
    n: usize,
    edges: Vec<(usize, usize)>,
    x: Vec<f64>,
    mask: Option<Vec<u8>>,
    y: usize,
    props: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl Graph {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, feature_dim: usize) -> Self {
        Graph {
            num_nodes,
            edges,
            features: vec![0.0; num_nodes * feature_dim],
            feature_dim,
            annotation: None,
            label: 0,
            props: BTreeMap::new(),
            node_labels: None,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = BTreeSet::new();
        for &(u, v) in &self.edges {
            if u >= self.num_nodes || v >= self.num_nodes {
                return Err(GraphError::EdgeOutOfRange(u, v, self.num_nodes));
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                return Err(GraphError::DuplicateEdge(key.0, key.1));
            }
        }
        if self.num_nodes > 0 && self.features.len() != self.num_nodes * self.feature_dim {
            return Err(GraphError::BadFeatureLength(
                self.features.len(),
                self.num_nodes,
            ));
        }
        if let Some(mask) = &self.annotation {
            if mask.len() != self.num_nodes {
                return Err(GraphError::BadMaskLength(mask.len(), self.num_nodes));
            }
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != self.num_nodes {
                return Err(GraphError::BadLabelLength(labels.len(), self.num_nodes));
            }
        }
        Ok(())
    }

    pub fn feature_row(&self, node: usize) -> &[f64] {
        &self.features[node * self.feature_dim..(node + 1) * self.feature_dim]
    }

    /// Adjacency lists, neighbors sorted ascending.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges
            .iter()
            .any(|&(u, v)| (u == a && v == b) || (u == b && v == a))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Both directions of every undirected edge as `(src, dst)` arrays.
    pub fn directed_edges(&self) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::with_capacity(self.edges.len() * 2);
        let mut dst = Vec::with_capacity(self.edges.len() * 2);
        for &(u, v) in &self.edges {
            src.push(u);
            dst.push(v);
            src.push(v);
            dst.push(u);
        }
        (src, dst)
    }

    /// Connected components as sorted node lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut comp = vec![usize::MAX; self.num_nodes];
        let mut out = Vec::new();
        for start in 0..self.num_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![start];
            comp[start] = id;
            let mut queue = vec![start];
            while let Some(u) = queue.pop() {
                for &v in &adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = id;
                        members.push(v);
                        queue.push(v);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.num_nodes <= 1 || self.components().len() == 1
    }

    /// Relabel nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.num_nodes);
        let mut inv = vec![0usize; self.num_nodes];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| (inv[u], inv[v]))
            .collect();
        let mut features = vec![0.0; self.features.len()];
        for new in 0..self.num_nodes {
            let old = perm[new];
            features[new * self.feature_dim..(new + 1) * self.feature_dim]
                .copy_from_slice(self.feature_row(old));
        }
        Graph {
            num_nodes: self.num_nodes,
            edges,
            features,
            feature_dim: self.feature_dim,
            annotation: self
                .annotation
                .as_ref()
                .map(|m| perm.iter().map(|&old| m[old]).collect()),
            label: self.label,
            props: self.props.clone(),
            node_labels: self
                .node_labels
                .as_ref()
                .map(|l| perm.iter().map(|&old| l[old].clone()).collect()),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let record = GraphRecord {
            n: self.num_nodes,
            edges: self.edges.clone(),
            x: self.features.clone(),
            mask: self.annotation.clone(),
            y: self.label,
            props: self.props.clone(),
            labels: self.node_labels.clone(),
        };
        serde_json::to_string(&record).expect("graph record serializes")
    }

    pub fn from_jsonl(line: &str) -> Result<Graph, serde_json::Error> {
        let record: GraphRecord = serde_json::from_str(line)?;
        let feature_dim = if record.n > 0 {
            record.x.len() / record.n
        } else {
            0
        };
        Ok(Graph {
            num_nodes: record.n,
            edges: record.edges,
            features: record.x,
            feature_dim,
            annotation: record.mask,
            label: record.y,
            props: record.props,
            node_labels: record.labels,
        })
    }
}

//! Multi-relation attributed graph storage, dataset directory IO, and
//! structural statistics (per-node homophily/heterophily).
//!
//! Graphs are immutable once built: edges are symmetrized, deduplicated
//! and stripped of self-loops at construction, and each relation is held
//! in compressed sparse row layout behind an `Arc` so model code can hang
//! on to adjacency without copying it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Label of a node: 0 = normal, 1 = anomaly, -1 = unlabeled.
pub type Label = i8;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected {expected} feature values, found {found}")]
    RaggedFeatureRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: cannot parse value: {value}")]
    BadValue {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: label {value} outside {{-1, 0, 1}}")]
    BadLabel {
        path: PathBuf,
        line: usize,
        value: i64,
    },
    #[error("{path}:{line}: edge endpoint {node} out of range (n_nodes = {n_nodes})")]
    EdgeOutOfRange {
        path: PathBuf,
        line: usize,
        node: usize,
        n_nodes: usize,
    },
    #[error("meta.json mismatch: {0}")]
    MetaMismatch(String),
    #[error("relation index {0} out of range (graph has {1} relations)")]
    RelationOutOfRange(usize, usize),
    #[error("label vector length {got} does not match node count {expected}")]
    LabelLength { expected: usize, got: usize },
}

/// Compressed sparse row adjacency for one relation. Neighbor lists are
/// sorted, deduplicated, and contain no self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Csr {
    /// Build from an undirected edge list; both orientations are inserted,
    /// duplicates and self-loops dropped.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Csr {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
        for &(u, v) in edges {
            if u == v {
                continue;
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Csr { offsets, neighbors }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    #[inline]
    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Number of undirected edges (each stored twice internally).
    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Undirected edge list with u < v, sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.n_edges());
        for u in 0..self.n_nodes() {
            for &v in self.neighbors(u) {
                if u < v {
                    edges.push((u, v));
                }
            }
        }
        edges
    }
}

/// Attributed multi-relation graph: node features, labels, and one
/// undirected edge set per relation.
#[derive(Debug, Clone)]
pub struct MultiRelationGraph {
    features: Tensor,
    labels: Vec<Label>,
    relations: Vec<Arc<Csr>>,
}

impl MultiRelationGraph {
    pub fn new(features: Tensor, labels: Vec<Label>, relations: Vec<Arc<Csr>>) -> Self {
        let n = features.rows();
        assert_eq!(labels.len(), n, "label count must match feature rows");
        for rel in &relations {
            assert_eq!(rel.n_nodes(), n, "relation node count mismatch");
        }
        MultiRelationGraph {
            features,
            labels,
            relations,
        }
    }

    /// Convenience constructor from raw edge lists.
    pub fn from_edge_lists(
        features: Tensor,
        labels: Vec<Label>,
        edge_lists: &[Vec<(usize, usize)>],
    ) -> Self {
        let n = features.rows();
        let relations = edge_lists
            .iter()
            .map(|edges| Arc::new(Csr::from_edges(n, edges)))
            .collect();
        Self::new(features, labels, relations)
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn relation(&self, r: usize) -> Result<&Arc<Csr>, GraphError> {
        self.relations
            .get(r)
            .ok_or(GraphError::RelationOutOfRange(r, self.relations.len()))
    }

    pub fn relations(&self) -> &[Arc<Csr>] {
        &self.relations
    }

    /// Indices of labeled nodes (label != -1).
    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&v| self.labels[v] >= 0)
            .collect()
    }

    /// Union of all relation edge sets as a single-relation graph sharing
    /// features and labels.
    pub fn merge_relations(&self) -> MultiRelationGraph {
        let merged = Arc::new(merged_csr(&self.relations, self.n_nodes()));
        MultiRelationGraph {
            features: self.features.clone(),
            labels: self.labels.clone(),
            relations: vec![merged],
        }
    }

    /// Merged adjacency without cloning features/labels.
    pub fn merged_adjacency(&self) -> Arc<Csr> {
        if self.relations.len() == 1 {
            Arc::clone(&self.relations[0])
        } else {
            Arc::new(merged_csr(&self.relations, self.n_nodes()))
        }
    }
}

fn merged_csr(relations: &[Arc<Csr>], n_nodes: usize) -> Csr {
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for rel in relations {
        for u in 0..n_nodes {
            lists[u].extend_from_slice(rel.neighbors(u));
        }
    }
    let mut offsets = Vec::with_capacity(n_nodes + 1);
    offsets.push(0);
    let mut neighbors = Vec::new();
    for list in &mut lists {
        list.sort_unstable();
        list.dedup();
        neighbors.extend_from_slice(list);
        offsets.push(neighbors.len());
    }
    Csr { offsets, neighbors }
}

/// Which adjacency a structural statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationSelector {
    Relation(usize),
    Merged,
}

/// Per-node homophily/heterophily ratios over labeled neighbors.
///
/// `ratio[v]` is `None` when the node is unlabeled, isolated, or has no
/// labeled neighbor; otherwise it holds `(hetero, homo)` with
/// `hetero + homo == 1` by construction.
#[derive(Debug, Clone)]
pub struct HomophilyProfile {
    pub degree: Vec<usize>,
    pub hetero: Vec<Option<f64>>,
}

impl HomophilyProfile {
    pub fn homo(&self, v: usize) -> Option<f64> {
        self.hetero[v].map(|h| 1.0 - h)
    }

    /// Mean homophily over the given nodes, skipping undefined entries.
    /// Returns `None` when no node has a defined ratio.
    pub fn mean_homophily(&self, nodes: &[usize]) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &v in nodes {
            if let Some(h) = self.hetero[v] {
                sum += 1.0 - h;
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Fraction of labeled neighbors whose label differs from the center's,
/// per node. Unlabeled neighbors are excluded from both numerator and
/// denominator; unlabeled centers and nodes without labeled neighbors
/// get an undefined marker.
pub fn homophily_profile(
    g: &MultiRelationGraph,
    relation: RelationSelector,
    label_source: &[Label],
) -> Result<HomophilyProfile, GraphError> {
    if label_source.len() != g.n_nodes() {
        return Err(GraphError::LabelLength {
            expected: g.n_nodes(),
            got: label_source.len(),
        });
    }
    let adj: Arc<Csr> = match relation {
        RelationSelector::Relation(r) => Arc::clone(g.relation(r)?),
        RelationSelector::Merged => g.merged_adjacency(),
    };
    let n = g.n_nodes();
    let mut degree = Vec::with_capacity(n);
    let mut hetero = Vec::with_capacity(n);
    for v in 0..n {
        degree.push(adj.degree(v));
        let yv = label_source[v];
        if yv < 0 {
            hetero.push(None);
            continue;
        }
        let mut labeled = 0usize;
        let mut mismatched = 0usize;
        for &u in adj.neighbors(v) {
            let yu = label_source[u];
            if yu < 0 {
                continue;
            }
            labeled += 1;
            if yu != yv {
                mismatched += 1;
            }
        }
        if labeled == 0 {
            hetero.push(None);
        } else {
            hetero.push(Some(mismatched as f64 / labeled as f64));
        }
    }
    Ok(HomophilyProfile { degree, hetero })
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n_nodes: usize,
    n_relations: usize,
}

/// Load a dataset directory: `features.csv`, `labels.csv`,
/// `edges_<r>.csv` for each relation, cross-checked against `meta.json`.
pub fn load_graph(dir: &Path) -> Result<MultiRelationGraph, GraphError> {
    let meta_path = dir.join("meta.json");
    let meta_text = read_file(&meta_path)?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| GraphError::MetaMismatch(format!("{}: {e}", meta_path.display())))?;

    let features = load_features(&dir.join("features.csv"))?;
    if features.rows() != meta.n_nodes {
        return Err(GraphError::MetaMismatch(format!(
            "features.csv has {} rows, meta.json declares {}",
            features.rows(),
            meta.n_nodes
        )));
    }
    let labels = load_labels(&dir.join("labels.csv"))?;
    if labels.len() != meta.n_nodes {
        return Err(GraphError::MetaMismatch(format!(
            "labels.csv has {} rows, meta.json declares {}",
            labels.len(),
            meta.n_nodes
        )));
    }
    let mut relations = Vec::with_capacity(meta.n_relations);
    for r in 0..meta.n_relations {
        let path = dir.join(format!("edges_{r}.csv"));
        let edges = load_edges(&path, meta.n_nodes)?;
        relations.push(Arc::new(Csr::from_edges(meta.n_nodes, &edges)));
    }
    Ok(MultiRelationGraph::new(features, labels, relations))
}

/// Write a graph as a dataset directory in the same format `load_graph`
/// reads. Feature values are printed with shortest round-trip formatting,
/// so load(save(g)) reproduces them bit for bit.
pub fn save_graph(g: &MultiRelationGraph, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(|e| GraphError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let meta = Meta {
        n_nodes: g.n_nodes(),
        n_relations: g.n_relations(),
    };
    write_file(
        &dir.join("meta.json"),
        &serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;

    let mut feat = String::new();
    for v in 0..g.n_nodes() {
        let row = g.features().row(v);
        for (j, value) in row.iter().enumerate() {
            if j > 0 {
                feat.push(',');
            }
            let _ = write!(feat, "{value}");
        }
        feat.push('\n');
    }
    write_file(&dir.join("features.csv"), &feat)?;

    let mut lab = String::new();
    for &y in g.labels() {
        let _ = writeln!(lab, "{y}");
    }
    write_file(&dir.join("labels.csv"), &lab)?;

    for (r, rel) in g.relations().iter().enumerate() {
        let mut text = String::new();
        for (u, v) in rel.edge_list() {
            let _ = writeln!(text, "{u},{v}");
        }
        write_file(&dir.join(format!("edges_{r}.csv")), &text)?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<String, GraphError> {
    if !path.exists() {
        return Err(GraphError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), GraphError> {
    fs::write(path, contents).map_err(|e| GraphError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_features(path: &Path) -> Result<Tensor, GraphError> {
    let text = read_file(path)?;
    let mut data = Vec::new();
    let mut n_rows = 0usize;
    let mut dim: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let value: f64 = field.trim().parse().map_err(|_| GraphError::BadValue {
                path: path.to_path_buf(),
                line: idx + 1,
                value: field.trim().to_string(),
            })?;
            data.push(value);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(d) if d != count => {
                return Err(GraphError::RaggedFeatureRow {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    expected: d,
                    found: count,
                })
            }
            _ => {}
        }
        n_rows += 1;
    }
    Ok(Tensor::from_vec(n_rows, dim.unwrap_or(0), data))
}

fn load_labels(path: &Path) -> Result<Vec<Label>, GraphError> {
    let text = read_file(path)?;
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: i64 = line.parse().map_err(|_| GraphError::BadValue {
            path: path.to_path_buf(),
            line: idx + 1,
            value: line.to_string(),
        })?;
        if !(-1..=1).contains(&value) {
            return Err(GraphError::BadLabel {
                path: path.to_path_buf(),
                line: idx + 1,
                value,
            });
        }
        labels.push(value as Label);
    }
    Ok(labels)
}

fn load_edges(path: &Path, n_nodes: usize) -> Result<Vec<(usize, usize)>, GraphError> {
    let text = read_file(path)?;
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |field: Option<&str>| -> Result<usize, GraphError> {
            let field = field.unwrap_or("").trim();
            field.parse().map_err(|_| GraphError::BadValue {
                path: path.to_path_buf(),
                line: idx + 1,
                value: field.to_string(),
            })
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        for node in [u, v] {
            if node >= n_nodes {
                return Err(GraphError::EdgeOutOfRange {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    node,
                    n_nodes,
                });
            }
        }
        edges.push((u, v));
    }
    Ok(edges)
}

//! Graph and dataset representation, TUDataset flat-file ingestion, fold
//! management, and synthetic desk-scale corpora.

use crate::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency entry ({r},{c}) = {value} is not binary")]
    NotBinary { r: usize, c: usize, value: f64 },
    #[error("adjacency is not symmetric at ({r},{c})")]
    NotSymmetric { r: usize, c: usize },
    #[error("adjacency has a self-loop at node {node}")]
    SelfLoop { node: usize },
    #[error("feature matrix has {feature_rows} rows for {nodes} nodes")]
    FeatureRowMismatch { feature_rows: usize, nodes: usize },
    #[error("feature matrix contains non-finite values")]
    NonFiniteFeatures,
    #[error("missing required file: {0}")]
    MissingFile(String),
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("graph {graph} label {label} out of range for {classes} classes")]
    LabelOutOfRange { graph: usize, label: usize, classes: usize },
    #[error("feature dimension mismatch: graph {graph} has {got}, dataset has {expected}")]
    FeatureDimMismatch { graph: usize, got: usize, expected: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic-dataset parameters: {0}")]
    InvalidSynthSpec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Undirected graph: symmetric binary adjacency with zero diagonal, a
/// dense node-feature matrix, and a class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    adjacency: Matrix,
    features: Matrix,
    label: usize,
    id: usize,
}

impl Graph {
    pub fn new(adjacency: Matrix, features: Matrix, label: usize, id: usize) -> Result<Self, GraphError> {
        let (rows, cols) = adjacency.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        for r in 0..rows {
            for c in 0..cols {
                let v = adjacency.get(r, c);
                if v != 0.0 && v != 1.0 {
                    return Err(GraphError::NotBinary { r, c, value: v });
                }
                if v != adjacency.get(c, r) {
                    return Err(GraphError::NotSymmetric { r, c });
                }
            }
            if adjacency.get(r, r) != 0.0 {
                return Err(GraphError::SelfLoop { node: r });
            }
        }
        if features.rows() != rows {
            return Err(GraphError::FeatureRowMismatch { feature_rows: features.rows(), nodes: rows });
        }
        if !features.all_finite() {
            return Err(GraphError::NonFiniteFeatures);
        }
        Ok(Graph { adjacency, features, label, id })
    }

    pub fn n(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row(node).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n()).map(|u| self.degree(u)).max().unwrap_or(0)
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        let total: usize = (0..self.n()).map(|u| self.degree(u)).sum();
        total / 2
    }

    /// Undirected edges as (u, v) with u < v.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.n() {
            for v in (u + 1)..self.n() {
                if self.adjacency.get(u, v) != 0.0 {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Same graph with a different feature matrix.
    pub fn with_features(&self, features: Matrix) -> Result<Graph, GraphError> {
        Graph::new(self.adjacency.clone(), features, self.label, self.id)
    }

    /// Same graph with a different adjacency matrix.
    pub fn with_adjacency(&self, adjacency: Matrix) -> Result<Graph, GraphError> {
        Graph::new(adjacency, self.features.clone(), self.label, self.id)
    }

    /// Relabel nodes: node `u` of the result is node `perm[u]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.n();
        assert_eq!(perm.len(), n, "permutation length");
        let mut adj = Matrix::zeros(n, n);
        let mut feats = Matrix::zeros(n, self.feature_dim());
        for u in 0..n {
            feats.row_mut(u).copy_from_slice(self.features.row(perm[u]));
            for v in 0..n {
                adj.set(u, v, self.adjacency.get(perm[u], perm[v]));
            }
        }
        Graph { adjacency: adj, features: feats, label: self.label, id: self.id }
    }
}

/// Symmetric GCN propagation operator: entries
/// `1 / sqrt((1 + deg u)(1 + deg v))` over closed neighborhoods.
pub fn normalized_adjacency(g: &Graph) -> Matrix {
    let n = g.n();
    let inv_sqrt: Vec<f64> = (0..n).map(|u| 1.0 / ((1.0 + g.degree(u) as f64).sqrt())).collect();
    let mut out = Matrix::zeros(n, n);
    for u in 0..n {
        for v in 0..n {
            let connected = u == v || g.adjacency().get(u, v) != 0.0;
            if connected {
                out.set(u, v, inv_sqrt[u] * inv_sqrt[v]);
            }
        }
    }
    out
}

/// Degree-normalization coefficients for every node pair, including
/// non-edges: `1 / sqrt((1 + deg u)(1 + deg v))`. The propagation
/// operator is this mask times `A + I`, which is the form the
/// structure-gradient attack differentiates.
pub fn normalization_mask(g: &Graph) -> Matrix {
    let n = g.n();
    let inv_sqrt: Vec<f64> = (0..n).map(|u| 1.0 / ((1.0 + g.degree(u) as f64).sqrt())).collect();
    let mut out = Matrix::zeros(n, n);
    for u in 0..n {
        for v in 0..n {
            out.set(u, v, inv_sqrt[u] * inv_sqrt[v]);
        }
    }
    out
}

/// An ordered collection of graphs sharing a feature dimension and a
/// contiguous label space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self, GraphError> {
        if graphs.is_empty() {
            return Err(GraphError::EmptyDataset);
        }
        let feature_dim = graphs[0].feature_dim();
        let num_classes = graphs.iter().map(|g| g.label()).max().unwrap() + 1;
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(GraphError::FeatureDimMismatch { graph: i, got: g.feature_dim(), expected: feature_dim });
            }
            if g.label() >= num_classes {
                return Err(GraphError::LabelOutOfRange { graph: i, label: g.label(), classes: num_classes });
            }
        }
        Ok(Dataset { name: name.into(), graphs, num_classes, feature_dim })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Largest feature-matrix operator norm across the dataset; the
    /// default feature-space bound for the GIN risk bound.
    pub fn max_feature_operator_norm(&self) -> f64 {
        self.graphs
            .iter()
            .map(|g| crate::pooling::svd_oracle(g.features()).map(|s| s.sigma1).unwrap_or(0.0))
            .fold(0.0, f64::max)
    }
}

/// Per-graph fold assignment for cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub folds: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Class-stratified, seed-deterministic fold assignment.
pub fn make_splits(ds: &Dataset, folds: usize, seed: u64) -> Result<SplitSpec, GraphError> {
    if folds < 2 {
        return Err(GraphError::InvalidSplit(format!("folds must be at least 2, got {folds}")));
    }
    if folds > ds.len() {
        return Err(GraphError::InvalidSplit(format!("{folds} folds for {} graphs", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, g) in ds.graphs.iter().enumerate() {
        by_class[g.label()].push(i);
    }
    let mut assignment = vec![0usize; ds.len()];
    let mut next_fold = 0usize;
    for class_indices in &mut by_class {
        class_indices.shuffle(&mut rng);
        // Dealing each class round-robin keeps per-fold class counts
        // within one of each other.
        for &idx in class_indices.iter() {
            assignment[idx] = next_fold;
            next_fold = (next_fold + 1) % folds;
        }
    }
    Ok(SplitSpec { folds, assignment, seed })
}

#[derive(Deserialize)]
struct FoldFile {
    folds: Vec<Vec<usize>>,
}

/// Load published folds from a JSON document of per-fold test indices:
/// `{"folds": [[...], [...], ...]}`. Every graph index must appear in
/// exactly one fold.
pub fn load_splits(path: impl AsRef<Path>, n_graphs: usize) -> Result<SplitSpec, GraphError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
    parse_splits(&text, n_graphs)
}

pub fn parse_splits(text: &str, n_graphs: usize) -> Result<SplitSpec, GraphError> {
    let file: FoldFile =
        serde_json::from_str(text).map_err(|e| GraphError::InvalidSplit(format!("fold file: {e}")))?;
    if file.folds.len() < 2 {
        return Err(GraphError::InvalidSplit("fold file needs at least 2 folds".into()));
    }
    let mut assignment = vec![usize::MAX; n_graphs];
    for (fold, indices) in file.folds.iter().enumerate() {
        for &idx in indices {
            if idx >= n_graphs {
                return Err(GraphError::InvalidSplit(format!("index {idx} out of range for {n_graphs} graphs")));
            }
            if assignment[idx] != usize::MAX {
                return Err(GraphError::InvalidSplit(format!("index {idx} assigned to two folds")));
            }
            assignment[idx] = fold;
        }
    }
    if let Some(missing) = assignment.iter().position(|&f| f == usize::MAX) {
        return Err(GraphError::InvalidSplit(format!("index {missing} not covered by any fold")));
    }
    Ok(SplitSpec { folds: file.folds.len(), assignment, seed: 0 })
}

pub fn splits_to_json(split: &SplitSpec) -> String {
    let folds: Vec<Vec<usize>> = (0..split.folds).map(|f| split.test_indices(f)).collect();
    serde_json::json!({ "folds": folds }).to_string()
}

// ---- TUDataset ingestion ------------------------------------------------

/// Load a TUDataset-format directory: `NAME_A.txt` (1-indexed edge
/// list), `NAME_graph_indicator.txt`, `NAME_graph_labels.txt`, and
/// optionally `NAME_node_labels.txt` (one-hot encoded) or
/// `NAME_node_attributes.txt` (used verbatim). When both node files
/// exist the labels win; with neither, features are a single all-ones
/// column. Edge lists are symmetrized and self-loops dropped.
pub fn load_tudataset(directory: impl AsRef<Path>, name: &str) -> Result<Dataset, GraphError> {
    let dir = directory.as_ref();
    let read = |suffix: &str, required: bool| -> Result<Option<(String, String)>, GraphError> {
        let file_name = format!("{name}_{suffix}.txt");
        let path = dir.join(&file_name);
        if !path.exists() {
            if required {
                return Err(GraphError::MissingFile(path.display().to_string()));
            }
            return Ok(None);
        }
        let text = fs::read_to_string(&path)
            .map_err(|source| GraphError::Io { path: path.display().to_string(), source })?;
        Ok(Some((file_name, text)))
    };

    let (ind_name, indicator) = read("graph_indicator", true)?.expect("required");
    let (edge_name, edges) = read("A", true)?.expect("required");
    let (label_name, labels) = read("graph_labels", true)?.expect("required");
    let node_labels = read("node_labels", false)?;
    let node_attributes = read("node_attributes", false)?;

    // node -> graph (both 0-based after parsing).
    let mut node_graph: Vec<usize> = Vec::new();
    for (lineno, line) in indicator.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let g: usize = line.parse().map_err(|_| GraphError::Parse {
            file: ind_name.clone(),
            line: lineno + 1,
            message: format!("bad graph index {line:?}"),
        })?;
        if g == 0 {
            return Err(GraphError::Parse {
                file: ind_name.clone(),
                line: lineno + 1,
                message: "graph indices are 1-based".into(),
            });
        }
        node_graph.push(g - 1);
    }
    if node_graph.is_empty() {
        return Err(GraphError::EmptyDataset);
    }
    let n_graphs = node_graph.iter().max().unwrap() + 1;
    let total_nodes = node_graph.len();

    // Per-graph node counts and local index of each global node.
    let mut graph_sizes = vec![0usize; n_graphs];
    let mut local_index = vec![0usize; total_nodes];
    for (node, &g) in node_graph.iter().enumerate() {
        local_index[node] = graph_sizes[g];
        graph_sizes[g] += 1;
    }

    let mut adjacencies: Vec<Matrix> =
        graph_sizes.iter().map(|&n| Matrix::zeros(n.max(1), n.max(1))).collect();
    for (lineno, line) in edges.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let parse_endpoint = |s: Option<&str>| -> Result<usize, GraphError> {
            let s = s.ok_or_else(|| GraphError::Parse {
                file: edge_name.clone(),
                line: lineno + 1,
                message: "expected 'u, v'".into(),
            })?;
            let v: usize = s.parse().map_err(|_| GraphError::Parse {
                file: edge_name.clone(),
                line: lineno + 1,
                message: format!("bad node index {s:?}"),
            })?;
            if v == 0 || v > total_nodes {
                return Err(GraphError::Parse {
                    file: edge_name.clone(),
                    line: lineno + 1,
                    message: format!("node index {v} out of range 1..={total_nodes}"),
                });
            }
            Ok(v - 1)
        };
        let u = parse_endpoint(parts.next())?;
        let v = parse_endpoint(parts.next())?;
        if node_graph[u] != node_graph[v] {
            return Err(GraphError::Parse {
                file: edge_name.clone(),
                line: lineno + 1,
                message: format!("edge crosses graphs {} and {}", node_graph[u] + 1, node_graph[v] + 1),
            });
        }
        if u == v {
            continue; // self-loops are dropped; the propagation operator re-adds them
        }
        let g = node_graph[u];
        let (lu, lv) = (local_index[u], local_index[v]);
        adjacencies[g].set(lu, lv, 1.0);
        adjacencies[g].set(lv, lu, 1.0);
    }

    // Graph labels, remapped to contiguous 0-based indices.
    let mut raw_labels: Vec<i64> = Vec::with_capacity(n_graphs);
    for (lineno, line) in labels.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let l: i64 = line.parse().map_err(|_| GraphError::Parse {
            file: label_name.clone(),
            line: lineno + 1,
            message: format!("bad label {line:?}"),
        })?;
        raw_labels.push(l);
    }
    if raw_labels.len() != n_graphs {
        return Err(GraphError::Parse {
            file: label_name.clone(),
            line: raw_labels.len() + 1,
            message: format!("{} labels for {} graphs", raw_labels.len(), n_graphs),
        });
    }
    let mut label_map: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in &raw_labels {
        let next = label_map.len();
        label_map.entry(l).or_insert(next);
    }

    // Node features: labels one-hot in ascending label order, or
    // attributes verbatim, or a single all-ones column.
    let features: Vec<Vec<f64>> = if let Some((nl_name, text)) = node_labels {
        let mut raw: Vec<i64> = Vec::with_capacity(total_nodes);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let l: i64 = line.parse().map_err(|_| GraphError::Parse {
                file: nl_name.clone(),
                line: lineno + 1,
                message: format!("bad node label {line:?}"),
            })?;
            raw.push(l);
        }
        if raw.len() != total_nodes {
            return Err(GraphError::Parse {
                file: nl_name,
                line: raw.len() + 1,
                message: format!("{} node labels for {} nodes", raw.len(), total_nodes),
            });
        }
        let mut values: Vec<i64> = raw.clone();
        values.sort_unstable();
        values.dedup();
        let index: BTreeMap<i64, usize> = values.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        raw.iter()
            .map(|l| {
                let mut row = vec![0.0; values.len()];
                row[index[l]] = 1.0;
                row
            })
            .collect()
    } else if let Some((na_name, text)) = node_attributes {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total_nodes);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let row = row.map_err(|_| GraphError::Parse {
                file: na_name.clone(),
                line: lineno + 1,
                message: format!("bad attribute row {line:?}"),
            })?;
            rows.push(row);
        }
        if rows.len() != total_nodes {
            return Err(GraphError::Parse {
                file: na_name,
                line: rows.len() + 1,
                message: format!("{} attribute rows for {} nodes", rows.len(), total_nodes),
            });
        }
        rows
    } else {
        vec![vec![1.0]; total_nodes]
    };
    let feature_dim = features[0].len();

    let mut graphs = Vec::with_capacity(n_graphs);
    for g in 0..n_graphs {
        let n = graph_sizes[g].max(1);
        let mut feats = Matrix::zeros(n, feature_dim);
        for (node, &owner) in node_graph.iter().enumerate() {
            if owner == g {
                feats.row_mut(local_index[node]).copy_from_slice(&features[node]);
            }
        }
        if graph_sizes[g] == 0 {
            // A graph id with no nodes still gets one isolated node so
            // downstream invariants (n >= 1) hold.
            feats = Matrix::from_vec(1, feature_dim, vec![0.0; feature_dim]);
        }
        let graph = Graph::new(adjacencies[g].clone(), feats, label_map[&raw_labels[g]], g)?;
        graphs.push(graph);
    }
    Dataset::new(name, graphs)
}

// ---- synthetic corpora ----------------------------------------------------

/// Families of synthetic two-class datasets used for desk-scale checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Erdos-Renyi graphs at edge densities 0.2 (class 0) vs 0.6 (class 1).
    DensityPair,
    /// Cycle graphs (class 0) vs path graphs (class 1), node-relabeled.
    CycleVsPath,
}

/// Deterministic synthetic dataset. Features are a constant column plus
/// the normalized degree, so feature matrices are never all-zero.
pub fn synth_dataset(kind: SynthKind, n_graphs: usize, n_nodes: usize, seed: u64) -> Result<Dataset, GraphError> {
    if n_graphs % 2 != 0 || n_graphs == 0 {
        return Err(GraphError::InvalidSynthSpec(format!("n_graphs must be even and positive, got {n_graphs}")));
    }
    if n_nodes < 4 {
        return Err(GraphError::InvalidSynthSpec(format!("n_nodes must be at least 4, got {n_nodes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_graphs);
    for id in 0..n_graphs {
        let label = id % 2;
        let adjacency = match kind {
            SynthKind::DensityPair => {
                let p = if label == 0 { 0.2 } else { 0.6 };
                let mut adj = Matrix::zeros(n_nodes, n_nodes);
                for u in 0..n_nodes {
                    for v in (u + 1)..n_nodes {
                        if rng.gen::<f64>() < p {
                            adj.set(u, v, 1.0);
                            adj.set(v, u, 1.0);
                        }
                    }
                }
                adj
            }
            SynthKind::CycleVsPath => {
                let mut perm: Vec<usize> = (0..n_nodes).collect();
                perm.shuffle(&mut rng);
                let mut adj = Matrix::zeros(n_nodes, n_nodes);
                for i in 0..n_nodes - 1 {
                    adj.set(perm[i], perm[i + 1], 1.0);
                    adj.set(perm[i + 1], perm[i], 1.0);
                }
                if label == 0 {
                    adj.set(perm[n_nodes - 1], perm[0], 1.0);
                    adj.set(perm[0], perm[n_nodes - 1], 1.0);
                }
                adj
            }
        };
        let mut features = Matrix::zeros(n_nodes, 2);
        for u in 0..n_nodes {
            let deg = adjacency.row(u).iter().filter(|&&v| v != 0.0).count();
            features.set(u, 0, 1.0);
            features.set(u, 1, deg as f64 / (n_nodes - 1) as f64);
        }
        graphs.push(Graph::new(adjacency, features, label, id)?);
    }
    let name = match kind {
        SynthKind::DensityPair => format!("synthetic-density-pair-{n_nodes}"),
        SynthKind::CycleVsPath => format!("synthetic-cycle-vs-path-{n_nodes}"),
    };
    Dataset::new(name, graphs)
}

//! Shared fixtures and independent oracles for the integration suites.

use singular_pool_core::graph::{load_tudataset, Dataset, Graph};
use singular_pool_core::matrix::Matrix;
use singular_pool_core::sampling::{derived_rng, normal_matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// Erdos-Renyi graph with standard-normal features.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, feature_dim: usize) -> Graph {
    let mut adj = Matrix::zeros(n, n);
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p {
                adj.set(u, v, 1.0);
                adj.set(v, u, 1.0);
            }
        }
    }
    let features = normal_matrix(rng, n, feature_dim);
    Graph::new(adj, features, 0, 0).expect("random graph is valid")
}

/// Walk-weight oracle: brute-force enumeration of all closed-neighborhood
/// walks with `layers - 1` edges, each weighted by the product of
/// `1 / sqrt((1 + deg a)(1 + deg b))` over its edges. Independent of the
/// matrix-power implementation it cross-checks.
pub fn enumerate_walk_weights(g: &Graph, layers: usize) -> Vec<f64> {
    assert!(layers >= 1);
    let n = g.n();
    let deg: Vec<f64> = (0..n).map(|u| g.degree(u) as f64).collect();
    let closed: Vec<Vec<usize>> = (0..n)
        .map(|u| {
            let mut nbrs: Vec<usize> = (0..n)
                .filter(|&v| v != u && g.adjacency().get(u, v) != 0.0)
                .collect();
            nbrs.push(u);
            nbrs
        })
        .collect();

    fn walk_sum(node: usize, remaining: usize, deg: &[f64], closed: &[Vec<usize>]) -> f64 {
        if remaining == 0 {
            return 1.0;
        }
        let mut total = 0.0;
        for &next in &closed[node] {
            let edge = 1.0 / ((1.0 + deg[node]) * (1.0 + deg[next])).sqrt();
            total += edge * walk_sum(next, remaining - 1, deg, closed);
        }
        total
    }

    (0..n).map(|u| walk_sum(u, layers - 1, &deg, &closed)).collect()
}

/// Root directory holding TUDataset folders, if one is available:
/// `SP_DATA_DIR` or `<workspace>/data`.
pub fn data_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("SP_DATA_DIR") {
        let p = PathBuf::from(dir);
        if p.is_dir() {
            return Some(p);
        }
    }
    let fallback = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    fallback.is_dir().then_some(fallback)
}

/// Load a TUDataset by name or panic with instructions for supplying it.
pub fn require_dataset(name: &str) -> Dataset {
    let root = data_dir().unwrap_or_else(|| {
        panic!(
            "no dataset directory found; place the {name} TUDataset files under \
             <workspace>/data/{name}/ or point SP_DATA_DIR at their parent"
        )
    });
    load_tudataset(root.join(name), name)
        .unwrap_or_else(|e| panic!("failed to load {name} from {}: {e}", root.display()))
}

/// Deterministic generator for a test, named so seeds are searchable.
pub fn rng(seed: u64) -> ChaCha8Rng {
    derived_rng(seed, 0)
}

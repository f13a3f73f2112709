use crate::error::{Error, Result};
use crate::graphio::{Adjacency, Graph};
use crate::numcore::{Rng, Tensor};

/// G(n, p) graph: every unordered pair is an edge independently with
/// probability `density`. Features are the constant `1` column, label 0.
pub fn erdos_renyi(n: usize, density: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::Argument(format!("Erdős–Rényi graph needs n ≥ 2, got {n}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Argument(format!("density must be in (0, 1], got {density}")));
    }
    let mut rng = Rng::derive(seed, &[n as u64, density.to_bits()]);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.next_f64() < density {
                edges.push((u, v));
            }
        }
    }
    Graph::new(Adjacency::new(n, edges)?, Tensor::full(n, 1, 1.0), 0)
}

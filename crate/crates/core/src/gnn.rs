//! Graph convolution and graph-level readout.

use std::rc::Rc;

use crate::error::Result;
use crate::graphio::Adjacency;
use crate::numcore::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// `ReLU(D̃^{-1/2} Ã D̃^{-1/2} X W + b)` with `Ã = A + I`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::fan_in_uniform(in_dim, out_dim, in_dim, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        GcnLayer {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        adjacency: &Adjacency,
    ) -> Result<Var<'t>> {
        let propagation = Rc::new(adjacency.gcn_normalized());
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        // (X W) first: cheaper than (Â X) W whenever out_dim ≤ in_dim.
        Ok(x.matmul(&w)?.propagate(&propagation)?.add_row(&b)?.relu())
    }
}

/// Column-wise mean concatenated with column-wise max: `n×d → 1×2d`.
pub fn readout<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let mean = x.mean_rows()?;
    let max = x.max_rows()?;
    Var::concat_cols(&[mean, max])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(store: &mut ParamStore, d: usize) -> GcnLayer {
        let mut rng = Rng::new(0);
        let layer = GcnLayer::new(store, "gcn", d, d, &mut rng);
        store.get_mut(layer.w).data_mut().copy_from_slice(Tensor::eye(d).data());
        layer
    }

    #[test]
    fn isolated_node_is_relu_of_input() {
        let mut store = ParamStore::new();
        let layer = identity_layer(&mut store, 3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap());
        let y = layer.forward(&tape, &store, x, &Adjacency::empty(1)).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0, 0.5]);
    }

    #[test]
    fn connected_twins_match() {
        let mut store = ParamStore::new();
        let layer = identity_layer(&mut store, 2);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[0.3, 0.7], [0.3, 0.7]]).unwrap());
        let adj = Adjacency::new(2, [(0, 1)]).unwrap();
        let y = layer.forward(&tape, &store, x, &adj).unwrap().to_tensor();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn readout_examples() {
        let tape = Tape::new();
        let single = tape.constant(Tensor::from_rows(&[[1.5, -1.0]]).unwrap());
        assert_eq!(readout(&single).unwrap().value().data(), &[1.5, -1.0, 1.5, -1.0]);
        let two = tape.constant(Tensor::from_rows(&[[0.0, 2.0], [2.0, 0.0]]).unwrap());
        assert_eq!(readout(&two).unwrap().value().data(), &[1.0, 1.0, 2.0, 2.0]);
        let swapped = tape.constant(Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap());
        assert_eq!(
            readout(&swapped).unwrap().to_tensor(),
            readout(&two).unwrap().to_tensor()
        );
    }

    #[test]
    fn readout_of_empty_fails() {
        let tape = Tape::new();
        let empty = tape.constant(Tensor::zeros(0, 3));
        assert!(readout(&empty).is_err());
    }
}

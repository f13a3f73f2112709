//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward passes, so it stays independent
//! of the backward rules it is used to verify.

use crate::error::Result;
use crate::numcore::{ParamId, ParamStore, Tape, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    /// Largest per-tensor relative error.
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    /// Relative error of the concatenation of every tensor's gradient.
    pub fn global_rel_error(&self) -> f64 {
        let analytic: Vec<f64> = self.tensors.iter().flat_map(|t| t.analytic.iter().copied()).collect();
        let numeric: Vec<f64> = self.tensors.iter().flat_map(|t| t.numeric.iter().copied()).collect();
        relative_error(&analytic, &numeric)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, floor)`; the floor keeps all-zero gradients
/// from dividing by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(1e-8)
}

/// Evaluates the scalar built by `f` on a fresh tape.
pub fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    Ok(out.scalar())
}

/// Central differences for every scalar of parameter `id`.
pub fn numeric_gradient<F>(
    store: &mut ParamStore,
    f: &F,
    id: ParamId,
    step: f64,
) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let len = store.get(id).len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + step;
        let plus = evaluate(store, f)?;
        store.get_mut(id).data_mut()[i] = orig - step;
        let minus = evaluate(store, f)?;
        store.get_mut(id).data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares the tape's gradients of `f` with central differences for every
/// tensor in `store`.
pub fn check_gradients<F>(store: &mut ParamStore, f: F, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let out = f(&tape, store)?;
        let grads = tape.backward(out)?;
        let mut buffers: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        for (pid, g) in grads.param_grads() {
            buffers[pid.index()]
                .iter_mut()
                .zip(g)
                .for_each(|(b, x)| *b += x);
        }
        buffers
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for (id, analytic) in ids.into_iter().zip(analytic) {
        let numeric = numeric_gradient(store, &f, id, step)?;
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            rel_error: relative_error(&analytic, &numeric),
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { tensors })
}

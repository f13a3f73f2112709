//! Gradient checks shared by the `gradcheck` test target and the acceptance run.

use std::rc::Rc;

use gtpool_core::graphio::{erdos_renyi, Adjacency};
use gtpool_core::model::{GtPoolNet, ModelConfig};
use gtpool_core::numcore::gradcheck::{check_gradients, GradCheckReport, FD_STEP};
use gtpool_core::numcore::{ParamId, ParamStore, Rng, SparseMatrix, Tape, Tensor, Var};
use gtpool_core::sampler::SamplerMethod;
use gtpool_core::Result;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;
const TIGHT: f64 = 1e-6;

/// Entries with magnitude in [0.1, 1] and random sign, away from kinks.
fn away_from_zero(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.uniform(0.1, 1.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Weighted sum `Σ out ⊙ R` so that no gradient cancels by symmetry.
fn weighted<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let (r, c) = out.shape();
    let w = Tensor::uniform(r, c, 1.0, &mut Rng::derive(seed, &[0xBEEF]));
    Ok(out.hadamard(&out.tape().constant(w))?.sum())
}

fn assert_report(op: &str, seed: u64, report: &GradCheckReport, tol: f64) {
    let worst = report.worst().expect("at least one tensor");
    assert!(
        worst.rel_error < tol,
        "{op} seed {seed}: `{}` relative error {:.3e} ≥ {tol:e}\nanalytic {:?}\nnumeric  {:?}",
        worst.name,
        worst.rel_error,
        worst.analytic,
        worst.numeric
    );
}

/// Runs `build` for 20 seeds; `build` registers inputs and returns the closure's scalar.
fn check_op<S, F>(op: &str, tol: f64, setup: S, f: F)
where
    S: Fn(&mut ParamStore, &mut Rng) -> Vec<ParamId>,
    F: for<'t> Fn(&'t Tape, &ParamStore, &[ParamId], u64) -> Result<Var<'t>>,
{
    for seed in 0..SEEDS {
        let mut rng = Rng::derive(seed, &[op.len() as u64]);
        let mut store = ParamStore::new();
        let ids = setup(&mut store, &mut rng);
        let report = check_gradients(
            &mut store,
            |tape: &Tape, s: &ParamStore| {
                let out = f(tape, s, &ids, seed)?;
                weighted(out, seed)
            },
            FD_STEP,
        )
        .unwrap();
        assert_report(op, seed, &report, tol);
    }
}

fn two(store: &mut ParamStore, rng: &mut Rng, a: (usize, usize), b: (usize, usize)) -> Vec<ParamId> {
    vec![
        store.add("a", away_from_zero(a.0, a.1, rng)),
        store.add("b", away_from_zero(b.0, b.1, rng)),
    ]
}

fn one(store: &mut ParamStore, rng: &mut Rng, a: (usize, usize)) -> Vec<ParamId> {
    vec![store.add("a", away_from_zero(a.0, a.1, rng))]
}

pub fn elementwise_binary_ops() {
    let setup = |s: &mut ParamStore, r: &mut Rng| two(s, r, (3, 4), (3, 4));
    check_op("add", TOL, setup, |t, s, ids, _| t.param(s, ids[0]).add(&t.param(s, ids[1])));
    check_op("sub", TOL, setup, |t, s, ids, _| t.param(s, ids[0]).sub(&t.param(s, ids[1])));
    check_op("hadamard", TOL, setup, |t, s, ids, _| {
        t.param(s, ids[0]).hadamard(&t.param(s, ids[1]))
    });
}

pub fn add_row_and_scale() {
    check_op("add_row", TOL, |s, r| two(s, r, (4, 3), (1, 3)), |t, s, ids, _| {
        t.param(s, ids[0]).add_row(&t.param(s, ids[1]))
    });
    check_op("scale", TOL, |s, r| one(s, r, (3, 3)), |t, s, ids, _| {
        Ok(t.param(s, ids[0]).scale(-1.7))
    });
}

pub fn pointwise_nonlinearities() {
    let setup = |s: &mut ParamStore, r: &mut Rng| one(s, r, (4, 5));
    check_op("relu", TOL, setup, |t, s, ids, _| Ok(t.param(s, ids[0]).relu()));
    check_op("tanh", TOL, setup, |t, s, ids, _| Ok(t.param(s, ids[0]).tanh()));
    check_op("gelu", TOL, setup, |t, s, ids, _| Ok(t.param(s, ids[0]).gelu()));
}

pub fn matmul_and_transpose() {
    check_op("matmul", TIGHT, |s, r| two(s, r, (3, 5), (5, 2)), |t, s, ids, _| {
        t.param(s, ids[0]).matmul(&t.param(s, ids[1]))
    });
    check_op("matmul_nt", TIGHT, |s, r| two(s, r, (3, 5), (4, 5)), |t, s, ids, _| {
        t.param(s, ids[0]).matmul(&t.param(s, ids[1]).transpose())
    });
    check_op("transpose", TOL, |s, r| one(s, r, (2, 5)), |t, s, ids, _| {
        Ok(t.param(s, ids[0]).transpose())
    });
}

pub fn row_softmax() {
    check_op("row_softmax", TIGHT, |s, r| one(s, r, (4, 6)), |t, s, ids, _| {
        Ok(t.param(s, ids[0]).scale(3.0).row_softmax())
    });
}

pub fn row_reductions() {
    check_op("mean_rows", TOL, |s, r| one(s, r, (5, 3)), |t, s, ids, _| t.param(s, ids[0]).mean_rows());
    // Distinct magnitudes in [0.1, 1] make ties within one FD step practically impossible.
    check_op("max_rows", TOL, |s, r| one(s, r, (5, 3)), |t, s, ids, _| t.param(s, ids[0]).max_rows());
    check_op("sum", TOL, |s, r| one(s, r, (2, 3)), |t, s, ids, _| Ok(t.param(s, ids[0]).sum()));
}

pub fn structural_ops() {
    check_op("concat_cols", TOL, |s, r| two(s, r, (3, 2), (3, 4)), |t, s, ids, _| {
        Var::concat_cols(&[t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[0])])
    });
    check_op("gather_rows", TOL, |s, r| one(s, r, (5, 3)), |t, s, ids, _| {
        t.param(s, ids[0]).gather_rows(&[4, 0, 2, 0])
    });
    check_op("scale_rows", TOL, |s, r| two(s, r, (4, 3), (4, 1)), |t, s, ids, _| {
        t.param(s, ids[0]).scale_rows(&t.param(s, ids[1]))
    });
}

pub fn layer_norm() {
    check_op(
        "layer_norm",
        TOL,
        |s, r| {
            vec![
                s.add("x", away_from_zero(3, 6, r)),
                s.add("gain", away_from_zero(1, 6, r)),
                s.add("bias", away_from_zero(1, 6, r)),
            ]
        },
        |t, s, ids, _| t.param(s, ids[0]).layer_norm(&t.param(s, ids[1]), &t.param(s, ids[2])),
    );
}

pub fn dropout_with_fixed_mask() {
    check_op("dropout", TOL, |s, r| one(s, r, (4, 4)), |t, s, ids, seed| {
        // Same seed on every evaluation, so every evaluation draws the same mask.
        Ok(t.param(s, ids[0]).dropout(0.4, &mut Rng::new(seed), true))
    });
}

pub fn sparse_propagation() {
    check_op("propagate", TOL, |s, r| one(s, r, (5, 3)), |t, s, ids, seed| {
        let g = erdos_renyi(5, 0.5, seed).unwrap();
        let a = Rc::new(g.adjacency.gcn_normalized());
        t.param(s, ids[0]).propagate(&a)
    });
    check_op("propagate_rect", TOL, |s, r| one(s, r, (3, 2)), |t, s, ids, _| {
        let a = Rc::new(SparseMatrix::from_triplets(4, 3, &[(0, 0, 0.5), (1, 2, -1.0), (3, 1, 2.0), (3, 1, 1.0)]));
        t.param(s, ids[0]).propagate(&a)
    });
}

pub fn cross_entropy() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let id = store.add("logits", away_from_zero(4, 3, &mut rng));
        let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
        let report = check_gradients(
            &mut store,
            |t: &Tape, s: &ParamStore| t.param(s, id).scale(2.0).cross_entropy(&labels),
            FD_STEP,
        )
        .unwrap();
        assert_report("cross_entropy", seed, &report, TIGHT);
    }
}

fn pipeline_check(score_gating: bool) {
    for seed in 0..SEEDS {
        let cfg = ModelConfig {
            in_dim: 3,
            hidden: 8,
            heads: 2,
            layers: 2,
            num_classes: 3,
            mu: 0.5,
            lambda: 0.3,
            sampler: SamplerMethod::ALL[(seed % 3) as usize],
            dropout: 0.0,
            score_gating,
        };
        let net = GtPoolNet::new(cfg, seed).unwrap();
        let mut rng = Rng::derive(seed, &[7]);
        let n = 4 + rng.below(5);
        // A path plus sparse extra edges: dense graphs make GCN rows coincide.
        let extra = erdos_renyi(n, 0.2, seed).unwrap();
        let adj = Adjacency::new(n, (0..n - 1).map(|i| (i, i + 1)).chain(extra.edges().iter().copied())).unwrap();
        let x = Tensor::uniform(n, 3, 1.0, &mut rng);
        let label = rng.below(3);

        let frozen = {
            let tape = Tape::new();
            net.forward_with(&tape, &x, &adj, false, &mut Rng::new(0), None)
                .unwrap()
                .selections
        };
        let mut store = net.params().clone();
        let report = check_gradients(
            &mut store,
            |t: &Tape, s: &ParamStore| {
                let out = net.forward_using(s, t, &x, &adj, false, &mut Rng::new(0), Some(&frozen))?;
                out.logits.cross_entropy(&[label])
            },
            FD_STEP,
        )
        .unwrap();
        // Whole-vector error: some tensors legitimately get gradients near 1e-20
        // (e.g. queries on a block whose input rows coincide), where per-tensor
        // ratios only measure finite-difference roundoff.
        let err = report.global_rel_error();
        assert!(err < TOL, "pipeline seed {seed}: relative error {err:.3e}");
        // The check must see real signal, not a graph of zeros.
        let w_q = report.tensors.iter().find(|t| t.name == "block0.pool.h0.w_q").unwrap();
        let peak = w_q.analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(peak > 1e-8, "seed {seed}: W_Q receives no gradient (max {peak:.2e})");
    }
}

pub fn composed_pipeline_with_frozen_selection() {
    pipeline_check(false);
}

pub fn composed_pipeline_with_score_gating() {
    pipeline_check(true);
}

/// Every case, by name.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_binary_ops", elementwise_binary_ops),
    ("add_row_and_scale", add_row_and_scale),
    ("pointwise_nonlinearities", pointwise_nonlinearities),
    ("matmul_and_transpose", matmul_and_transpose),
    ("row_softmax", row_softmax),
    ("row_reductions", row_reductions),
    ("structural_ops", structural_ops),
    ("layer_norm", layer_norm),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("sparse_propagation", sparse_propagation),
    ("cross_entropy", cross_entropy),
    ("composed_pipeline_with_frozen_selection", composed_pipeline_with_frozen_selection),
    ("composed_pipeline_with_score_gating", composed_pipeline_with_score_gating),
];

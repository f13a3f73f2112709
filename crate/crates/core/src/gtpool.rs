//! Graph transformer pooling layer.
//!
//! For input features `X (n×d)` and adjacency `A`, each head `h` computes
//! `𝒜_h = softmax(Q_h K_hᵀ / √d_h)` and values `V_h`. Node significance is
//!
//! ```text
//! s_h = λ·tanh(𝒜_h V_h θ_g^h) + (1−λ)·tanh((𝒜_h ⊙ Ã) V_h θ_l^h)
//! S   = softmax(Σ_h s_h)            over nodes
//! ```
//!
//! `S` feeds the node sampler. The selected rows of each `𝒜_h` (the refined
//! attention) aggregate values from *all* original nodes:
//!
//! ```text
//! X̂  = Concat_h(𝒜_h[idx,:] V_h) W_O + X[idx,:]
//! X′ = FFN(LN(X̂)) + X̂              FFN = Linear → GeLU → Linear
//! A′ = A[idx, idx]
//! ```
//!
//! Selection indices are constants of the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::Adjacency;
use crate::numcore::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::sampler::{select, SampleSpec, ScoreDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtPoolConfig {
    pub dim: usize,
    pub heads: usize,
    /// Weight of the global score; `1 − λ` goes to the local score.
    pub lambda: f64,
    pub spec: SampleSpec,
    pub dropout: f64,
    /// Multiplies pooled rows by their (rescaled) significance scores so the
    /// scoring vectors receive gradient. Off by default.
    pub score_gating: bool,
}

impl GtPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("λ must be in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        SampleSpec::new(self.spec.mu, self.spec.method)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug)]
struct HeadParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    theta_g: ParamId,
    theta_l: ParamId,
}

#[derive(Clone, Debug)]
pub struct GtPoolLayer {
    pub config: GtPoolConfig,
    heads: Vec<HeadParams>,
    w_o: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Attention matrix `n×n` and value matrix `n×d_h` of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadAttention<'t> {
    pub attention: Var<'t>,
    pub values: Var<'t>,
}

/// Significance scores as an `n×1` variable plus their distribution view.
#[derive(Debug)]
pub struct NodeScores<'t> {
    pub s: Var<'t>,
    pub distribution: ScoreDistribution,
}

/// How the pooled node set is chosen.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Run the configured sampler on the computed scores.
    Sample,
    /// Use the given ascending indices (scores are still computed).
    Fixed(&'a [usize]),
}

#[derive(Debug)]
pub struct PoolResult<'t> {
    /// Ascending, unique indices of the kept nodes.
    pub idx: Vec<usize>,
    /// Induced subgraph on `idx`, relabelled `0..M`.
    pub adjacency: Adjacency,
    /// Pooled features, `M×d`.
    pub x: Var<'t>,
    /// Refined attention per head, `M×n`.
    pub attention: Vec<Var<'t>>,
    pub scores: ScoreDistribution,
}

impl GtPoolLayer {
    pub fn new(store: &mut ParamStore, name: &str, config: GtPoolConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let dh = config.head_dim();
        let heads = (0..config.heads)
            .map(|h| HeadParams {
                w_q: store.add(format!("{name}.h{h}.w_q"), Tensor::fan_in_uniform(d, dh, d, rng)),
                w_k: store.add(format!("{name}.h{h}.w_k"), Tensor::fan_in_uniform(d, dh, d, rng)),
                w_v: store.add(format!("{name}.h{h}.w_v"), Tensor::fan_in_uniform(d, dh, d, rng)),
                theta_g: store.add(
                    format!("{name}.h{h}.theta_g"),
                    Tensor::fan_in_uniform(dh, 1, dh, rng),
                ),
                theta_l: store.add(
                    format!("{name}.h{h}.theta_l"),
                    Tensor::fan_in_uniform(dh, 1, dh, rng),
                ),
            })
            .collect();
        let w_o = store.add(format!("{name}.w_o"), Tensor::fan_in_uniform(d, d, d, rng));
        let ffn_w1 = store.add(format!("{name}.ffn.w1"), Tensor::fan_in_uniform(d, 2 * d, d, rng));
        let ffn_b1 = store.add(format!("{name}.ffn.b1"), Tensor::zeros(1, 2 * d));
        let ffn_w2 = store.add(
            format!("{name}.ffn.w2"),
            Tensor::fan_in_uniform(2 * d, d, 2 * d, rng),
        );
        let ffn_b2 = store.add(format!("{name}.ffn.b2"), Tensor::zeros(1, d));
        let ln_gain = store.add(format!("{name}.ln.gain"), Tensor::full(1, d, 1.0));
        let ln_bias = store.add(format!("{name}.ln.bias"), Tensor::zeros(1, d));
        Ok(GtPoolLayer {
            config,
            heads,
            w_o,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln_gain,
            ln_bias,
        })
    }

    /// Trainable scalars: `3d² + 2d` for the heads, `d²` for `W_O`,
    /// `4d² + 3d` for the FFN and `2d` for layer norm.
    pub fn num_parameters(&self) -> usize {
        let d = self.config.dim;
        8 * d * d + 7 * d
    }

    /// Parameter handles of the two scoring vectors of head `h`.
    pub fn scoring_params(&self, h: usize) -> (ParamId, ParamId) {
        (self.heads[h].theta_g, self.heads[h].theta_l)
    }

    /// Query/key/value projections of head `h`.
    pub fn projection_params(&self, h: usize) -> (ParamId, ParamId, ParamId) {
        let p = &self.heads[h];
        (p.w_q, p.w_k, p.w_v)
    }

    pub fn attention_matrices<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
    ) -> Result<Vec<HeadAttention<'t>>> {
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        self.heads
            .iter()
            .map(|p| {
                let q = x.matmul(&tape.param(store, p.w_q))?;
                let k = x.matmul(&tape.param(store, p.w_k))?;
                let v = x.matmul(&tape.param(store, p.w_v))?;
                let attention = q.matmul(&k.transpose())?.scale(scale).row_softmax();
                Ok(HeadAttention { attention, values: v })
            })
            .collect()
    }

    pub fn score_nodes<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        adjacency: &Adjacency,
        heads: &[HeadAttention<'t>],
    ) -> Result<NodeScores<'t>> {
        let lambda = self.config.lambda;
        let mask = tape.constant(adjacency.dense(true));
        let mut total: Option<Var<'t>> = None;
        for (p, h) in self.heads.iter().zip(heads) {
            let theta_g = tape.param(store, p.theta_g);
            let theta_l = tape.param(store, p.theta_l);
            let global = h.attention.matmul(&h.values)?.matmul(&theta_g)?.tanh();
            let local = h
                .attention
                .hadamard(&mask)?
                .matmul(&h.values)?
                .matmul(&theta_l)?
                .tanh();
            let s_h = global.scale(lambda).add(&local.scale(1.0 - lambda))?;
            total = Some(match total {
                None => s_h,
                Some(t) => t.add(&s_h)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("pooling layer has no heads".into()))?;
        let s = total.transpose().row_softmax().transpose();
        let distribution = ScoreDistribution::new(s.value().data().to_vec())?;
        Ok(NodeScores { s, distribution })
    }

    /// Runs scoring, selection and coarsening on one graph.
    pub fn pool<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        adjacency: &Adjacency,
        selection: Selection<'_>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<PoolResult<'t>> {
        let n = adjacency.n();
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        if x.shape() != (n, self.config.dim) {
            return Err(Error::Dimension {
                op: "gtpool",
                lhs: x.shape(),
                rhs: (n, self.config.dim),
            });
        }
        let heads = self.attention_matrices(tape, store, x)?;
        let scores = self.score_nodes(tape, store, adjacency, &heads)?;
        let idx = match selection {
            Selection::Sample => select(&scores.distribution, &self.config.spec)?,
            Selection::Fixed(idx) => {
                if idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|&i| i >= n) || idx.is_empty() {
                    return Err(Error::Argument(format!(
                        "fixed selection must be ascending, unique and within 0..{n}"
                    )));
                }
                idx.to_vec()
            }
        };

        let mut refined = Vec::with_capacity(heads.len());
        let mut head_out = Vec::with_capacity(heads.len());
        for h in &heads {
            let a_prime = h.attention.gather_rows(&idx)?;
            head_out.push(a_prime.matmul(&h.values)?);
            refined.push(a_prime);
        }
        let w_o = tape.param(store, self.w_o);
        let attended = Var::concat_cols(&head_out)?
            .matmul(&w_o)?
            .dropout(self.config.dropout, rng, train);
        let mut x_hat = attended.add(&x.gather_rows(&idx)?)?;
        if self.config.score_gating {
            let gate = scores.s.gather_rows(&idx)?.scale(n as f64);
            x_hat = x_hat.scale_rows(&gate)?;
        }

        let normed = x_hat.layer_norm(
            &tape.param(store, self.ln_gain),
            &tape.param(store, self.ln_bias),
        )?;
        let hidden = normed
            .matmul(&tape.param(store, self.ffn_w1))?
            .add_row(&tape.param(store, self.ffn_b1))?
            .gelu()
            .dropout(self.config.dropout, rng, train);
        let ffn = hidden
            .matmul(&tape.param(store, self.ffn_w2))?
            .add_row(&tape.param(store, self.ffn_b2))?;
        let x_out = ffn.add(&x_hat)?;

        Ok(PoolResult {
            adjacency: adjacency.induced(&idx)?,
            idx,
            x: x_out,
            attention: refined,
            scores: scores.distribution,
        })
    }
}

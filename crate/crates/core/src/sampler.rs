//! Parameter-free node selection from a significance-score vector.
//!
//! Scores are treated as a probability mass function over nodes in index
//! order, laid out on a roulette wheel by their cumulative sums. `M = ⌈μ·n⌉`
//! fixed points `k = i/(M+1)` are dropped on the wheel:
//!
//! - [`SamplerMethod::Rws`] picks the node whose interval `(CDF_{i−1}, CDF_i]`
//!   contains `k`;
//! - [`SamplerMethod::Rwsv`] picks the node whose cumulative score is nearest
//!   to `k`, i.e. intervals split at the midpoints between neighbouring CDF
//!   values (a tie at a midpoint goes to the lower index);
//! - [`SamplerMethod::TopK`] ignores the wheel and keeps the `M` largest
//!   scores.
//!
//! When a point lands on a node that is already taken, the selection walks
//! left around the wheel (`i − 1 mod n`) to the first free node. The result is
//! always `M` distinct indices in ascending order, and depends on nothing but
//! the scores and the spec, so any top-K style pooling layer can swap its
//! selection step for [`select`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ s = 1` and on the last CDF entry.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Rws,
    Rwsv,
    #[serde(rename = "topk")]
    TopK,
}

impl SamplerMethod {
    pub const ALL: [SamplerMethod; 3] = [SamplerMethod::TopK, SamplerMethod::Rws, SamplerMethod::Rwsv];
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMethod::Rws => "rws",
            SamplerMethod::Rwsv => "rwsv",
            SamplerMethod::TopK => "topk",
        })
    }
}

impl FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rws" => Ok(SamplerMethod::Rws),
            "rwsv" => Ok(SamplerMethod::Rwsv),
            "topk" | "top-k" | "top_k" => Ok(SamplerMethod::TopK),
            other => Err(Error::Config(format!(
                "unknown sampler `{other}` (expected topk, rws or rwsv)"
            ))),
        }
    }
}

/// Pooling ratio and selection method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub mu: f64,
    pub method: SamplerMethod,
}

impl SampleSpec {
    pub fn new(mu: f64, method: SamplerMethod) -> Result<Self> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::Config(format!("pooling ratio μ must be in (0, 1], got {mu}")));
        }
        Ok(SampleSpec { mu, method })
    }

    /// Number of nodes kept from an `n`-node graph.
    pub fn keep(&self, n: usize) -> usize {
        num_to_sample(n, self.mu)
    }
}

/// `M = ⌈μ·n⌉`, clamped to `[1, n]` for `n ≥ 1`. A relative slack of 1e-9
/// keeps products such as `0.7 · 10 = 7.000000000000001` from rounding up.
pub fn num_to_sample(n: usize, mu: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = mu * n as f64;
    let m = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    m.clamp(1, n)
}

/// A node score vector as a pmf, with its running sums.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDistribution {
    s: Vec<f64>,
    cdf: Vec<f64>,
}

impl ScoreDistribution {
    /// Wraps an already-normalised pmf.
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Argument("empty score distribution".into()));
        }
        if let Some(bad) = s.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::Argument(format!("score {bad} is not a probability")));
        }
        let mut cdf = Vec::with_capacity(s.len());
        let mut acc = 0.0;
        for &p in &s {
            acc += p;
            cdf.push(acc);
        }
        if (acc - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Argument(format!("scores sum to {acc}, not 1")));
        }
        Ok(ScoreDistribution { s, cdf })
    }

    /// Normalises strictly positive raw scores.
    pub fn from_positive_scores(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Argument("empty score vector".into()));
        }
        if let Some(bad) = raw.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::Argument(format!("score {bad} is not positive")));
        }
        let total: f64 = raw.iter().sum();
        ScoreDistribution::new(raw.iter().map(|x| x / total).collect())
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn pmf(&self) -> &[f64] {
        &self.s
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Midpoint between `CDF_i` and `CDF_{i+1}`; upper RWSV boundary of node `i`.
    fn midpoint(&self, i: usize) -> f64 {
        (self.cdf[i] + self.cdf[i + 1]) / 2.0
    }
}

/// The `M` evenly spaced points `1/(M+1), …, M/(M+1)`.
pub fn sample_points(n: usize, mu: f64) -> Vec<f64> {
    let m = num_to_sample(n.max(1), mu);
    (1..=m).map(|i| i as f64 / (m + 1) as f64).collect()
}

/// Node whose interval `(CDF_{i−1}, CDF_i]` contains `k` (`CDF_{−1} = 0`).
pub fn rws(dist: &ScoreDistribution, k: f64) -> Result<usize> {
    if dist.is_empty() {
        return Err(Error::Argument("rws on an empty distribution".into()));
    }
    let i = dist.cdf.partition_point(|&c| c < k);
    // A last CDF entry a rounding error below 1 leaves the top of the wheel uncovered.
    Ok(i.min(dist.len() - 1))
}

/// Node whose cumulative score is nearest to `k`, using the midpoint
/// partition; `k` exactly on a midpoint resolves to the lower node.
pub fn rwsv(dist: &ScoreDistribution, k: f64) -> Result<usize> {
    if dist.is_empty() {
        return Err(Error::Argument("rwsv on an empty distribution".into()));
    }
    let n = dist.len();
    // first i whose upper boundary (CDF_i + CDF_{i+1})/2 is ≥ k; node n−1 owns the rest.
    let mut lo = 0;
    let mut hi = n - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if dist.midpoint(mid) < k {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// RWS interval `(lo, hi]` of node `i`.
pub fn rws_interval(dist: &ScoreDistribution, i: usize) -> (f64, f64) {
    let lo = if i == 0 { 0.0 } else { dist.cdf[i - 1] };
    (lo, dist.cdf[i])
}

/// RWSV interval of node `i`: from the midpoint with its left neighbour (0
/// for the first node) to the midpoint with its right neighbour (1 for the
/// last node).
pub fn rwsv_interval(dist: &ScoreDistribution, i: usize) -> (f64, f64) {
    let n = dist.len();
    let lo = if i == 0 { 0.0 } else { dist.midpoint(i - 1) };
    let hi = if i + 1 == n { 1.0 } else { dist.midpoint(i) };
    (lo, hi)
}

/// Selects `⌈μ·n⌉` distinct node indices, returned in ascending order.
pub fn select(dist: &ScoreDistribution, spec: &SampleSpec) -> Result<Vec<usize>> {
    let n = dist.len();
    if n == 0 {
        return Err(Error::Argument("select on an empty distribution".into()));
    }
    let m = spec.keep(n);
    let mut chosen = match spec.method {
        SamplerMethod::TopK => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist.s[b].total_cmp(&dist.s[a]).then(a.cmp(&b)));
            order.truncate(m);
            order
        }
        method => {
            let mut taken = vec![false; n];
            let mut out = Vec::with_capacity(m);
            for k in sample_points(n, spec.mu) {
                let mut i = match method {
                    SamplerMethod::Rws => rws(dist, k)?,
                    _ => rwsv(dist, k)?,
                };
                while taken[i] {
                    i = (i + n - 1) % n;
                }
                taken[i] = true;
                out.push(i);
            }
            out
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Linear-scan reference for [`select`]: explicit interval membership tests,
/// explicit midpoint partition, repeated argmax for top-K. Slow by design;
/// used as a test oracle.
pub fn brute_force_select(dist: &ScoreDistribution, spec: &SampleSpec) -> Vec<usize> {
    let n = dist.len();
    let cdf = dist.cdf();
    let m = spec.keep(n);
    let mut selected: Vec<usize> = Vec::new();
    match spec.method {
        SamplerMethod::TopK => {
            for _ in 0..m {
                let mut best: Option<usize> = None;
                for i in 0..n {
                    if selected.contains(&i) {
                        continue;
                    }
                    match best {
                        Some(b) if dist.pmf()[i] <= dist.pmf()[b] => {}
                        _ => best = Some(i),
                    }
                }
                selected.push(best.expect("m ≤ n"));
            }
        }
        SamplerMethod::Rws | SamplerMethod::Rwsv => {
            for j in 1..=m {
                let k = j as f64 / (m + 1) as f64;
                let mut hit = n - 1;
                for i in 0..n {
                    let (lo, hi) = if spec.method == SamplerMethod::Rws {
                        (if i == 0 { 0.0 } else { cdf[i - 1] }, cdf[i])
                    } else {
                        (
                            if i == 0 { 0.0 } else { (cdf[i - 1] + cdf[i]) / 2.0 },
                            if i == n - 1 { 1.0 } else { (cdf[i] + cdf[i + 1]) / 2.0 },
                        )
                    };
                    let inside = if i == 0 { k >= lo && k <= hi } else { k > lo && k <= hi };
                    if inside {
                        hit = i;
                        break;
                    }
                }
                for step in 0..n {
                    let cand = (hit + n - step) % n;
                    if !selected.contains(&cand) {
                        selected.push(cand);
                        break;
                    }
                }
            }
        }
    }
    selected.sort_unstable();
    selected
}

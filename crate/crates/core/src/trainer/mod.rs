//! Cross-validated training with Adam and early stopping, plus one-axis
//! parameter sweeps.
//!
//! Each batch sums per-graph cross-entropy losses and takes one optimizer
//! step. Graphs inside a batch are forwarded in parallel in fixed-size chunks
//! whose gradients are reduced in chunk order, so results are bit-identical
//! for any thread count.

mod config;
mod report;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graphio::{batches, stratified_holdout, Dataset, FoldPlan, Graph};
use crate::model::{write_checkpoint, GtPoolNet};
use crate::numcore::{Adam, AdamConfig, ParamStore, Rng, Tape, Var};

pub use config::{normalize_key, RunConfig, CONFIG_KEYS};
pub use report::{mean_std, sweep_table, EpochStats, FoldReport, MetricsReport, SweepEntry};

/// Graphs per parallel work unit inside a batch.
const CHUNK: usize = 8;

/// A trainable graph classifier producing `1×C` logits per graph.
pub trait GraphClassifier: Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn logits<'t>(&self, tape: &'t Tape, graph: &Graph, train: bool, rng: &mut Rng) -> Result<Var<'t>>;
}

impl GraphClassifier for GtPoolNet {
    fn params(&self) -> &ParamStore {
        GtPoolNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        GtPoolNet::params_mut(self)
    }

    fn logits<'t>(&self, tape: &'t Tape, graph: &Graph, train: bool, rng: &mut Rng) -> Result<Var<'t>> {
        self.forward(tape, graph, train, rng)
    }
}

/// Records every graph index read while fitting.
#[derive(Debug, Default)]
pub struct AccessLog {
    seen: Mutex<BTreeSet<usize>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, i: usize) {
        self.seen.lock().expect("access log poisoned").insert(i);
    }

    pub fn seen(&self) -> BTreeSet<usize> {
        self.seen.lock().expect("access log poisoned").clone()
    }
}

/// Dataset handle that optionally logs which graphs are read.
#[derive(Clone, Copy)]
struct View<'a> {
    dataset: &'a Dataset,
    log: Option<&'a AccessLog>,
}

impl<'a> View<'a> {
    fn graph(&self, i: usize) -> &'a Graph {
        if let Some(log) = self.log {
            log.record(i);
        }
        &self.dataset.graphs[i]
    }
}

fn predicted(logits: &Var<'_>) -> usize {
    let v = logits.value();
    let row = v.data();
    let mut best = 0;
    for (c, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = c;
        }
    }
    best
}

/// Mean loss and accuracy over `indices`, with dropout off.
fn evaluate_view<M: GraphClassifier>(model: &M, view: View<'_>, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Argument("evaluation on an empty index set".into()));
    }
    let per_graph: Vec<(f64, bool)> = indices
        .par_iter()
        .map(|&i| {
            let g = view.graph(i);
            let tape = Tape::new();
            let logits = model.logits(&tape, g, false, &mut Rng::new(0))?;
            let loss = logits.cross_entropy(&[g.label])?.scalar();
            Ok((loss, predicted(&logits) == g.label))
        })
        .collect::<Result<_>>()?;
    let n = indices.len() as f64;
    let loss = per_graph.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per_graph.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Mean loss and accuracy of `model` on the graphs at `indices` (eval mode).
pub fn evaluate<M: GraphClassifier>(model: &M, dataset: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    evaluate_view(model, View { dataset, log: None }, indices)
}

struct BatchResult {
    loss: f64,
    correct: usize,
    grads: Vec<Vec<f64>>,
}

fn zero_grads(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
}

/// Summed loss and gradients over `batch`; per-graph randomness comes from
/// `(seed, stream…, graph index)`.
fn batch_gradients<M: GraphClassifier>(
    model: &M,
    view: View<'_>,
    batch: &[usize],
    seed: u64,
    stream: &[u64],
) -> Result<BatchResult> {
    let chunks: Vec<BatchResult> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = BatchResult {
                loss: 0.0,
                correct: 0,
                grads: zero_grads(model.params()),
            };
            for &i in chunk {
                let g = view.graph(i);
                let mut key = stream.to_vec();
                key.push(i as u64);
                let mut rng = Rng::derive(seed, &key);
                let tape = Tape::new();
                let logits = model.logits(&tape, g, true, &mut rng)?;
                let loss = logits.cross_entropy(&[g.label])?;
                acc.loss += loss.scalar();
                acc.correct += usize::from(predicted(&logits) == g.label);
                let grads = tape.backward(loss)?;
                for (pid, grad) in grads.param_grads() {
                    for (a, b) in acc.grads[pid.index()].iter_mut().zip(grad) {
                        *a += b;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = BatchResult {
        loss: 0.0,
        correct: 0,
        grads: zero_grads(model.params()),
    };
    for c in chunks {
        total.loss += c.loss;
        total.correct += c.correct;
        for (t, g) in total.grads.iter_mut().zip(&c.grads) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok(total)
}

/// Training schedule shared by every fold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl FitConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        FitConfig {
            adam: cfg.adam(),
            batch: cfg.batch,
            epochs: cfg.epochs,
            patience: cfg.patience,
            seed: cfg.seed,
        }
    }
}

/// Result of [`fit`]: the per-epoch curve and the best-validation epoch.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Set when training stopped on a non-finite loss or gradient; the model
    /// then holds the best parameters seen before the failure, if any.
    pub error: Option<String>,
}

/// Trains `model` on `train` and early-stops on the loss over `val`. On
/// return the model holds the parameters of the epoch with minimal
/// validation loss. `stream` namespaces the random draws.
pub fn fit<M: GraphClassifier>(
    model: &mut M,
    dataset: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &FitConfig,
    stream: &[u64],
    log: Option<&AccessLog>,
) -> Result<FitOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    let view = View { dataset, log };
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut curve = Vec::new();
    let mut error = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut key = stream.to_vec();
        key.push(epoch as u64);
        let shuffle_seed = Rng::derive(cfg.seed, &key).next_u64();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut failed = None;
        for (b, batch) in batches(train, cfg.batch, shuffle_seed).iter().enumerate() {
            let mut bkey = key.clone();
            bkey.push(b as u64);
            let r = match batch_gradients(model, view, batch, cfg.seed, &bkey) {
                Ok(r) => r,
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            };
            if !r.loss.is_finite() {
                failed = Some(format!("epoch {epoch}, batch {b}: loss is {}", r.loss));
                break;
            }
            loss_sum += r.loss;
            correct += r.correct;
            let store = model.params_mut();
            store.zero_grad();
            for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(&r.grads) {
                store.accumulate_grad(id, g, 1.0);
            }
            if let Err(e) = adam.step(store) {
                failed = Some(format!("epoch {epoch}, batch {b}: {e}"));
                break;
            }
        }
        if failed.is_none() {
            match evaluate_view(model, view, val) {
                Ok((val_loss, val_accuracy)) if val_loss.is_finite() => {
                    curve.push(EpochStats {
                        epoch,
                        train_loss: loss_sum / train.len() as f64,
                        train_accuracy: correct as f64 / train.len() as f64,
                        val_loss,
                        val_accuracy,
                        seconds: start.elapsed().as_secs_f64(),
                    });
                    if best.as_ref().map_or(true, |(_, l, _)| val_loss < *l) {
                        best = Some((epoch, val_loss, model.params().clone()));
                    }
                }
                Ok((val_loss, _)) => failed = Some(format!("epoch {epoch}: validation loss is {val_loss}")),
                Err(e) => failed = Some(e.to_string()),
            }
        }
        if let Some(msg) = failed {
            log::warn!("training aborted: {msg}");
            error = Some(msg);
            break;
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    match best {
        Some((best_epoch, best_val_loss, params)) => {
            model.params_mut().copy_values_from(&params)?;
            Ok(FitOutcome {
                curve,
                best_epoch,
                best_val_loss,
                error,
            })
        }
        None => Err(Error::NonFinite(
            error.unwrap_or_else(|| "no epoch completed".into()),
        )),
    }
}

/// Everything [`train_fold`] needs besides the model.
pub struct FoldContext<'a> {
    pub dataset: &'a Dataset,
    pub plan: &'a FoldPlan,
    pub fold: usize,
    pub repeat: usize,
    pub val_fraction: f64,
    pub fit: FitConfig,
    /// Receives every graph index read during fitting and model selection.
    pub log: Option<&'a AccessLog>,
    /// Best-validation parameters are written here when set.
    pub checkpoint: Option<&'a Path>,
}

/// Trains on the non-test folds (minus a stratified validation split) and
/// reports test accuracy at the best-validation checkpoint. Failures are
/// recorded in the report rather than returned.
pub fn train_fold<M: GraphClassifier>(model: &mut M, ctx: &FoldContext<'_>) -> FoldReport {
    let start = Instant::now();
    let test = ctx.plan.test_indices(ctx.fold);
    let labels = ctx.dataset.labels();
    let split_seed = Rng::derive(ctx.fit.seed, &[ctx.repeat as u64, ctx.fold as u64, 0x7A1]).next_u64();
    let (train, val) = stratified_holdout(&ctx.plan.train_indices(ctx.fold), &labels, ctx.val_fraction, split_seed);
    let mut report = FoldReport {
        repeat: ctx.repeat,
        fold: ctx.fold,
        train_size: train.len(),
        val_size: val.len(),
        test_size: test.len(),
        accuracy: None,
        best_epoch: None,
        best_val_loss: None,
        error: None,
        curve: Vec::new(),
        seconds: 0.0,
    };
    let stream = [ctx.repeat as u64, ctx.fold as u64];
    let outcome = fit(model, ctx.dataset, &train, &val, &ctx.fit, &stream, ctx.log).and_then(|o| {
        if let Some(path) = ctx.checkpoint {
            write_checkpoint(model.params(), path)?;
        }
        Ok(o)
    });
    match outcome {
        Ok(o) => {
            report.best_epoch = Some(o.best_epoch);
            report.best_val_loss = Some(o.best_val_loss);
            report.curve = o.curve;
            match o.error {
                Some(e) => report.error = Some(e),
                None => match evaluate(model, ctx.dataset, &test) {
                    Ok((_, acc)) => report.accuracy = Some(acc),
                    Err(e) => report.error = Some(e.to_string()),
                },
            }
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report.seconds = start.elapsed().as_secs_f64();
    report
}

/// Runs every fold of every repeat with models from `factory(repeat, fold)`.
/// Checkpoints go to `checkpoint_dir/repeat{r}_fold{f}.ckpt` when a directory
/// is given.
pub fn cross_validate_with<M, F>(
    config: &RunConfig,
    dataset: &Dataset,
    factory: F,
    checkpoint_dir: Option<&Path>,
) -> Result<MetricsReport>
where
    M: GraphClassifier + Send,
    F: Fn(usize, usize) -> Result<M> + Sync,
{
    config.validate()?;
    if dataset.len() < config.folds {
        return Err(Error::Argument(format!(
            "{} graphs cannot fill {} folds",
            dataset.len(),
            config.folds
        )));
    }
    let start = Instant::now();
    let fit_cfg = FitConfig::from_run(config);
    let num_parameters = factory(0, 0)?.params().num_scalars();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let plans = (0..config.repeats)
        .map(|r| FoldPlan::stratified(&dataset.labels(), config.folds, config.seed.wrapping_add(r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..config.repeats)
        .flat_map(|r| (0..config.folds).map(move |f| (r, f)))
        .collect();
    let folds: Vec<FoldReport> = pool.install(|| {
        jobs.par_iter()
            .map(|&(repeat, fold)| {
                let ckpt = checkpoint_dir.map(|d| d.join(format!("repeat{repeat}_fold{fold}.ckpt")));
                let ctx = FoldContext {
                    dataset,
                    plan: &plans[repeat],
                    fold,
                    repeat,
                    val_fraction: config.val_fraction,
                    fit: fit_cfg,
                    log: None,
                    checkpoint: ckpt.as_deref(),
                };
                match factory(repeat, fold) {
                    Ok(mut model) => train_fold(&mut model, &ctx),
                    Err(e) => FoldReport {
                        repeat,
                        fold,
                        train_size: 0,
                        val_size: 0,
                        test_size: ctx.plan.test_indices(fold).len(),
                        accuracy: None,
                        best_epoch: None,
                        best_val_loss: None,
                        error: Some(e.to_string()),
                        curve: Vec::new(),
                        seconds: 0.0,
                    },
                }
            })
            .collect()
    });
    for f in &folds {
        match (f.accuracy, &f.error) {
            (Some(a), _) => log::info!("repeat {} fold {}: accuracy {:.4}", f.repeat, f.fold, a),
            (None, Some(e)) => log::warn!("repeat {} fold {} failed: {e}", f.repeat, f.fold),
            (None, None) => {}
        }
    }
    Ok(MetricsReport::new(
        &dataset.name,
        config.clone(),
        num_parameters,
        folds,
        start.elapsed().as_secs_f64(),
    ))
}

/// Model seed for one (repeat, fold) cell.
pub fn model_seed(seed: u64, repeat: usize, fold: usize) -> u64 {
    Rng::derive(seed, &[0x30DE1, repeat as u64, fold as u64]).next_u64()
}

/// Cross-validates the pooling network described by `config`. The dataset
/// must already carry node features.
pub fn cross_validate(config: &RunConfig, dataset: &Dataset) -> Result<MetricsReport> {
    cross_validate_in(config, dataset, None)
}

pub fn cross_validate_in(config: &RunConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<MetricsReport> {
    if dataset.feature_dim == 0 {
        return Err(Error::Config(format!("dataset {} has no node features", dataset.name)));
    }
    let model_cfg = config.model_config(dataset.feature_dim, dataset.num_classes.max(2));
    model_cfg.validate()?;
    cross_validate_with(
        config,
        dataset,
        |r, f| GtPoolNet::new(model_cfg, model_seed(config.seed, r, f)),
        checkpoint_dir,
    )
}

/// Runs [`cross_validate`] once per value of `axis`, holding every other key
/// fixed.
pub fn sweep(config: &RunConfig, dataset: &Dataset, axis: &str, values: &[String]) -> Result<Vec<SweepEntry>> {
    let axis = normalize_key(axis);
    let configs = values
        .iter()
        .map(|v| {
            let mut c = config.clone();
            c.set(&axis, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(configs) {
        let report = cross_validate(&cfg, dataset)?;
        log::info!("{axis} = {value}: {}", report.summary());
        out.push(SweepEntry {
            axis: axis.clone(),
            value: value.clone(),
            report,
        });
    }
    Ok(out)
}

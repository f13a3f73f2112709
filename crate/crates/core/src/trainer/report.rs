use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-graph training loss.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub repeat: usize,
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Test accuracy at the best-validation checkpoint; `None` if the fold failed.
    pub accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub error: Option<String>,
    pub curve: Vec<EpochStats>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub config: RunConfig,
    pub num_parameters: usize,
    pub folds: Vec<FoldReport>,
    /// Accuracies of the successful folds, in fold order.
    pub fold_accuracies: Vec<f64>,
    /// 0 when every fold failed.
    pub mean_accuracy: f64,
    /// Population standard deviation of `fold_accuracies`.
    pub std_accuracy: f64,
    pub failed_folds: usize,
    pub seconds: f64,
}

/// Arithmetic mean and population standard deviation; `(0, 0)` when empty.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn new(dataset: &str, config: RunConfig, num_parameters: usize, folds: Vec<FoldReport>, seconds: f64) -> Self {
        let fold_accuracies: Vec<f64> = folds.iter().filter_map(|f| f.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&fold_accuracies);
        let failed_folds = folds.iter().filter(|f| f.accuracy.is_none()).count();
        MetricsReport {
            dataset: dataset.to_string(),
            config,
            num_parameters,
            folds,
            fold_accuracies,
            mean_accuracy,
            std_accuracy,
            failed_folds,
            seconds,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Argument(format!("report: {e}")))
    }

    /// Copy with every wall-clock field zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.seconds = 0.0;
        for f in &mut r.folds {
            f.seconds = 0.0;
            for e in &mut f.curve {
                e.seconds = 0.0;
            }
        }
        r
    }

    /// One row per (repeat, fold, epoch).
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("repeat,fold,epoch,train_loss,train_accuracy,val_loss,val_accuracy,seconds\n");
        for f in &self.folds {
            for e in &f.curve {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    f.repeat, f.fold, e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.seconds
                );
            }
        }
        out
    }

    /// `mean ± std` in percent.
    pub fn summary(&self) -> String {
        format!(
            "{}: {:.2} ± {:.2} % over {} fold(s){}",
            self.dataset,
            100.0 * self.mean_accuracy,
            100.0 * self.std_accuracy,
            self.fold_accuracies.len(),
            if self.failed_folds > 0 {
                format!(", {} failed", self.failed_folds)
            } else {
                String::new()
            }
        )
    }
}

/// One axis value and the report it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub axis: String,
    pub value: String,
    pub report: MetricsReport,
}

/// `axis,value,mean_accuracy,std_accuracy,folds,failed_folds` with one row per entry.
pub fn sweep_table(entries: &[SweepEntry]) -> String {
    let mut out = String::from("axis,value,mean_accuracy,std_accuracy,folds,failed_folds\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.axis,
            e.value,
            e.report.mean_accuracy,
            e.report.std_accuracy,
            e.report.fold_accuracies.len(),
            e.report.failed_folds
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(i: usize, acc: Option<f64>) -> FoldReport {
        FoldReport {
            repeat: 0,
            fold: i,
            train_size: 8,
            val_size: 1,
            test_size: 1,
            accuracy: acc,
            best_epoch: acc.map(|_| 0),
            best_val_loss: acc.map(|_| 0.5),
            error: acc.is_none().then(|| "diverged".into()),
            curve: vec![EpochStats {
                epoch: 0,
                train_loss: 0.7,
                train_accuracy: 0.5,
                val_loss: 0.5,
                val_accuracy: 1.0,
                seconds: 0.01,
            }],
            seconds: 0.02,
        }
    }

    #[test]
    fn aggregates_skip_failed_folds() {
        let r = MetricsReport::new(
            "T",
            RunConfig::default(),
            10,
            vec![fold(0, Some(0.5)), fold(1, None), fold(2, Some(1.0))],
            1.0,
        );
        assert_eq!(r.fold_accuracies, vec![0.5, 1.0]);
        assert_eq!(r.mean_accuracy, 0.75);
        assert_eq!(r.std_accuracy, 0.25);
        assert_eq!(r.failed_folds, 1);
    }

    #[test]
    fn json_round_trip_and_timing_strip() {
        let r = MetricsReport::new("T", RunConfig::default(), 10, vec![fold(0, Some(0.5))], 3.0);
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        let z = r.without_timings();
        assert_eq!(z.seconds, 0.0);
        assert_eq!(z.folds[0].curve[0].seconds, 0.0);
        assert_eq!(r.curves_csv().lines().count(), 2);
    }
}

//! Embedding quality: Lasso regression under k-fold cross-validation.

mod lasso;
mod metrics;

use serde::{Deserialize, Serialize};

pub use lasso::{lasso_fit, soft_threshold, LassoConfig, LassoFit};
pub use metrics::{compute_metrics, Metrics};

use crate::data::split_kfold;
use crate::error::EvalError;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub metrics: Metrics,
    pub converged: bool,
    pub sweeps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mae: f64,
    pub rmse: f64,
    /// Over folds where R² is defined; `None` if it is defined nowhere.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub k: usize,
    pub seed: u64,
    pub lasso: LassoConfig,
    pub folds: Vec<FoldResult>,
    pub mean: Summary,
    /// Population standard deviation across folds.
    pub std: Summary,
    /// Folds whose R² is undefined because the test targets are constant.
    pub undefined_r2_folds: usize,
}

impl EvalReport {
    pub fn all_converged(&self) -> bool {
        self.folds.iter().all(|f| f.converged)
    }

    pub fn to_table(&self) -> String {
        let r2 = |v: Option<f64>| v.map(|x| format!("{x:>9.4}")).unwrap_or_else(|| format!("{:>9}", "n/a"));
        let mut out = format!(
            "task: {}  folds: {}  seed: {}  alpha: {}\n{:>4} {:>6} {:>5} {:>10} {:>10} {:>9} {:>9}\n",
            self.task, self.k, self.seed, self.lasso.alpha, "fold", "train", "test", "MAE", "RMSE", "R2", "converged"
        );
        for f in &self.folds {
            out.push_str(&format!(
                "{:>4} {:>6} {:>5} {:>10.4} {:>10.4} {} {:>9}\n",
                f.fold, f.train_size, f.test_size, f.metrics.mae, f.metrics.rmse, r2(f.metrics.r2), f.converged
            ));
        }
        out.push_str(&format!(
            "mean {:>24.4} {:>10.4} {}\n std {:>24.4} {:>10.4} {}\n",
            self.mean.mae,
            self.mean.rmse,
            r2(self.mean.r2),
            self.std.mae,
            self.std.rmse,
            r2(self.std.r2)
        ));
        out
    }
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Fits Lasso on each training fold (standardized with training statistics
/// only) and scores the held-out fold.
pub fn kfold_evaluate(
    task: &str,
    h: &Tensor,
    y: &[f64],
    k: usize,
    seed: u64,
    cfg: &LassoConfig,
) -> Result<EvalReport, EvalError> {
    if h.rank() != 2 {
        return Err(EvalError::Invalid(format!("embeddings must be 2-D, got {:?}", h.shape())));
    }
    if h.rows() != y.len() {
        return Err(EvalError::Invalid(format!("{} embedding rows but {} targets", h.rows(), y.len())));
    }
    let folds = split_kfold(y.len(), k, seed)?;
    let d = h.cols();
    let take = |idx: &[usize]| -> (Tensor, Vec<f64>) {
        let data: Vec<f64> = idx.iter().flat_map(|&i| h.row(i).iter().copied()).collect();
        (Tensor::new(&[idx.len(), d], data).expect("nonempty fold"), idx.iter().map(|&i| y[i]).collect())
    };
    let mut results = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let (x_train, y_train) = take(&fold.train);
        let (x_test, y_test) = take(&fold.test);
        let fit = lasso_fit(&x_train, &y_train, cfg)?;
        let metrics = compute_metrics(&y_test, &fit.predict(&x_test))?;
        results.push(FoldResult {
            fold: i,
            train_size: fold.train.len(),
            test_size: fold.test.len(),
            metrics,
            converged: fit.converged,
            sweeps: fit.sweeps,
        });
    }
    let maes: Vec<f64> = results.iter().map(|f| f.metrics.mae).collect();
    let rmses: Vec<f64> = results.iter().map(|f| f.metrics.rmse).collect();
    let r2s: Vec<f64> = results.iter().filter_map(|f| f.metrics.r2).collect();
    let (mae_mean, mae_std) = mean_std(&maes).expect("k >= 2");
    let (rmse_mean, rmse_std) = mean_std(&rmses).expect("k >= 2");
    let r2 = mean_std(&r2s);
    Ok(EvalReport {
        task: task.to_string(),
        k,
        seed,
        lasso: cfg.clone(),
        undefined_r2_folds: results.len() - r2s.len(),
        folds: results,
        mean: Summary { mae: mae_mean, rmse: rmse_mean, r2: r2.map(|r| r.0) },
        std: Summary { mae: mae_std, rmse: rmse_std, r2: r2.map(|r| r.1) },
    })
}

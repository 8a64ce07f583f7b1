use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    /// L1 strength in `(1/(2m))‖y − Xw − b‖² + alpha·‖w‖₁`.
    pub alpha: f64,
    pub max_iter: usize,
    /// Converged once the largest coordinate change in a sweep is below this.
    pub tol: f64,
    /// Z-score feature columns before fitting.
    pub standardize: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self { alpha: 1.0, max_iter: 10_000, tol: 1e-7, standardize: true }
    }
}

impl LassoConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(EvalError::Invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(EvalError::Invalid("max_iter must be >= 1 and tol > 0".into()));
        }
        Ok(())
    }
}

/// Fitted model in the original feature units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep, in the (possibly standardized) fitting space.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows())
            .map(|i| self.intercept + x.row(i).iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>())
            .collect()
    }
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Cyclic coordinate descent with an unpenalized intercept.
pub fn lasso_fit(x: &Tensor, y: &[f64], cfg: &LassoConfig) -> Result<LassoFit, EvalError> {
    cfg.validate()?;
    if x.rank() != 2 {
        return Err(EvalError::Invalid(format!("design must be 2-D, got {:?}", x.shape())));
    }
    let (m, d) = (x.rows(), x.cols());
    if m < 2 {
        return Err(EvalError::Invalid(format!("need at least 2 samples, got {m}")));
    }
    if y.len() != m {
        return Err(EvalError::Invalid(format!("{m} design rows but {} targets", y.len())));
    }
    let mf = m as f64;
    let means: Vec<f64> = (0..d).map(|j| (0..m).map(|i| x.get2(i, j)).sum::<f64>() / mf).collect();
    let scales: Vec<f64> = (0..d)
        .map(|j| {
            if !cfg.standardize {
                return 1.0;
            }
            let var = (0..m).map(|i| (x.get2(i, j) - means[j]).powi(2)).sum::<f64>() / mf;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    // column-major centered (and scaled) design
    let cols: Vec<Vec<f64>> =
        (0..d).map(|j| (0..m).map(|i| (x.get2(i, j) - means[j]) / scales[j]).collect()).collect();
    let col_sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / mf).collect();
    let y_mean = y.iter().sum::<f64>() / mf;
    let mut residual: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut w = vec![0.0; d];

    let objective = |r: &[f64], w: &[f64]| {
        r.iter().map(|v| v * v).sum::<f64>() / (2.0 * mf) + cfg.alpha * w.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_iter {
        sweeps += 1;
        let mut max_update: f64 = 0.0;
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = &cols[j];
            let rho = col.iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>() / mf + col_sq[j] * w[j];
            let updated = soft_threshold(rho, cfg.alpha) / col_sq[j];
            let delta = w[j] - updated;
            if delta != 0.0 {
                for (r, a) in residual.iter_mut().zip(col) {
                    *r += a * delta;
                }
                w[j] = updated;
            }
            max_update = max_update.max(delta.abs());
        }
        trace.push(objective(&residual, &w));
        if max_update < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lasso did not converge in {} sweeps", cfg.max_iter);
    }
    let weights: Vec<f64> = w.iter().zip(&scales).map(|(w, s)| w / s).collect();
    let intercept = y_mean - weights.iter().zip(&means).map(|(w, mu)| w * mu).sum::<f64>();
    Ok(LassoFit { weights, intercept, sweeps, converged, objective_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn design(m: usize, d: usize, seed: u64) -> (Tensor, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m)
            .map(|i| 3.0 + (0..d).map(|j| (j as f64 - 1.5) * x[i * d + j]).sum::<f64>() + rng.gen_range(-0.1..0.1))
            .collect();
        (Tensor::new(&[m, d], x).unwrap(), y)
    }

    #[test]
    fn huge_alpha_gives_mean_predictor() {
        let (x, y) = design(30, 4, 1);
        let fit = lasso_fit(&x, &y, &LassoConfig { alpha: 1e6, ..LassoConfig::default() }).unwrap();
        assert!(fit.weights.iter().all(|&w| w == 0.0));
        let mean = y.iter().sum::<f64>() / 30.0;
        assert!((fit.intercept - mean).abs() < 1e-12);
        assert!(fit.converged);
    }

    #[test]
    fn constant_column_gets_zero_weight() {
        let (x, y) = design(20, 3, 2);
        let mut data = x.data().to_vec();
        for i in 0..20 {
            data[i * 3 + 1] = 4.0;
        }
        let x = Tensor::new(&[20, 3], data).unwrap();
        let fit = lasso_fit(&x, &y, &LassoConfig { alpha: 0.01, ..LassoConfig::default() }).unwrap();
        assert_eq!(fit.weights[1], 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, y) = design(10, 2, 3);
        assert!(lasso_fit(&x, &y[..9], &LassoConfig::default()).is_err());
        assert!(lasso_fit(&x, &y, &LassoConfig { alpha: -1.0, ..LassoConfig::default() }).is_err());
        let one = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert!(lasso_fit(&one, &[1.0], &LassoConfig::default()).is_err());
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let (x, y) = design(40, 6, 4);
        let fit = lasso_fit(&x, &y, &LassoConfig { alpha: 0.0, max_iter: 1, ..LassoConfig::default() }).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.sweeps, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn objective_never_increases(seed in 0u64..1000, alpha in 0.0f64..2.0, standardize: bool) {
            let (x, y) = design(25, 5, seed);
            let fit = lasso_fit(&x, &y, &LassoConfig { alpha, standardize, ..LassoConfig::default() }).unwrap();
            for pair in fit.objective_trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0));
            }
        }

        #[test]
        fn l1_norm_shrinks_with_alpha(seed in 0u64..1000) {
            let (x, y) = design(30, 5, seed);
            let mut last = f64::INFINITY;
            for alpha in [0.0, 0.01, 0.05, 0.1, 0.3, 1.0, 3.0] {
                let cfg = LassoConfig { alpha, standardize: false, tol: 1e-10, ..LassoConfig::default() };
                let fit = lasso_fit(&x, &y, &cfg).unwrap();
                let l1: f64 = fit.weights.iter().map(|w| w.abs()).sum();
                prop_assert!(l1 <= last + 1e-7, "alpha {alpha}: {l1} > {last}");
                last = l1;
            }
        }
    }
}

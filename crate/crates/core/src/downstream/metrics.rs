use serde::{Deserialize, Serialize};

use crate::error::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when `y` is constant, since R² is undefined there.
    pub r2: Option<f64>,
}

/// MAE, RMSE and R², with `ȳ` taken over the evaluated set.
pub fn compute_metrics(y: &[f64], y_hat: &[f64]) -> Result<Metrics, EvalError> {
    if y.len() != y_hat.len() {
        return Err(EvalError::Invalid(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if y.len() < 2 {
        return Err(EvalError::Invalid(format!("need at least 2 samples, got {}", y.len())));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut total = 0.0;
    for (&t, &p) in y.iter().zip(y_hat) {
        abs += (t - p).abs();
        sq += (t - p) * (t - p);
        total += (t - mean) * (t - mean);
    }
    let r2 = if total > 0.0 { Some(1.0 - sq / total) } else { None };
    Ok(Metrics { mae: abs / n, rmse: (sq / n).sqrt(), r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let y = [1.0, 4.0, 2.0];
        assert_eq!(compute_metrics(&y, &y).unwrap(), Metrics { mae: 0.0, rmse: 0.0, r2: Some(1.0) });
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let y = [1.0, 2.0, 6.0];
        let m = compute_metrics(&y, &[3.0; 3]).unwrap();
        assert_eq!(m.r2, Some(0.0));
    }

    #[test]
    fn two_point_case() {
        assert_eq!(compute_metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), Metrics { mae: 1.0, rmse: 1.0, r2: Some(0.0) });
    }

    #[test]
    fn constant_target_flags_r2() {
        let m = compute_metrics(&[5.0, 5.0], &[4.0, 6.0]).unwrap();
        assert_eq!(m.r2, None);
        assert_eq!(m.mae, 1.0);
    }

    #[test]
    fn length_errors() {
        assert!(compute_metrics(&[1.0], &[1.0]).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..40)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = compute_metrics(&y, &p).unwrap();
            prop_assert!(m.rmse + 1e-12 >= m.mae);
            prop_assert!(m.mae >= 0.0);
            if let Some(r2) = m.r2 {
                prop_assert!(r2 <= 1.0);
            }
        }
    }
}

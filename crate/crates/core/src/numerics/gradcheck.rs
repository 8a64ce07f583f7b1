//! Central finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::NumericsError;
use crate::params::ParamStore;

#[derive(Debug, Clone, Serialize)]
pub struct FdConfig {
    /// Perturbation half-width.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Coordinates drawn from every parameter tensor.
    pub per_param: usize,
    /// Lower bound on the total number of checked coordinates.
    pub min_samples: usize,
    /// Relative error is `|a - fd| / max(|a|, |fd|, floor)`.
    pub denominator_floor: f64,
    /// Redraws allowed per coordinate when a perturbation crosses a kink.
    pub kink_retries: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            per_param: 4,
            min_samples: 200,
            denominator_floor: 1e-3,
            kink_retries: 8,
            seed: 0,
        }
    }
}

/// One loss evaluation as seen by the checker.
#[derive(Debug, Clone, Copy)]
pub struct FdProbe {
    pub loss: f64,
    pub kink_signature: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub samples: Vec<FdSample>,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<FdSample>,
    pub tolerance: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn checked(&self) -> usize {
        self.samples.len()
    }
}

/// Compares `store`'s accumulated gradients against central differences of
/// `probe`. Coordinates whose ±eps perturbation changes the kink signature are
/// redrawn, since the loss is not differentiable across that boundary.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut probe: F,
    cfg: &FdConfig,
) -> Result<FdReport, NumericsError>
where
    F: FnMut(&ParamStore) -> Result<FdProbe, NumericsError>,
{
    if !(cfg.eps > 0.0) {
        return Err(NumericsError::Invalid(format!("eps must be positive, got {}", cfg.eps)));
    }
    let base = probe(store)?;
    if !base.loss.is_finite() {
        return Err(NumericsError::Invalid("non-finite base loss".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let sizes: Vec<usize> = store.iter().map(|p| p.value.len()).collect();
    let mut plan: Vec<(usize, usize)> = Vec::new();
    for (pi, &len) in sizes.iter().enumerate() {
        let take = cfg.per_param.min(len);
        for idx in sample(&mut rng, len, take).into_iter() {
            plan.push((pi, idx));
        }
    }
    let total: usize = sizes.iter().sum();
    while plan.len() < cfg.min_samples.min(total) {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        if !plan.contains(&(pi, flat)) {
            plan.push((pi, flat));
        }
    }

    let ids: Vec<_> = store.iter().map(|p| store.id(&p.name).unwrap()).collect();
    let mut samples = Vec::with_capacity(plan.len());
    let mut skipped = 0;
    for (pi, first_idx) in plan {
        let id = ids[pi];
        let mut idx = first_idx;
        let mut attempt = 0;
        loop {
            let original = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = original + cfg.eps;
            let plus = probe(store);
            store.get_mut(id).value.data_mut()[idx] = original - cfg.eps;
            let minus = probe(store);
            store.get_mut(id).value.data_mut()[idx] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Err(NumericsError::Invalid(format!(
                    "non-finite loss perturbing {}[{idx}]",
                    store.get(id).name
                )));
            }
            if plus.kink_signature != base.kink_signature || minus.kink_signature != base.kink_signature {
                skipped += 1;
                attempt += 1;
                if attempt > cfg.kink_retries {
                    break;
                }
                idx = rng.gen_range(0..sizes[pi]);
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.eps);
            let analytic = store.get(id).grad.data()[idx];
            let denom = analytic.abs().max(numeric.abs()).max(cfg.denominator_floor);
            samples.push(FdSample {
                param: store.get(id).name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: (analytic - numeric).abs() / denom,
            });
            break;
        }
    }

    let worst = samples
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    let max_rel_error = worst.as_ref().map(|w| w.rel_error).unwrap_or(0.0);
    Ok(FdReport {
        passed: max_rel_error < cfg.tolerance && !samples.is_empty(),
        samples,
        skipped_kinks: skipped,
        max_rel_error,
        worst,
        tolerance: cfg.tolerance,
    })
}

//! Planted-factor synthetic cities.
//!
//! Each region gets a latent vector `u ∈ R^q`. Trips follow a gravity-style
//! Poisson model with rate `scale · exp(−κ‖uᵢ − uⱼ‖² / 2)`, so flows concentrate
//! between regions that are close in latent space. POI and land-use counts are
//! Poisson with rates `scale · softplus(A uᵢ + c)`, and every target is an affine
//! function of `u` plus Gaussian noise, clipped at zero.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{RegionDataset, ViewKind, ViewMatrix};
use crate::error::DataError;
use crate::numerics::Tensor;

const MOBILITY_SCALE: f64 = 20.0;
/// `κ` in the trip-rate kernel.
const MOBILITY_SHARPNESS: f64 = 3.0;
const POI_SCALE: f64 = 6.0;
const LANDUSE_SCALE: f64 = 4.0;
const TARGET_MEAN: f64 = 50.0;
const TARGET_SPREAD: f64 = 10.0;

pub const TARGET_TASKS: [&str; 2] = ["crime", "checkin"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub latent_dim: usize,
    pub poi_categories: usize,
    pub landuse_categories: usize,
    /// Target noise standard deviation, in units of the target's signal spread.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n: 50, latent_dim: 4, poi_categories: 26, landuse_categories: 12, noise_level: 0.1, seed: 7 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n < 10 {
            return Err(DataError::Config(format!("regions must be >= 10, got {}", self.n)));
        }
        if self.latent_dim < 2 {
            return Err(DataError::Config(format!("latent dimension must be >= 2, got {}", self.latent_dim)));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(DataError::Config(format!("noise level must be >= 0, got {}", self.noise_level)));
        }
        if self.poi_categories == 0 || self.landuse_categories == 0 {
            return Err(DataError::Config("category counts must be positive".into()));
        }
        Ok(())
    }
}

/// Synthetic dataset plus the planted factors it was drawn from.
#[derive(Debug, Clone)]
pub struct Planted {
    pub dataset: RegionDataset,
    /// `n × q` latent factors.
    pub latent: Tensor,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Planted, DataError> {
    cfg.validate()?;
    Ok(generate_unchecked(cfg))
}

/// Skips the size checks; used for the tiny gradient-check fixture.
pub(crate) fn generate_unchecked(cfg: &SynthConfig) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, q) = (cfg.n, cfg.latent_dim);
    let latent: Vec<f64> = (0..n * q).map(|_| StandardNormal.sample(&mut rng)).collect();
    let u = |i: usize| &latent[i * q..(i + 1) * q];
    let sq = |i: usize| u(i).iter().map(|a| a * a).sum::<f64>();

    let mut mobility = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let affinity: f64 = u(i).iter().zip(u(j)).map(|(a, b)| a * b).sum();
            let log_rate = MOBILITY_SHARPNESS * (affinity - 0.5 * sq(i) - 0.5 * sq(j));
            mobility[i * n + j] = poisson(MOBILITY_SCALE * log_rate.exp(), &mut rng);
        }
    }

    let counts = |f: usize, scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let proj: Vec<f64> = (0..f * q).map(|_| StandardNormal.sample(rng)).collect();
        let offset: Vec<f64> = (0..f).map(|_| StandardNormal.sample(rng)).collect();
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for c in 0..f {
                let z: f64 = proj[c * q..(c + 1) * q].iter().zip(u(i)).map(|(a, b)| a * b).sum::<f64>() + offset[c];
                out[i * f + c] = poisson(scale * softplus(z), rng);
            }
        }
        out
    };
    let poi = counts(cfg.poi_categories, POI_SCALE, &mut rng);
    let landuse = counts(cfg.landuse_categories, LANDUSE_SCALE, &mut rng);

    let noise = Normal::new(0.0, TARGET_SPREAD * cfg.noise_level).expect("validated noise level");
    let mut targets = BTreeMap::new();
    for task in TARGET_TASKS {
        let w: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let signal: f64 = w.iter().zip(u(i)).map(|(a, b)| a * b).sum::<f64>() / norm;
                let eps = if cfg.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (TARGET_MEAN + TARGET_SPREAD * signal + eps).max(0.0)
            })
            .collect();
        targets.insert(task.to_string(), y);
    }

    let region_ids: Vec<String> = (0..n).map(|i| format!("r{i:04}")).collect();
    let views = vec![
        ViewMatrix {
            name: "mobility".into(),
            kind: ViewKind::Mobility,
            matrix: Tensor::new(&[n, n], mobility).expect("n×n"),
            category_labels: region_ids.clone(),
        },
        ViewMatrix {
            name: "poi".into(),
            kind: ViewKind::CategoricalCount,
            matrix: Tensor::new(&[n, cfg.poi_categories], poi).expect("n×f"),
            category_labels: (0..cfg.poi_categories).map(|c| format!("poi_{c:02}")).collect(),
        },
        ViewMatrix {
            name: "landuse".into(),
            kind: ViewKind::CategoricalCount,
            matrix: Tensor::new(&[n, cfg.landuse_categories], landuse).expect("n×f"),
            category_labels: (0..cfg.landuse_categories).map(|c| format!("landuse_{c:02}")).collect(),
        },
    ];
    Planted {
        dataset: RegionDataset { region_ids, views, targets },
        latent: Tensor::new(&[n, q], latent).expect("n×q"),
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Rates below this draw zero; `rand_distr`'s sampler returns -1 once `exp(-rate)` rounds to 1.
const MIN_POISSON_RATE: f64 = 1e-12;

fn poisson(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    if rate >= MIN_POISSON_RATE && rate.is_finite() {
        Poisson::new(rate).expect("positive rate").sample(rng)
    } else {
        0.0
    }
}

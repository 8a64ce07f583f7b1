//! Full-batch training with Adam, checkpoints, and embedding export.

mod adam;
mod checkpoint;
mod export;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FILE, CHECKPOINT_VERSION, SIDECAR_FILE};
pub use export::{config_hash, export_embeddings, read_embeddings, EmbeddingMeta, EMBEDDINGS_FILE, EMBEDDINGS_META_FILE};

use crate::data::RegionDataset;
use crate::error::{ModelError, NumericsError, TrainError};
use crate::layers::Graph;
use crate::model::{ModelConfig, PreparedData, RegionModel};
use crate::numerics::{Mode, Tensor};
use crate::objective::LossWeights;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Epoch interval at which the epoch callback is told to checkpoint; 0 disables.
    pub checkpoint_every: usize,
    pub precision: Precision,
    /// L2 penalty added to the gradient; 0 disables.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2500,
            learning_rate: 5e-4,
            adam: AdamConfig::default(),
            seed: 0,
            loss_weights: LossWeights::default(),
            checkpoint_every: 0,
            precision: Precision::F64,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        if self.loss_weights.0.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(TrainError::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight decay must be >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RegionModel,
    pub log: Vec<EpochRecord>,
    /// Evaluation-mode embeddings after the last step.
    pub embeddings: Tensor,
}

/// What the epoch callback is asked to do besides logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochEvent {
    Logged,
    CheckpointDue,
}

/// Trains from scratch. `on_epoch` sees each record after its update step.
pub fn train<F>(
    dataset: &RegionDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochRecord, &RegionModel, EpochEvent) -> Result<(), TrainError>,
{
    train_cfg.validate()?;
    dataset.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let data = PreparedData::new(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut model = RegionModel::new(model_cfg.clone(), data.n(), data.schema.clone(), &mut rng)?;
    let mut state = AdamState::new(&model.store);
    let mut log = Vec::with_capacity(train_cfg.epochs);

    for epoch in 1..=train_cfg.epochs {
        let record = train_epoch(&mut model, &data, train_cfg, &mut state, &mut rng, epoch)?;
        let event = if train_cfg.checkpoint_every > 0 && epoch % train_cfg.checkpoint_every == 0 {
            EpochEvent::CheckpointDue
        } else {
            EpochEvent::Logged
        };
        on_epoch(&record, &model, event)?;
        log.push(record);
    }
    let embeddings = model.embed(&data)?;
    Ok(TrainOutcome { model, log, embeddings })
}

fn non_finite(epoch: usize, detail: impl Into<String>) -> TrainError {
    TrainError::NonFiniteLoss { epoch, detail: detail.into() }
}

fn train_epoch(
    model: &mut RegionModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    state: &mut AdamState,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochRecord, TrainError> {
    let wrap = |e: NumericsError| match e {
        NumericsError::NonFinite { .. } => non_finite(epoch, e.to_string()),
        other => TrainError::Model(ModelError::Numerics(other)),
    };
    let (record, grads, tape) = {
        let mut g = Graph::new(&model.store, Mode::Train, rng);
        let h = model.forward(&mut g, data).map_err(wrap)?;
        let out = model.loss(&mut g, h, data, &cfg.loss_weights).map_err(wrap)?;
        let terms: BTreeMap<String, f64> = out.terms.iter().map(|(n, v)| (n.clone(), g.value(*v).item())).collect();
        let total = g.value(out.total).item();
        if !total.is_finite() {
            return Err(non_finite(epoch, format!("terms {terms:?}")));
        }
        let alpha = g.diag.alpha.map(|a| g.value(a).data().to_vec()).unwrap_or_default();
        let beta = g.diag.beta.map(|b| g.value(b).item()).unwrap_or(f64::NAN);
        let grads = g.tape.backward(out.total).map_err(wrap)?;
        (EpochRecord { epoch, total, terms, alpha, beta }, grads, g.tape)
    };
    model.store.zero_grads();
    model.store.accumulate_grads(&tape, &grads);
    adjust_gradients(model, cfg);
    adam_step(&mut model.store, state, cfg.learning_rate, &cfg.adam);
    Ok(record)
}

fn adjust_gradients(model: &mut RegionModel, cfg: &TrainConfig) {
    if cfg.weight_decay > 0.0 {
        for p in model.store.iter_mut() {
            let theta = p.value.data().to_vec();
            for (g, w) in p.grad.data_mut().iter_mut().zip(theta) {
                *g += cfg.weight_decay * w;
            }
        }
    }
    if let Some(limit) = cfg.grad_clip {
        let norm = model.store.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum::<f64>().sqrt();
        if norm > limit {
            let s = limit / norm;
            for p in model.store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
}

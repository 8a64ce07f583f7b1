//! The full region-embedding network: per-view IntraAFL stacks, InterAFL,
//! the β mix, ViewFusion, RegionFusion, and the loss heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dafusion::{region_fusion_forward, view_fusion, RegionFusionLayer, ViewFusionParams};
use crate::data::{RegionDataset, ViewKind, ViewSchema};
use crate::error::{ModelError, NumericsError};
use crate::halearning::{
    combine_views, inter_afl_forward, intra_afl_forward, InterAflStack, IntraAflStack, RegionSaShape, ViewCombiner,
};
use crate::layers::Graph;
use crate::numerics::{finite_difference_check, FdConfig, FdProbe, FdReport, Mode, Tensor, Var};
use crate::objective::{total_loss, LossHeads, LossWeights, ViewTarget};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub width: usize,
    /// ViewFusion projection width `d′`.
    pub fusion_latent: usize,
    /// InterAFL memory size `d_m`.
    pub memory_size: usize,
    /// RegionSA convolution channels `c`.
    pub channels: usize,
    pub heads: usize,
    pub intra_layers: usize,
    pub inter_layers: usize,
    pub fusion_layers: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub conv_size: usize,
    /// Feed-forward hidden width; `2d` when absent.
    pub ffn_hidden: Option<usize>,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 144,
            fusion_latent: 64,
            memory_size: 72,
            channels: 32,
            heads: 4,
            intra_layers: 3,
            inter_layers: 3,
            fusion_layers: 3,
            dropout: 0.1,
            leaky_slope: 0.2,
            conv_size: 3,
            ffn_hidden: None,
            layer_norm_eps: 1e-8,
        }
    }
}

impl ModelConfig {
    /// Configuration used by the gradient check: small enough to probe exhaustively.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            fusion_latent: 4,
            memory_size: 4,
            channels: 2,
            heads: 2,
            intra_layers: 1,
            inter_layers: 1,
            fusion_layers: 1,
            ..Self::default()
        }
    }

    pub fn hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.width)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("width", self.width),
            ("fusion_latent", self.fusion_latent),
            ("memory_size", self.memory_size),
            ("channels", self.channels),
            ("heads", self.heads),
            ("inter_layers", self.inter_layers),
            ("fusion_layers", self.fusion_layers),
            ("conv_size", self.conv_size),
            ("ffn_hidden", self.hidden()),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.conv_size.is_multiple_of(2) {
            return Err(ModelError::Config(format!("conv_size must be odd, got {}", self.conv_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::Config(format!("leaky_slope must be in (0, 1), got {}", self.leaky_slope)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ModelError::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Model inputs and loss targets derived once from a dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub schema: Vec<ViewSchema>,
    /// Per-view network input; the mobility view is `log1p`-transformed.
    pub inputs: Vec<Tensor>,
    pub targets: Vec<ViewTarget>,
}

impl PreparedData {
    pub fn new(dataset: &RegionDataset) -> Result<Self, ModelError> {
        let mut inputs = Vec::with_capacity(dataset.views.len());
        let mut targets = Vec::with_capacity(dataset.views.len());
        for view in &dataset.views {
            inputs.push(match view.kind {
                ViewKind::Mobility => view.matrix.map(f64::ln_1p),
                ViewKind::CategoricalCount => view.matrix.clone(),
            });
            targets.push(ViewTarget::for_view(view)?);
        }
        Ok(Self { schema: dataset.schema(), inputs, targets })
    }

    pub fn n(&self) -> usize {
        self.inputs.first().map(|t| t.rows()).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct RegionModel {
    pub config: ModelConfig,
    pub regions: usize,
    pub schema: Vec<ViewSchema>,
    pub store: ParamStore,
    pub intra: Vec<IntraAflStack>,
    pub inter: InterAflStack,
    pub combiner: ViewCombiner,
    pub view_fusion: ViewFusionParams,
    pub region_fusion: Vec<RegionFusionLayer>,
    pub heads: LossHeads,
}

/// Scalar loss and its unweighted per-view terms.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub terms: Vec<(String, Var)>,
}

impl RegionModel {
    /// Parameters are created in a fixed order from `rng`.
    pub fn new(
        config: ModelConfig,
        regions: usize,
        schema: Vec<ViewSchema>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if schema.is_empty() {
            return Err(ModelError::Config("at least one view is required".into()));
        }
        if regions < 2 {
            return Err(ModelError::Config(format!("need at least 2 regions, got {regions}")));
        }
        let d = config.width;
        let shape = RegionSaShape {
            regions,
            width: d,
            heads: config.heads,
            channels: config.channels,
            conv_size: config.conv_size,
            hidden: config.hidden(),
            dropout: config.dropout,
            eps: config.layer_norm_eps,
        };
        let mut store = ParamStore::new();
        let intra = schema
            .iter()
            .map(|v| IntraAflStack::new(&mut store, &format!("intra.{}", v.name), v.features, config.intra_layers, shape, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let inter = InterAflStack::new(&mut store, "inter", d, config.memory_size, config.inter_layers, rng)?;
        let combiner = ViewCombiner::new(&mut store, "mix")?;
        let view_fusion =
            ViewFusionParams::new(&mut store, "view_fusion", d, config.fusion_latent, config.leaky_slope, rng)?;
        let region_fusion = (0..config.fusion_layers)
            .map(|l| {
                RegionFusionLayer::new(
                    &mut store,
                    &format!("region_fusion.layer{l}"),
                    d,
                    config.heads,
                    config.hidden(),
                    config.dropout,
                    config.layer_norm_eps,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let kinds: Vec<(String, ViewKind)> = schema.iter().map(|v| (v.name.clone(), v.kind)).collect();
        let heads = LossHeads::new(&mut store, &kinds, d, rng)?;
        Ok(Self { config, regions, schema, store, intra, inter, combiner, view_fusion, region_fusion, heads })
    }

    pub fn check_data(&self, data: &PreparedData) -> Result<(), ModelError> {
        if data.schema != self.schema || data.n() != self.regions {
            return Err(ModelError::Mismatch(format!(
                "model expects n={} with views {:?}, data has n={} with views {:?}",
                self.regions,
                self.schema,
                data.n(),
                data.schema
            )));
        }
        Ok(())
    }

    /// Runs the network up to the region embeddings `H`, recording
    /// intermediates in `g.diag`.
    pub fn forward(&self, g: &mut Graph, data: &PreparedData) -> Result<Var, NumericsError> {
        let mut z_sv = Vec::with_capacity(self.intra.len());
        g.diag.intra.clear();
        for (stack, input) in self.intra.iter().zip(&data.inputs) {
            let x = g.tape.constant(input.clone())?;
            let (z, records) = intra_afl_forward(g, x, stack)?;
            z_sv.push(z);
            g.diag.intra.push(records);
        }
        let stacked = g.tape.stack(&z_sv, 1)?;
        let mixed = inter_afl_forward(g, stacked, &self.inter)?;
        let z_cv = (0..z_sv.len()).map(|j| g.tape.select(mixed, 1, j)).collect::<Result<Vec<_>, _>>()?;
        let beta = self.combiner.beta(g)?;
        let views = combine_views(g, &z_sv, &z_cv, beta)?;
        let (z_tilde, alpha) = view_fusion(g, &views, &self.view_fusion)?;
        let (h, records) = region_fusion_forward(g, z_tilde, &self.region_fusion)?;

        g.diag.fusion = records;
        g.diag.z_sv = z_sv;
        g.diag.z_cv = z_cv;
        g.diag.z_views = views;
        g.diag.z_tilde = Some(z_tilde);
        g.diag.alpha = Some(alpha);
        g.diag.beta = Some(beta);
        Ok(h)
    }

    pub fn loss(&self, g: &mut Graph, h: Var, data: &PreparedData, weights: &LossWeights) -> Result<LossOutput, NumericsError> {
        let (total, terms) = total_loss(g, h, &data.targets, &self.heads, weights)?;
        Ok(LossOutput { total, terms })
    }

    /// Embeddings in evaluation mode (no dropout).
    pub fn embed(&self, data: &PreparedData) -> Result<Tensor, ModelError> {
        self.check_data(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&self.store, Mode::Eval, &mut rng);
        let h = self.forward(&mut g, data)?;
        Ok(g.tape.value(h).clone())
    }

    /// Loss value, with per-term breakdown, in evaluation mode.
    pub fn eval_loss(&self, data: &PreparedData, weights: &LossWeights) -> Result<(f64, Vec<(String, f64)>), ModelError> {
        self.check_data(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&self.store, Mode::Eval, &mut rng);
        let h = self.forward(&mut g, data)?;
        let out = self.loss(&mut g, h, data, weights)?;
        let terms = out.terms.iter().map(|(n, v)| (n.clone(), g.value(*v).item())).collect();
        Ok((g.value(out.total).item(), terms))
    }

    /// Fills every parameter's `.grad` with the evaluation-mode loss gradient.
    pub fn compute_gradients(&mut self, data: &PreparedData, weights: &LossWeights) -> Result<f64, ModelError> {
        self.check_data(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, grads, tape) = {
            let mut g = Graph::new(&self.store, Mode::Eval, &mut rng);
            let h = self.forward(&mut g, data)?;
            let out = self.loss(&mut g, h, data, weights)?;
            let grads = g.tape.backward(out.total)?;
            (g.value(out.total).item(), grads, g.tape)
        };
        self.store.zero_grads();
        self.store.accumulate_grads(&tape, &grads);
        Ok(loss)
    }

    /// Central finite-difference check of every parameter group on `data`.
    pub fn gradient_check(&mut self, data: &PreparedData, weights: &LossWeights, cfg: &FdConfig) -> Result<FdReport, ModelError> {
        self.compute_gradients(data, weights)?;
        let mut store = std::mem::take(&mut self.store);
        let result = finite_difference_check(
            &mut store,
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut g = Graph::new(s, Mode::Eval, &mut rng);
                let h = self.forward(&mut g, data)?;
                let out = self.loss(&mut g, h, data, weights)?;
                Ok(FdProbe { loss: g.value(out.total).item(), kink_signature: g.tape.kink_signature() })
            },
            cfg,
        );
        self.store = store;
        Ok(result?)
    }
}

/// Gradient check on the fixed tiny configuration (n=8, three views).
pub fn tiny_gradient_check(seed: u64, cfg: &FdConfig) -> Result<FdReport, ModelError> {
    let planted = crate::data::generate_unchecked(&crate::data::SynthConfig {
        n: 8,
        latent_dim: 2,
        poi_categories: 5,
        landuse_categories: 4,
        noise_level: 0.1,
        seed,
    });
    let data = PreparedData::new(&planted.dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = RegionModel::new(ModelConfig::tiny(), data.n(), data.schema.clone(), &mut rng)?;
    model.gradient_check(&data, &LossWeights::default(), cfg)
}

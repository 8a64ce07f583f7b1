//! Hybrid attentive feature learning.
//!
//! Each view runs through its own IntraAFL stack: an input projection followed
//! by RegionSA encoder layers, where RegionSA adds a convolutional correlation
//! path on top of multi-head self-attention. The per-view outputs `Z_sv` are
//! then stacked into `n×v×d` and passed through InterAFL, an external-attention
//! stack whose first map is a learnable memory of `d_m` representative
//! embeddings. A single learned `β = sigmoid(b)` mixes the two results.

use rand::Rng;

use crate::error::{ModelError, NumericsError};
use crate::layers::{AttentionRecord, EncoderTail, Graph, Linear, MultiHeadAttention};
use crate::numerics::{ParamId, Tensor, Var};
use crate::params::ParamStore;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone)]
pub struct RegionSaLayer {
    pub attention: MultiHeadAttention,
    /// `c×1×k×k`.
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub conv_size: usize,
    /// Row-wise map `n → d` applied to the channel-averaged correlation matrix.
    pub correlation: Linear,
    pub tail: EncoderTail,
}

#[derive(Debug, Clone, Copy)]
pub struct RegionSaShape {
    pub regions: usize,
    pub width: usize,
    pub heads: usize,
    pub channels: usize,
    pub conv_size: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub eps: f64,
}

impl RegionSaLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        s: RegionSaShape,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        if s.conv_size.is_multiple_of(2) {
            return Err(ModelError::Config(format!("conv kernel must be odd, got {}", s.conv_size)));
        }
        let attention = MultiHeadAttention::new(store, &format!("{name}.attn"), s.width, s.heads, rng)?;
        let k2 = s.conv_size * s.conv_size;
        let conv_kernel =
            store.add_glorot(format!("{name}.conv.kernel"), &[s.channels, 1, s.conv_size, s.conv_size], k2, s.channels * k2, rng)?;
        let conv_bias = store.add(format!("{name}.conv.bias"), Tensor::zeros(&[s.channels]))?;
        let correlation = Linear::new(store, &format!("{name}.corr_mlp"), s.regions, s.width, true, rng)?;
        let tail = EncoderTail::new(store, name, s.width, s.hidden, s.dropout, s.eps, rng)?;
        Ok(Self { attention, conv_kernel, conv_bias, conv_size: s.conv_size, correlation, tail })
    }
}

/// RegionSA output `C = C_V + C_A` with its attention record.
pub fn region_sa(g: &mut Graph, x: Var, layer: &RegionSaLayer) -> Result<(Var, AttentionRecord)> {
    let mut record = layer.attention.forward(g, x)?;
    let n = g.tape.shape(record.mean)[0];
    let pad = (layer.conv_size - 1) / 2;

    let a = g.tape.reshape(record.mean, &[1, n, n])?;
    let kernel = g.param(layer.conv_kernel)?;
    let bias = g.param(layer.conv_bias)?;
    let conv = g.tape.conv2d(a, kernel, Some(bias), pad, 1)?;
    let a_prime = g.tape.avg_pool2d(conv, 3, 1, 1)?;
    let normalized = g.tape.softmax(a_prime, 2)?;
    let weighted = g.tape.mul(a_prime, normalized)?;
    let averaged = g.tape.mean_axis(weighted, 0)?;
    let c_a = layer.correlation.forward(g, averaged)?;
    let c_a = g.tape.relu(c_a)?;
    let c = g.tape.add(record.values, c_a)?;

    record.correlation = Some(a_prime);
    Ok((c, record))
}

#[derive(Debug, Clone)]
pub struct IntraAflStack {
    pub projection: Linear,
    pub layers: Vec<RegionSaLayer>,
}

impl IntraAflStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        layer_count: usize,
        shape: RegionSaShape,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        let projection = Linear::new(store, &format!("{name}.input"), features, shape.width, true, rng)?;
        let layers = (0..layer_count)
            .map(|l| RegionSaLayer::new(store, &format!("{name}.layer{l}"), shape, rng))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { projection, layers })
    }
}

/// Input projection followed by every RegionSA encoder layer; returns `Z_sv`.
pub fn intra_afl_forward(g: &mut Graph, input: Var, stack: &IntraAflStack) -> Result<(Var, Vec<AttentionRecord>)> {
    let mut z = stack.projection.forward(g, input)?;
    let mut records = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        let (c, record) = region_sa(g, z, layer)?;
        z = layer.tail.forward(g, z, c)?;
        records.push(record);
    }
    Ok((z, records))
}

#[derive(Debug, Clone)]
pub struct InterAflLayer {
    /// `d×d_m`: the memory unit.
    pub memory: ParamId,
    /// `d_m×d`.
    pub readout: ParamId,
}

#[derive(Debug, Clone)]
pub struct InterAflStack {
    pub layers: Vec<InterAflLayer>,
}

impl InterAflStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        memory_size: usize,
        layer_count: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        if memory_size == 0 {
            return Err(ModelError::Config("memory size must be >= 1".into()));
        }
        let layers = (0..layer_count)
            .map(|l| {
                Ok(InterAflLayer {
                    memory: store.add_glorot(format!("{name}.layer{l}.memory"), &[width, memory_size], width, memory_size, rng)?,
                    readout: store.add_glorot(format!("{name}.layer{l}.readout"), &[memory_size, width], memory_size, width, rng)?,
                })
            })
            .collect::<std::result::Result<_, ModelError>>()?;
        Ok(Self { layers })
    }
}

/// External attention over an `n×v×d` stack: memory projection, softmax over the
/// view axis, L1 normalization over the memory axis, readout back to `d`.
pub fn inter_afl_forward(g: &mut Graph, z_sv: Var, stack: &InterAflStack) -> Result<Var> {
    let (n, v, d) = match g.tape.shape(z_sv) {
        [n, v, d] => (*n, *v, *d),
        s => return Err(NumericsError::Shape(format!("inter_afl: expected n×v×d, got {s:?}"))),
    };
    let mut z = z_sv;
    for layer in &stack.layers {
        let memory = g.param(layer.memory)?;
        let readout = g.param(layer.readout)?;
        let dm = g.tape.shape(memory)[1];
        let flat = g.tape.reshape(z, &[n * v, d])?;
        let scores = g.tape.matmul(flat, memory)?;
        let scores = g.tape.reshape(scores, &[n, v, dm])?;
        let attn = g.tape.softmax(scores, 1)?;
        let attn = g.tape.l1_normalize(attn, 2)?;
        let attn = g.tape.reshape(attn, &[n * v, dm])?;
        let out = g.tape.matmul(attn, readout)?;
        z = g.tape.reshape(out, &[n, v, d])?;
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct ViewCombiner {
    /// Raw scalar `b`; `β = sigmoid(b)`.
    pub logit: ParamId,
}

impl ViewCombiner {
    pub fn new(store: &mut ParamStore, name: &str) -> std::result::Result<Self, ModelError> {
        Ok(Self { logit: store.add(format!("{name}.logit"), Tensor::scalar(0.0))? })
    }

    pub fn beta(&self, g: &mut Graph) -> Result<Var> {
        let b = g.param(self.logit)?;
        g.tape.sigmoid(b)
    }
}

/// `Zʲ = β Zʲ_sv + (1 − β) Zʲ_cv` for every view.
pub fn combine_views(g: &mut Graph, z_sv: &[Var], z_cv: &[Var], beta: Var) -> Result<Vec<Var>> {
    if z_sv.len() != z_cv.len() {
        return Err(NumericsError::Shape(format!("combine_views: {} vs {} views", z_sv.len(), z_cv.len())));
    }
    let rest = g.tape.one_minus(beta)?;
    z_sv.iter()
        .zip(z_cv)
        .map(|(&s, &c)| {
            let a = g.tape.scale_by(s, beta)?;
            let b = g.tape.scale_by(c, rest)?;
            g.tape.add(a, b)
        })
        .collect()
}

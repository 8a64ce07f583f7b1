//! Building blocks shared by the attention stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, NumericsError};
use crate::numerics::{Mode, ParamId, Tape, Tensor, Var};
use crate::params::{Binder, ParamStore};

type Result<T> = std::result::Result<T, NumericsError>;

/// Intermediate values kept for invariant checks and logging.
#[derive(Debug, Default, Clone)]
pub struct Diagnostics {
    /// `[view][layer]` attention records of each IntraAFL RegionSA layer.
    pub intra: Vec<Vec<AttentionRecord>>,
    /// Per-layer RegionFusion attention.
    pub fusion: Vec<AttentionRecord>,
    pub z_sv: Vec<Var>,
    pub z_cv: Vec<Var>,
    pub z_views: Vec<Var>,
    pub z_tilde: Option<Var>,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Row-stochastic `n×n` matrix per head.
    pub heads: Vec<Var>,
    /// Mean over heads.
    pub mean: Var,
    /// Attention output before the residual (`C_V`).
    pub values: Var,
    /// `A′ = AvgPool(Conv2D(A))`, `c×n×n`, RegionSA only.
    pub correlation: Option<Var>,
}

/// One forward evaluation: the tape plus everything needed to grow it.
pub struct Graph<'s, 'r> {
    pub tape: Tape,
    binder: Binder<'s>,
    pub mode: Mode,
    rng: &'r mut ChaCha8Rng,
    pub diag: Diagnostics,
}

impl<'s, 'r> Graph<'s, 'r> {
    pub fn new(store: &'s ParamStore, mode: Mode, rng: &'r mut ChaCha8Rng) -> Self {
        Self { tape: Tape::new(), binder: Binder::new(store), mode, rng, diag: Diagnostics::default() }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.binder.var(&mut self.tape, id)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.binder.store()
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.mode, &mut *self.rng)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        let weight = store.add_glorot(format!("{name}.weight"), &[fan_in, fan_out], fan_in, fan_out, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = self.bias.map(|b| g.param(b)).transpose()?;
        g.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> std::result::Result<Self, ModelError> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
        let gain = g.param(self.gain)?;
        let shift = g.param(self.shift)?;
        g.tape.layer_norm(x, gain, shift, eps)
    }
}

/// Two-layer perceptron `d → hidden → d` with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.fc1"), width, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.fc2"), hidden, width, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.tape.relu(h)?;
        self.outer.forward(g, h)
    }
}

/// Multi-head scaled dot-product self-attention over the rows of an `n×d` input.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(ModelError::Config(format!("width {width} not divisible by {heads} heads")));
        }
        let mut square = |suffix: &str| store.add_glorot(format!("{name}.{suffix}"), &[width, width], width, width, rng);
        Ok(Self { query: square("wq")?, key: square("wk")?, value: square("wv")?, output: square("wo")?, heads })
    }

    /// Returns the recombined head outputs and the per-head attention matrices.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<AttentionRecord> {
        let width = g.tape.shape(x)[1];
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let wq = g.param(self.query)?;
        let wk = g.param(self.key)?;
        let wv = g.param(self.value)?;
        let q = g.tape.matmul(x, wq)?;
        let k = g.tape.matmul(x, wk)?;
        let v = g.tape.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.tape.narrow(q, 1, h * head_dim, head_dim)?;
            let kh = g.tape.narrow(k, 1, h * head_dim, head_dim)?;
            let vh = g.tape.narrow(v, 1, h * head_dim, head_dim)?;
            let logits = g.tape.matmul_nt(qh, kh)?;
            let logits = g.tape.scale(logits, scale)?;
            let attn = g.tape.softmax(logits, 1)?;
            outputs.push(g.tape.matmul(attn, vh)?);
            heads.push(attn);
        }
        let mean = if heads.len() == 1 {
            heads[0]
        } else {
            let stacked = g.tape.stack(&heads, 0)?;
            g.tape.mean_axis(stacked, 0)?
        };
        let joined = if outputs.len() == 1 { outputs[0] } else { g.tape.concat(&outputs, 1)? };
        let wo = g.param(self.output)?;
        let values = g.tape.matmul(joined, wo)?;
        Ok(AttentionRecord { heads, mean, values, correlation: None })
    }
}

/// Residual, dropout, and layer-norm wrapping shared by every encoder layer:
/// `z' = LN(x + Dropout(c))`, `out = LN(z' + Dropout(FFN(z')))`.
#[derive(Debug, Clone)]
pub struct EncoderTail {
    pub norm1: LayerNormParams,
    pub ffn: FeedForward,
    pub norm2: LayerNormParams,
    pub dropout: f64,
    pub eps: f64,
}

impl EncoderTail {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        dropout: f64,
        eps: f64,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        Ok(Self {
            norm1: LayerNormParams::new(store, &format!("{name}.ln1"), width)?,
            ffn: FeedForward::new(store, &format!("{name}.mlp"), width, hidden, rng)?,
            norm2: LayerNormParams::new(store, &format!("{name}.ln2"), width)?,
            dropout,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, c: Var) -> Result<Var> {
        let c = g.dropout(c, self.dropout)?;
        let z = g.tape.add(x, c)?;
        let z = self.norm1.forward(g, z, self.eps)?;
        let m = self.ffn.forward(g, z)?;
        let m = g.dropout(m, self.dropout)?;
        let out = g.tape.add(z, m)?;
        self.norm2.forward(g, out, self.eps)
    }
}

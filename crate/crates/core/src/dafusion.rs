//! Dual attentive fusion: view weights from pairwise view scores, then a
//! self-attention encoder across regions.

use rand::Rng;

use crate::error::{ModelError, NumericsError};
use crate::layers::{AttentionRecord, EncoderTail, Graph, MultiHeadAttention};
use crate::numerics::{ParamId, Var};
use crate::params::ParamStore;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone)]
pub struct ViewFusionParams {
    /// `d×d′` (applied as `Z · W`).
    pub projection: ParamId,
    /// `2d′` attention vector; the first half scores view `j`, the second view `k`.
    pub attention: ParamId,
    pub slope: f64,
}

impl ViewFusionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        latent: usize,
        slope: f64,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        if latent == 0 {
            return Err(ModelError::Config("view-fusion latent width must be >= 1".into()));
        }
        let projection = store.add_glorot(format!("{name}.wf"), &[width, latent], width, latent, rng)?;
        let attention = store.add_glorot(format!("{name}.a"), &[2 * latent], 2 * latent, 1, rng)?;
        Ok(Self { projection, attention, slope })
    }
}

/// Returns `(Z̃, α)`.
///
/// Scores are `a_i^{jk} = LeakyReLU(aᵀ[W zʲᵢ ‖ W zᵏᵢ])` for every ordered view
/// pair including `k = j`; `α = softmax_j((1/n) Σᵢ Σₖ a_i^{jk})`.
pub fn view_fusion(g: &mut Graph, views: &[Var], p: &ViewFusionParams) -> Result<(Var, Var)> {
    let first = *views.first().ok_or_else(|| NumericsError::Invalid("view_fusion: no views".into()))?;
    let n = g.tape.shape(first)[0];
    let w = g.param(p.projection)?;
    let a = g.param(p.attention)?;
    let latent = g.tape.shape(w)[1];
    let a_self = g.tape.narrow(a, 0, 0, latent)?;
    let a_self = g.tape.reshape(a_self, &[latent, 1])?;
    let a_other = g.tape.narrow(a, 0, latent, latent)?;
    let a_other = g.tape.reshape(a_other, &[latent, 1])?;

    let mut left = Vec::with_capacity(views.len());
    let mut right = Vec::with_capacity(views.len());
    for &z in views {
        let projected = g.tape.matmul(z, w)?;
        left.push(g.tape.matmul(projected, a_self)?);
        right.push(g.tape.matmul(projected, a_other)?);
    }
    let mut scores = Vec::with_capacity(views.len());
    for &l in &left {
        let mut pairs = Vec::with_capacity(views.len());
        for &r in &right {
            let s = g.tape.add(l, r)?;
            pairs.push(g.tape.leaky_relu(s, p.slope)?);
        }
        let all = g.tape.concat(&pairs, 1)?;
        let total = g.tape.sum_all(all)?;
        scores.push(g.tape.scale(total, 1.0 / n as f64)?);
    }
    let scores = g.tape.concat(&scores, 0)?;
    let alpha = g.tape.softmax(scores, 0)?;

    let mut fused = None;
    for (j, &z) in views.iter().enumerate() {
        let weight = g.tape.index(alpha, j)?;
        let term = g.tape.scale_by(z, weight)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.tape.add(acc, term)?,
        });
    }
    Ok((fused.expect("at least one view"), alpha))
}

#[derive(Debug, Clone)]
pub struct RegionFusionLayer {
    pub attention: MultiHeadAttention,
    pub tail: EncoderTail,
}

impl RegionFusionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        dropout: f64,
        eps: f64,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            tail: EncoderTail::new(store, name, width, hidden, dropout, eps, rng)?,
        })
    }
}

/// Stacked self-attention encoder over the fused region embeddings; returns `H`.
pub fn region_fusion_forward(g: &mut Graph, z: Var, layers: &[RegionFusionLayer]) -> Result<(Var, Vec<AttentionRecord>)> {
    if layers.is_empty() {
        return Err(NumericsError::Invalid("region fusion needs at least one layer".into()));
    }
    let mut h = z;
    let mut records = Vec::with_capacity(layers.len());
    for layer in layers {
        let record = layer.attention.forward(g, h)?;
        h = layer.tail.forward(g, h, record.values)?;
        records.push(record);
    }
    Ok((h, records))
}

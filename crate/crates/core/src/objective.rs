//! Training objective: feature-similarity terms for count views and a
//! transition cross-entropy term for the mobility view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ViewKind, ViewMatrix};
use crate::error::{ModelError, NumericsError};
use crate::layers::{Graph, Linear};
use crate::numerics::{cosine_similarity, Tensor, Var, DEFAULT_EPS};
use crate::params::ParamStore;

type Result<T> = std::result::Result<T, NumericsError>;

/// Row-normalized (`source`) and column-normalized (`destination`) trip tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTables {
    /// `p_s[i][k] = m_ik / Σ_l m_il`.
    pub source: Tensor,
    /// `p_d[i][k] = m_ik / Σ_l m_lk`.
    pub destination: Tensor,
    /// Rows of `M` with no outflow; their `p_s` rows are zero.
    pub empty_sources: Vec<usize>,
    /// Columns of `M` with no inflow; their `p_d` columns are zero.
    pub empty_destinations: Vec<usize>,
}

impl TransitionTables {
    /// `Σ_i H(p_s[i,·]) + Σ_k H(p_d[·,k])`, the minimum of the mobility loss.
    pub fn entropy_floor(&self) -> f64 {
        let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
        self.source.data().iter().map(|&p| h(p)).sum::<f64>()
            + self.destination.data().iter().map(|&p| h(p)).sum::<f64>()
    }
}

pub fn mobility_transitions(m: &Tensor) -> std::result::Result<TransitionTables, NumericsError> {
    let (n, cols) = match m.shape() {
        [r, c] => (*r, *c),
        s => return Err(NumericsError::Shape(format!("mobility matrix must be 2-D, got {s:?}"))),
    };
    if n != cols {
        return Err(NumericsError::Shape(format!("mobility matrix must be square, got {n}x{cols}")));
    }
    if m.data().iter().any(|&v| v < 0.0) {
        return Err(NumericsError::Invalid("mobility matrix has negative entries".into()));
    }
    let row_sums: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum()).collect();
    let col_sums: Vec<f64> = (0..n).map(|k| (0..n).map(|i| m.get2(i, k)).sum()).collect();
    let mut source = vec![0.0; n * n];
    let mut destination = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let v = m.get2(i, k);
            if row_sums[i] > 0.0 {
                source[i * n + k] = v / row_sums[i];
            }
            if col_sums[k] > 0.0 {
                destination[i * n + k] = v / col_sums[k];
            }
        }
    }
    let empty_sources: Vec<usize> = (0..n).filter(|&i| row_sums[i] == 0.0).collect();
    let empty_destinations: Vec<usize> = (0..n).filter(|&k| col_sums[k] == 0.0).collect();
    if !empty_sources.is_empty() || !empty_destinations.is_empty() {
        log::warn!(
            "mobility: {} region(s) without outflow, {} without inflow; their loss terms are zero",
            empty_sources.len(),
            empty_destinations.len()
        );
    }
    Ok(TransitionTables {
        source: Tensor::new(&[n, n], source)?,
        destination: Tensor::new(&[n, n], destination)?,
        empty_sources,
        empty_destinations,
    })
}

/// `n×n` matrix of `cos(xᵢ, xₖ)` over the rows of a view.
pub fn cosine_matrix(x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            let c = cosine_similarity(x.row(i), x.row(k), DEFAULT_EPS);
            out[i * n + k] = c;
            out[k * n + i] = c;
        }
    }
    Tensor::new(&[n, n], out).expect("n×n")
}

/// Precomputed, gradient-free supervision for one view.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewTarget {
    Similarity(Tensor),
    Transitions(TransitionTables),
}

impl ViewTarget {
    pub fn for_view(view: &ViewMatrix) -> std::result::Result<Self, NumericsError> {
        Ok(match view.kind {
            ViewKind::Mobility => Self::Transitions(mobility_transitions(&view.matrix)?),
            ViewKind::CategoricalCount => Self::Similarity(cosine_matrix(&view.matrix)),
        })
    }
}

/// `(1/n²) Σᵢ Σₖ |cos(xᵢ,xₖ) − hᵢ·hₖ|`, diagonal included.
pub fn feature_similarity_loss(g: &mut Graph, h_view: Var, cosine: &Tensor) -> Result<Var> {
    let gram = g.tape.matmul_nt(h_view, h_view)?;
    let residual = g.tape.add_const(gram, &cosine.map(|c| -c))?;
    let residual = g.tape.abs(residual)?;
    g.tape.mean_all(residual)
}

/// `Σᵢₖ −p_s log p̂_s − p_d log p̂_d`, with `p̂_s` the row softmax and `p̂_d`
/// the column softmax of the score matrix `Hˢ (Hᴰ)ᵀ`.
pub fn mobility_kl_loss(g: &mut Graph, h_source: Var, h_dest: Var, tables: &TransitionTables) -> Result<Var> {
    let scores = g.tape.matmul_nt(h_source, h_dest)?;
    if g.tape.shape(scores) != tables.source.shape() {
        return Err(NumericsError::Shape(format!(
            "mobility loss: scores {:?} vs tables {:?}",
            g.tape.shape(scores),
            tables.source.shape()
        )));
    }
    scores_kl_loss(g, scores, tables)
}

/// The mobility loss as a function of a raw `n×n` score matrix.
pub fn scores_kl_loss(g: &mut Graph, scores: Var, tables: &TransitionTables) -> Result<Var> {
    let log_source = g.tape.log_softmax(scores, 1)?;
    let log_dest = g.tape.log_softmax(scores, 0)?;
    let a = g.tape.mul_const(log_source, tables.source.clone())?;
    let b = g.tape.mul_const(log_dest, tables.destination.clone())?;
    let both = g.tape.add(a, b)?;
    let total = g.tape.sum_all(both)?;
    g.tape.scale(total, -1.0)
}

#[derive(Debug, Clone)]
pub enum ViewHead {
    Similarity(Linear),
    Mobility { source: Linear, destination: Linear },
}

/// Per-view projection heads (`Linear + ReLU`) from `H` to the loss spaces.
#[derive(Debug, Clone)]
pub struct LossHeads {
    pub heads: Vec<(String, ViewHead)>,
}

impl LossHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        views: &[(String, ViewKind)],
        width: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, ModelError> {
        let mut heads = Vec::with_capacity(views.len());
        for (name, kind) in views {
            let head = match kind {
                ViewKind::CategoricalCount => {
                    ViewHead::Similarity(Linear::new(store, &format!("head.{name}"), width, width, true, rng)?)
                }
                ViewKind::Mobility => ViewHead::Mobility {
                    source: Linear::new(store, &format!("head.{name}.source"), width, width, true, rng)?,
                    destination: Linear::new(store, &format!("head.{name}.destination"), width, width, true, rng)?,
                },
            };
            heads.push((name.clone(), head));
        }
        Ok(Self { heads })
    }
}

fn mlp(g: &mut Graph, layer: &Linear, h: Var) -> Result<Var> {
    let z = layer.forward(g, h)?;
    g.tape.relu(z)
}

/// Per-term loss weights, keyed by view name. Missing names weigh 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub std::collections::BTreeMap<String, f64>);

impl LossWeights {
    pub fn weight(&self, view: &str) -> f64 {
        self.0.get(view).copied().unwrap_or(1.0)
    }
}

/// Weighted sum of every view's term, with the unweighted per-term values.
pub fn total_loss(
    g: &mut Graph,
    h: Var,
    targets: &[ViewTarget],
    heads: &LossHeads,
    weights: &LossWeights,
) -> Result<(Var, Vec<(String, Var)>)> {
    if targets.len() != heads.heads.len() {
        return Err(NumericsError::Invalid(format!(
            "{} view targets for {} loss heads",
            targets.len(),
            heads.heads.len()
        )));
    }
    let mut terms = Vec::with_capacity(targets.len());
    let mut total: Option<Var> = None;
    for ((name, head), target) in heads.heads.iter().zip(targets) {
        let term = match (head, target) {
            (ViewHead::Similarity(layer), ViewTarget::Similarity(cos)) => {
                let hj = mlp(g, layer, h)?;
                feature_similarity_loss(g, hj, cos)?
            }
            (ViewHead::Mobility { source, destination }, ViewTarget::Transitions(tables)) => {
                let hs = mlp(g, source, h)?;
                let hd = mlp(g, destination, h)?;
                mobility_kl_loss(g, hs, hd, tables)?
            }
            _ => return Err(NumericsError::Invalid(format!("view `{name}`: head and target kinds differ"))),
        };
        let weighted = g.tape.scale(term, weights.weight(name))?;
        total = Some(match total {
            None => weighted,
            Some(acc) => g.tape.add(acc, weighted)?,
        });
        terms.push((name.clone(), term));
    }
    let total = total.ok_or_else(|| NumericsError::Invalid("no loss terms".into()))?;
    Ok((total, terms))
}

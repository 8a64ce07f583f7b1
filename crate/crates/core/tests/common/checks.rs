//! Measurements behind the acceptance criteria. Each function returns the
//! quantity compared against a tolerance so callers can report it.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use region_embed::dafusion::{region_fusion_forward, view_fusion, RegionFusionLayer, ViewFusionParams};
use region_embed::downstream::{lasso_fit, LassoConfig};
use region_embed::halearning::{inter_afl_forward, region_sa, InterAflStack, RegionSaLayer, RegionSaShape};
use region_embed::layers::Graph;
use region_embed::model::{ModelConfig, RegionModel};
use region_embed::numerics::{Mode, Tensor};
use region_embed::objective::{feature_similarity_loss, mobility_transitions, scores_kl_loss};
use region_embed::params::ParamStore;

use super::{mat, max_diff, randomize, Mat};

pub const LN_EPS: f64 = 1e-8;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

/// Largest deviation of `region_sa` (C, head-mean attention, and A′) from the reference.
pub fn region_sa_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=5);
    let heads = [1, 2, 4][seed as usize % 3];
    let d = 8;
    let channels = rng.gen_range(1..=3);
    let shape = RegionSaShape { regions: n, width: d, heads, channels, conv_size: 3, hidden: 2 * d, dropout: 0.1, eps: LN_EPS };
    let mut store = ParamStore::new();
    let layer = RegionSaLayer::new(&mut store, "sa", shape, &mut rng).unwrap();
    randomize(&mut store, seed + 100, 0.8);
    let x = random_matrix(&mut rng, n, d);

    let mut g = Graph::new(&store, Mode::Eval, &mut rng);
    let xv = g.tape.constant(x.clone()).unwrap();
    let (c, record) = region_sa(&mut g, xv, &layer).unwrap();
    let (c_ref, mean_ref, a_prime_ref) = super::region_sa(&store, "sa", &mat(&x), heads, channels);

    let a_prime = g.value(record.correlation.unwrap());
    assert_eq!(a_prime.shape(), &[channels, n, n]);
    let mut gap = max_diff(&c_ref, g.value(c)).max(max_diff(&mean_ref, g.value(record.mean)));
    for (ch, expected) in a_prime_ref.iter().enumerate() {
        let plane = Tensor::new(&[n, n], a_prime.data()[ch * n * n..(ch + 1) * n * n].to_vec()).unwrap();
        gap = gap.max(max_diff(expected, &plane));
    }
    gap
}

pub fn inter_afl_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=5);
    let views = rng.gen_range(1..=4);
    let d = rng.gen_range(2..=8);
    let memory = rng.gen_range(1..=6);
    let layers = rng.gen_range(1..=3);
    let mut store = ParamStore::new();
    let stack = InterAflStack::new(&mut store, "inter", d, memory, layers, &mut rng).unwrap();
    randomize(&mut store, seed + 200, 1.0);
    let blocks: Vec<Tensor> = (0..views).map(|_| random_matrix(&mut rng, n, d)).collect();

    let mut g = Graph::new(&store, Mode::Eval, &mut rng);
    let parts: Vec<_> = blocks.iter().map(|b| g.tape.constant(b.clone()).unwrap()).collect();
    let stacked = g.tape.stack(&parts, 1).unwrap();
    let out = inter_afl_forward(&mut g, stacked, &stack).unwrap();
    let expected = super::inter_afl(&store, "inter", &blocks.iter().map(mat).collect::<Vec<_>>(), layers);
    let mut gap: f64 = 0.0;
    for (j, e) in expected.iter().enumerate() {
        let got = g.tape.select(out, 1, j).unwrap();
        gap = gap.max(max_diff(e, g.value(got)));
    }
    gap
}

pub fn view_fusion_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=5);
    let views = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=8);
    let latent = rng.gen_range(1..=6);
    let mut store = ParamStore::new();
    let params = ViewFusionParams::new(&mut store, "vf", d, latent, 0.2, &mut rng).unwrap();
    randomize(&mut store, seed + 300, 1.0);
    let blocks: Vec<Tensor> = (0..views).map(|_| random_matrix(&mut rng, n, d)).collect();

    let mut g = Graph::new(&store, Mode::Eval, &mut rng);
    let parts: Vec<_> = blocks.iter().map(|b| g.tape.constant(b.clone()).unwrap()).collect();
    let (fused, alpha) = view_fusion(&mut g, &parts, &params).unwrap();
    let (fused_ref, alpha_ref) = super::view_fusion(&store, "vf", &blocks.iter().map(mat).collect::<Vec<_>>(), 0.2);
    let alpha_gap = g.value(alpha).data().iter().zip(&alpha_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    max_diff(&fused_ref, g.value(fused)).max(alpha_gap)
}

pub fn region_fusion_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=5);
    let heads = [1, 2, 4][seed as usize % 3];
    let d = 8;
    let depth = rng.gen_range(1..=3);
    let mut store = ParamStore::new();
    let layers: Vec<_> = (0..depth)
        .map(|l| RegionFusionLayer::new(&mut store, &format!("rf.layer{l}"), d, heads, 2 * d, 0.1, LN_EPS, &mut rng).unwrap())
        .collect();
    randomize(&mut store, seed + 400, 0.8);
    let z = random_matrix(&mut rng, n, d);

    let mut g = Graph::new(&store, Mode::Eval, &mut rng);
    let zv = g.tape.constant(z.clone()).unwrap();
    let (h, records) = region_fusion_forward(&mut g, zv, &layers).unwrap();
    assert_eq!(records.len(), depth);
    let expected = super::region_fusion(&store, "rf", &mat(&z), depth, heads, LN_EPS);
    max_diff(&expected, g.value(h))
}

/// Zeroes the convolutional path and pins `β` to 1, then compares the full
/// model's `H` against plain encoders, view fusion and region fusion.
pub fn degenerate_model_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=6);
    let config = ModelConfig { intra_layers: 2, fusion_layers: 2, ..ModelConfig::tiny() };
    let data = super::random_prepared(seed, n);
    let mut model = RegionModel::new(config.clone(), n, data.schema.clone(), &mut rng).unwrap();
    randomize(&mut model.store, seed + 500, 0.6);
    let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        if name.ends_with("conv.kernel") || name.ends_with("conv.bias") || name.ends_with("corr_mlp.bias") {
            let shape = model.store.value(&name).shape().to_vec();
            model.store.set_value(&name, Tensor::zeros(&shape)).unwrap();
        }
    }
    model.store.set_value("mix.logit", Tensor::scalar(40.0)).unwrap();

    let h = model.embed(&data).unwrap();
    let views: Vec<Mat> = data
        .schema
        .iter()
        .zip(&data.inputs)
        .map(|(v, x)| super::plain_encoder(&model.store, &format!("intra.{}", v.name), &mat(x), config.intra_layers, config.heads, LN_EPS))
        .collect();
    let (fused, _) = super::view_fusion(&model.store, "view_fusion", &views, config.leaky_slope);
    let expected = super::region_fusion(&model.store, "region_fusion", &fused, config.fusion_layers, config.heads, LN_EPS);
    max_diff(&expected, &h)
}

/// `α` of a model built on a single view.
pub fn single_view_alpha(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=6);
    let data = super::random_views(seed, n, 1);
    let model = RegionModel::new(ModelConfig::tiny(), n, data.schema.clone(), &mut rng).unwrap();
    let mut g = Graph::new(&model.store, Mode::Eval, &mut rng);
    model.forward(&mut g, &data).unwrap();
    g.value(g.diag.alpha.unwrap()).data().to_vec()
}

/// Feature-similarity loss against a double loop that recomputes cosines from scratch.
pub fn similarity_loss_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=12);
    let (f, d) = (rng.gen_range(1..=6), rng.gen_range(1..=8));
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
    let h: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut expected = 0.0;
    for i in 0..n {
        for k in 0..n {
            let denom = (dot(&x[i], &x[i]).sqrt() * dot(&x[k], &x[k]).sqrt()).max(1e-8);
            let cos = dot(&x[i], &x[k]) / denom;
            expected += (cos - dot(&h[i], &h[k])).abs();
        }
    }
    expected /= (n * n) as f64;

    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval, &mut rng);
    let hv = g.tape.constant(Tensor::from_rows(&h)).unwrap();
    let cos = region_embed::objective::cosine_matrix(&Tensor::from_rows(&x));
    let loss = feature_similarity_loss(&mut g, hv, &cos).unwrap();
    (g.value(loss).item() - expected).abs()
}

/// `(mobility loss, entropy floor)` for a freshly initialised random model.
pub fn mobility_loss_and_floor(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8);
    let data = super::random_prepared(seed, n);
    let mut model = RegionModel::new(ModelConfig::tiny(), n, data.schema.clone(), &mut rng).unwrap();
    randomize(&mut model.store, seed, 1.0);
    let (_, terms) = model.eval_loss(&data, &Default::default()).unwrap();
    let loss = terms.iter().find(|(name, _)| name == "mobility").unwrap().1;
    let floor = match &data.targets[0] {
        region_embed::objective::ViewTarget::Transitions(t) => t.entropy_floor(),
        _ => unreachable!("mobility is the first view"),
    };
    (loss, floor)
}

/// Gap between the mobility loss at scores `log M` and the entropy floor.
pub fn floor_attainment_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=20);
    let counts: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(1..40) as f64).collect()).collect();
    let tables = mobility_transitions(&Tensor::from_rows(&counts)).unwrap();
    let log_counts: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval, &mut rng);
    let scores = g.tape.constant(Tensor::from_rows(&log_counts)).unwrap();
    let loss = scores_kl_loss(&mut g, scores, &tables).unwrap();
    (g.value(loss).item() - tables.entropy_floor()).abs()
}

/// `m×d` design whose columns are centred, orthogonal, and have `‖x_j‖² = m`.
fn orthonormal_design(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Mat {
    let mut raw = Mat::from_fn(m, d, |_, _| rng.gen_range(-1.0..1.0));
    for j in 0..d {
        let mean = raw.column(j).mean();
        raw.column_mut(j).add_scalar_mut(-mean);
    }
    raw.qr().q() * (m as f64).sqrt()
}

fn to_tensor(x: &Mat) -> Tensor {
    Tensor::new(&[x.nrows(), x.ncols()], (0..x.nrows()).flat_map(|i| (0..x.ncols()).map(move |j| x[(i, j)])).collect()).unwrap()
}

fn lasso_problem(seed: u64) -> (Mat, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d) = (64, 8);
    let x = orthonormal_design(&mut rng, m, d);
    let truth = [20.0, -15.0, 8.0, 3.0, -1.0, 0.5, 12.0, -6.0];
    let y = (0..m).map(|i| 4.0 + (0..d).map(|j| x[(i, j)] * truth[j]).sum::<f64>() + rng.gen_range(-2.0..2.0)).collect();
    (x, y)
}

/// Coordinate descent against `w_j = S(x_jᵀ(y − ȳ)/m, α)` on an orthonormal design.
pub fn lasso_closed_form_gap(seed: u64, alpha: f64) -> f64 {
    let (x, y) = lasso_problem(seed);
    let m = x.nrows() as f64;
    let y_mean = y.iter().sum::<f64>() / m;
    let centred = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let soft = |z: f64| z.signum() * (z.abs() - alpha).max(0.0);
    let expected: Vec<f64> = (0..x.ncols()).map(|j| soft(x.column(j).dot(&centred) / m)).collect();

    let fit = lasso_fit(&to_tensor(&x), &y, &LassoConfig { alpha, ..LassoConfig::default() }).unwrap();
    let weight_gap = fit.weights.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    weight_gap.max((fit.intercept - y_mean).abs())
}

/// Unpenalised coordinate descent against a least-squares solve with an intercept column.
pub fn lasso_ols_gap(seed: u64, orthonormal: bool) -> f64 {
    let (x, y) = if orthonormal {
        lasso_problem(seed)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(64, 8, |_, j| rng.gen_range(-1.0..1.0) * (j + 1) as f64 + 0.5 * j as f64);
        let y = (0..64).map(|i| 1.0 + x.row(i).sum() + rng.gen_range(-0.5..0.5)).collect();
        (x, y)
    };
    let mut design = Mat::from_element(x.nrows(), x.ncols() + 1, 1.0);
    design.columns_mut(1, x.ncols()).copy_from(&x);
    let beta = design.svd(true, true).solve(&DVector::from_vec(y.clone()), 1e-14).unwrap();

    let cfg = LassoConfig { alpha: 0.0, tol: 1e-12, max_iter: 1_000_000, ..LassoConfig::default() };
    let fit = lasso_fit(&to_tensor(&x), &y, &cfg).unwrap();
    let weight_gap = fit.weights.iter().enumerate().map(|(j, w)| (w - beta[j + 1]).abs()).fold(0.0, f64::max);
    weight_gap.max((fit.intercept - beta[0]).abs())
}

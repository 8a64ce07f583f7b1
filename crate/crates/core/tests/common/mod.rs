//! Straight-line reference implementations shared by the integration tests.
//! Nothing here calls into the library's tape or layer code.

#![allow(dead_code)]

pub mod checks;

use nalgebra::DMatrix;
use region_embed::numerics::Tensor;
use region_embed::params::ParamStore;

pub type Mat = DMatrix<f64>;

pub fn mat(t: &Tensor) -> Mat {
    assert_eq!(t.rank(), 2, "expected a matrix, got {:?}", t.shape());
    Mat::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.value(name);
    match t.shape() {
        [r, c] => Mat::from_row_slice(*r, *c, t.data()),
        [len] => Mat::from_row_slice(1, *len, t.data()),
        s => panic!("{name}: unexpected shape {s:?}"),
    }
}

pub fn vec_param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.value(name).data().to_vec()
}

pub fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    assert_eq!(t.data().len(), a.len());
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - t.data()[i * a.ncols() + j]).abs());
        }
    }
    worst
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let max = (0..m.ncols()).map(|j| m[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..m.ncols() {
            out[(i, j)] = (m[(i, j)] - max).exp();
            total += out[(i, j)];
        }
        for j in 0..m.ncols() {
            out[(i, j)] /= total;
        }
    }
    out
}

pub fn add_bias(m: &Mat, bias: &[f64]) -> Mat {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] += bias[j];
        }
    }
    out
}

pub fn relu(m: &Mat) -> Mat {
    m.map(|v| v.max(0.0))
}

pub fn layer_norm(m: &Mat, gain: &[f64], shift: &[f64], eps: f64) -> Mat {
    let mut out = m.clone();
    let d = m.ncols() as f64;
    for i in 0..m.nrows() {
        let mean = (0..m.ncols()).map(|j| m[(i, j)]).sum::<f64>() / d;
        let var = (0..m.ncols()).map(|j| (m[(i, j)] - mean).powi(2)).sum::<f64>() / d;
        let sd = (var + eps).sqrt();
        for j in 0..m.ncols() {
            out[(i, j)] = gain[j] * (m[(i, j)] - mean) / sd + shift[j];
        }
    }
    out
}

/// Multi-head attention: returns `(C_V, per-head attention matrices)`.
pub fn attention(store: &ParamStore, prefix: &str, x: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let q = x * param(store, &format!("{prefix}.wq"));
    let k = x * param(store, &format!("{prefix}.wk"));
    let v = x * param(store, &format!("{prefix}.wv"));
    let d = x.ncols();
    let dh = d / heads;
    let mut joined = Mat::zeros(x.nrows(), d);
    let mut maps = Vec::new();
    for h in 0..heads {
        let qh = q.columns(h * dh, dh).into_owned();
        let kh = k.columns(h * dh, dh).into_owned();
        let vh = v.columns(h * dh, dh).into_owned();
        let a = softmax_rows(&((&qh * kh.transpose()) / (dh as f64).sqrt()));
        joined.columns_mut(h * dh, dh).copy_from(&(&a * vh));
        maps.push(a);
    }
    (joined * param(store, &format!("{prefix}.wo")), maps)
}

pub fn encoder_tail(store: &ParamStore, prefix: &str, x: &Mat, c: &Mat, eps: f64) -> Mat {
    let z = layer_norm(
        &(x + c),
        &vec_param(store, &format!("{prefix}.ln1.gain")),
        &vec_param(store, &format!("{prefix}.ln1.shift")),
        eps,
    );
    let hidden = relu(&add_bias(
        &(&z * param(store, &format!("{prefix}.mlp.fc1.weight"))),
        &vec_param(store, &format!("{prefix}.mlp.fc1.bias")),
    ));
    let f = add_bias(
        &(hidden * param(store, &format!("{prefix}.mlp.fc2.weight"))),
        &vec_param(store, &format!("{prefix}.mlp.fc2.bias")),
    );
    layer_norm(
        &(z + f),
        &vec_param(store, &format!("{prefix}.ln2.gain")),
        &vec_param(store, &format!("{prefix}.ln2.shift")),
        eps,
    )
}

/// 3×3 convolution (zero padding 1, stride 1) of one `n×n` map into `c` channels,
/// followed by 3×3 average pooling that ignores padded cells.
pub fn conv_then_pool(a: &Mat, kernel: &[f64], bias: &[f64], channels: usize) -> Vec<Mat> {
    let n = a.nrows() as isize;
    let at = |i: isize, j: isize| if i < 0 || j < 0 || i >= n || j >= n { 0.0 } else { a[(i as usize, j as usize)] };
    let mut out = Vec::new();
    for ch in 0..channels {
        let mut conv = Mat::zeros(n as usize, n as usize);
        for i in 0..n {
            for j in 0..n {
                let mut s = bias[ch];
                for di in 0..3isize {
                    for dj in 0..3isize {
                        s += kernel[ch * 9 + (di * 3 + dj) as usize] * at(i + di - 1, j + dj - 1);
                    }
                }
                conv[(i as usize, j as usize)] = s;
            }
        }
        let mut pooled = Mat::zeros(n as usize, n as usize);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                let mut count = 0.0;
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let (r, c) = (i + di, j + dj);
                        if r >= 0 && c >= 0 && r < n && c < n {
                            s += conv[(r as usize, c as usize)];
                            count += 1.0;
                        }
                    }
                }
                pooled[(i as usize, j as usize)] = s / count;
            }
        }
        out.push(pooled);
    }
    out
}

/// One RegionSA block: returns `(C, head-averaged attention, A′ channels)`.
pub fn region_sa(store: &ParamStore, prefix: &str, x: &Mat, heads: usize, channels: usize) -> (Mat, Mat, Vec<Mat>) {
    let (c_v, maps) = attention(store, &format!("{prefix}.attn"), x, heads);
    let n = x.nrows();
    let mut mean = Mat::zeros(n, n);
    for m in &maps {
        mean += m;
    }
    mean /= heads as f64;
    let a_prime = conv_then_pool(
        &mean,
        &vec_param(store, &format!("{prefix}.conv.kernel")),
        &vec_param(store, &format!("{prefix}.conv.bias")),
        channels,
    );
    let mut pooled = Mat::zeros(n, n);
    for a in &a_prime {
        pooled += a.component_mul(&softmax_rows(a));
    }
    pooled /= channels as f64;
    let c_a = relu(&add_bias(
        &(pooled * param(store, &format!("{prefix}.corr_mlp.weight"))),
        &vec_param(store, &format!("{prefix}.corr_mlp.bias")),
    ));
    (c_v + c_a, mean, a_prime)
}

/// External attention over views for every layer; `z[j]` is view `j`'s `n×d` block.
pub fn inter_afl(store: &ParamStore, prefix: &str, z: &[Mat], layers: usize) -> Vec<Mat> {
    let mut cur: Vec<Mat> = z.to_vec();
    let (n, v) = (z[0].nrows(), z.len());
    for l in 0..layers {
        let memory = param(store, &format!("{prefix}.layer{l}.memory"));
        let readout = param(store, &format!("{prefix}.layer{l}.readout"));
        let dm = memory.ncols();
        let scores: Vec<Mat> = cur.iter().map(|zj| zj * &memory).collect();
        let mut attn: Vec<Mat> = vec![Mat::zeros(n, dm); v];
        for i in 0..n {
            for m in 0..dm {
                let max = (0..v).map(|j| scores[j][(i, m)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..v).map(|j| (scores[j][(i, m)] - max).exp()).sum();
                for j in 0..v {
                    attn[j][(i, m)] = (scores[j][(i, m)] - max).exp() / total;
                }
            }
        }
        for a in attn.iter_mut() {
            for i in 0..n {
                let l1: f64 = (0..dm).map(|m| a[(i, m)].abs()).sum();
                for m in 0..dm {
                    a[(i, m)] /= l1;
                }
            }
        }
        cur = attn.iter().map(|a| a * &readout).collect();
    }
    cur
}

/// ViewFusion: returns `(Z̃, α)`.
pub fn view_fusion(store: &ParamStore, prefix: &str, views: &[Mat], slope: f64) -> (Mat, Vec<f64>) {
    let w = param(store, &format!("{prefix}.wf"));
    let a = vec_param(store, &format!("{prefix}.a"));
    let latent = w.ncols();
    let n = views[0].nrows();
    let projected: Vec<Mat> = views.iter().map(|z| z * &w).collect();
    let half = |p: &Mat, i: usize, offset: usize| (0..latent).map(|c| a[offset + c] * p[(i, c)]).sum::<f64>();
    let leaky = |x: f64| if x > 0.0 { x } else { slope * x };
    let scores: Vec<f64> = (0..views.len())
        .map(|j| {
            let mut total = 0.0;
            for i in 0..n {
                for k in 0..views.len() {
                    total += leaky(half(&projected[j], i, 0) + half(&projected[k], i, latent));
                }
            }
            total / n as f64
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut fused = Mat::zeros(n, views[0].ncols());
    for (z, al) in views.iter().zip(&alpha) {
        fused += z * *al;
    }
    (fused, alpha)
}

/// Stacked self-attention encoder layers with the residual/norm tail.
pub fn region_fusion(store: &ParamStore, prefix: &str, z: &Mat, layers: usize, heads: usize, eps: f64) -> Mat {
    let mut h = z.clone();
    for l in 0..layers {
        let name = format!("{prefix}.layer{l}");
        let (c, _) = attention(store, &format!("{name}.attn"), &h, heads);
        h = encoder_tail(store, &name, &h, &c, eps);
    }
    h
}

/// Plain transformer encoder for one view: input projection then `layers`
/// attention blocks with no convolutional path.
pub fn plain_encoder(store: &ParamStore, prefix: &str, x: &Mat, layers: usize, heads: usize, eps: f64) -> Mat {
    let mut h = add_bias(
        &(x * param(store, &format!("{prefix}.input.weight"))),
        &vec_param(store, &format!("{prefix}.input.bias")),
    );
    for l in 0..layers {
        let name = format!("{prefix}.layer{l}");
        let (c, _) = attention(store, &format!("{name}.attn"), &h, heads);
        h = encoder_tail(store, &name, &h, &c, eps);
    }
    h
}

/// Replaces every parameter with uniform draws in `±scale`, so biases,
/// gains and shifts are exercised too.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Three random views (mobility, POI, land use) with their loss targets.
pub fn random_prepared(seed: u64, n: usize) -> region_embed::model::PreparedData {
    random_views(seed, n, 3)
}

pub fn random_views(seed: u64, n: usize, views: usize) -> region_embed::model::PreparedData {
    use rand::{Rng, SeedableRng};
    use region_embed::data::{ViewKind, ViewMatrix, ViewSchema};
    use region_embed::objective::ViewTarget;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let all = [("mobility", ViewKind::Mobility, n), ("poi", ViewKind::CategoricalCount, 5), ("landuse", ViewKind::CategoricalCount, 3)];
    let mut schema = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (name, kind, features) in all.into_iter().take(views) {
        schema.push(ViewSchema { name: name.into(), kind, features });
        let data: Vec<f64> = (0..n * features).map(|_| rng.gen_range(0..6) as f64 + 1.0).collect();
        let raw = Tensor::new(&[n, features], data).unwrap();
        let view = ViewMatrix { name: name.into(), kind, matrix: raw.clone(), category_labels: Vec::new() };
        targets.push(ViewTarget::for_view(&view).unwrap());
        inputs.push(match kind {
            ViewKind::Mobility => raw.map(f64::ln_1p),
            ViewKind::CategoricalCount => raw,
        });
    }
    region_embed::model::PreparedData { schema, inputs, targets }
}

fn check_row_stochastic(t: &Tensor, what: &str) -> Result<(), String> {
    let (rows, cols) = (t.rows(), t.cols());
    for i in 0..rows {
        let row = &t.data()[i * cols..(i + 1) * cols];
        if row.iter().any(|&v| v < 0.0) {
            return Err(format!("{what}: negative entry in row {i}"));
        }
        let dev = (row.iter().sum::<f64>() - 1.0).abs();
        if dev > 1e-6 {
            return Err(format!("{what}: row {i} sums to 1{dev:+e}"));
        }
    }
    Ok(())
}

/// Runs one randomized forward pass and checks the structural invariants of
/// every intermediate: attention rows, α, the convex hull of Z̃, β, and A′.
pub fn check_structural_invariants(seed: u64) -> Result<(), String> {
    use rand::{Rng, SeedableRng};
    use region_embed::layers::Graph;
    use region_embed::model::{ModelConfig, RegionModel};
    use region_embed::numerics::Mode;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=7);
    let config = ModelConfig { channels: rng.gen_range(1..=3), ..ModelConfig::tiny() };
    let data = random_prepared(seed, n);
    let mut model = RegionModel::new(config.clone(), n, data.schema.clone(), &mut rng).map_err(|e| e.to_string())?;
    let logit = rng.gen_range(-4.0..4.0);
    model.store.set_value("mix.logit", Tensor::scalar(logit)).map_err(|e| e.to_string())?;
    let mode = if seed.is_multiple_of(2) { Mode::Eval } else { Mode::Train };

    let mut g = Graph::new(&model.store, mode, &mut rng);
    let h = model.forward(&mut g, &data).map_err(|e| e.to_string())?;
    if g.value(h).shape() != [n, config.width] {
        return Err(format!("H has shape {:?}", g.value(h).shape()));
    }
    for (v, layers) in g.diag.intra.iter().enumerate() {
        for (l, record) in layers.iter().enumerate() {
            for (k, head) in record.heads.iter().enumerate() {
                check_row_stochastic(g.value(*head), &format!("A_sv view {v} layer {l} head {k}"))?;
            }
            check_row_stochastic(g.value(record.mean), &format!("mean A_sv view {v} layer {l}"))?;
            let a_prime = g.value(record.correlation.ok_or("missing A′")?);
            if a_prime.shape() != [config.channels, n, n] {
                return Err(format!("A′ shape {:?}", a_prime.shape()));
            }
        }
    }
    for (l, record) in g.diag.fusion.iter().enumerate() {
        for (k, head) in record.heads.iter().enumerate() {
            check_row_stochastic(g.value(*head), &format!("A_rf layer {l} head {k}"))?;
        }
    }
    let alpha = g.value(g.diag.alpha.ok_or("missing α")?).data().to_vec();
    if alpha.len() != 3 || alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) || (alpha.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(format!("α = {alpha:?} is not a probability vector"));
    }
    let beta = g.value(g.diag.beta.ok_or("missing β")?).item();
    if !(beta > 0.0 && beta < 1.0) {
        return Err(format!("β = {beta} outside (0, 1)"));
    }
    let fused = g.value(g.diag.z_tilde.ok_or("missing Z̃")?);
    let views: Vec<&Tensor> = g.diag.z_views.iter().map(|v| g.value(*v)).collect();
    for (idx, &z) in fused.data().iter().enumerate() {
        let lo = views.iter().map(|v| v.data()[idx]).fold(f64::INFINITY, f64::min);
        let hi = views.iter().map(|v| v.data()[idx]).fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if z < lo - slack || z > hi + slack {
            return Err(format!("Z̃[{idx}] = {z} outside [{lo}, {hi}]"));
        }
    }
    Ok(())
}

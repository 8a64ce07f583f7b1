use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use region_embed::data::{generate_synthetic, load_dataset, write_dataset, RegionDataset, SynthConfig};
use region_embed::downstream::{kfold_evaluate, EvalReport, LassoConfig};
use region_embed::error::TrainError;
use region_embed::model::{tiny_gradient_check, ModelConfig};
use region_embed::numerics::FdConfig;
use region_embed::trainer::{
    export_embeddings, read_embeddings, save_checkpoint, train as train_model, Checkpoint, EpochEvent, TrainConfig,
    EMBEDDINGS_FILE, EMBEDDINGS_META_FILE,
};
use serde::{Deserialize, Serialize};

use crate::config::{set, RunConfig};
use crate::error::CliError;
use crate::manifest::{read_manifest, RunRecorder};
use crate::{EvaluateArgs, GradcheckArgs, GridArgs, ModelFlags, SynthArgs, TrainArgs};

pub const TRAIN_LOG_FILE: &str = "train.log.jsonl";

fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::Usage(format!(
                    "{} exists and is not empty (use --force to replace it)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig { n: a.regions, latent_dim: a.latent, noise_level: a.noise, seed: a.seed, ..SynthConfig::default() };
    cfg.validate()?;
    prepare_out_dir(&a.out, a.force)?;
    let mut run = RunRecorder::new("synth", cfg.seed, &cfg);
    let planted = generate_synthetic(&cfg)?;
    write_dataset(&planted.dataset, &a.out)?;
    run.output("dataset", &a.out);
    run.finish(&a.out, "ok")?;
    println!("wrote {} regions to {}", cfg.n, a.out.display());
    Ok(())
}

/// Applies command-line overrides on top of the settings file.
fn resolve(flags: &ModelFlags) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(flags.config.as_deref())?;
    let m = &mut cfg.model;
    set(&mut m.width, flags.d);
    set(&mut m.heads, flags.heads);
    set(&mut m.fusion_latent, flags.fusion_latent);
    set(&mut m.memory_size, flags.memory);
    set(&mut m.channels, flags.channels);
    set(&mut m.intra_layers, flags.intra_layers);
    set(&mut m.inter_layers, flags.inter_layers);
    set(&mut m.fusion_layers, flags.fusion_layers);
    set(&mut m.dropout, flags.dropout);
    let t = &mut cfg.train;
    set(&mut t.epochs, flags.epochs);
    set(&mut t.learning_rate, flags.lr);
    set(&mut t.seed, flags.seed);
    set(&mut t.checkpoint_every, flags.checkpoint_every);
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

struct TrainSummary {
    first_loss: f64,
    final_loss: f64,
    embeddings: PathBuf,
}

/// Trains into `out`, writing the log, checkpoint, and embeddings.
fn train_into(
    ds: &RegionDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: &Path,
    run: &mut RunRecorder,
) -> Result<TrainSummary, CliError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let fingerprint = ds.fingerprint();
    let outcome = train_model(ds, model_cfg, train_cfg, |record, model, event| {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| TrainError::Config(format!("{}: {e}", log_path.display())))?;
        if record.epoch == 1 || record.epoch % 50 == 0 {
            log::info!("epoch {} loss {:.6} beta {:.4}", record.epoch, record.total, record.beta);
        }
        if event == EpochEvent::CheckpointDue {
            save_checkpoint(&Checkpoint::from_model(model, fingerprint.clone(), record.epoch, None), out)
                .map_err(|e| TrainError::Config(e.to_string()))?;
        }
        Ok(())
    });
    drop(log);
    run.output("train_log", &log_path);
    let outcome = outcome?;
    let epoch = outcome.log.len();
    let ckpt = Checkpoint::from_model(&outcome.model, fingerprint, epoch, Some(outcome.embeddings.clone()));
    let ckpt_path = save_checkpoint(&ckpt, out)?;
    export_embeddings(&ckpt, ds, train_cfg.seed, out)?;
    run.output("checkpoint", &ckpt_path);
    run.output("embeddings", &out.join(EMBEDDINGS_FILE));
    run.output("embeddings_meta", &out.join(EMBEDDINGS_META_FILE));
    Ok(TrainSummary {
        first_loss: outcome.log.first().map(|r| r.total).unwrap_or(f64::NAN),
        final_loss: outcome.log.last().map(|r| r.total).unwrap_or(f64::NAN),
        embeddings: out.join(EMBEDDINGS_FILE),
    })
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.model)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let ds = load_dataset(&a.data)?;
    prepare_out_dir(&a.out, a.force)?;
    let mut run = RunRecorder::new("train", cfg.train.seed, &TrainSettings { model: &cfg.model, train: &cfg.train });
    run.input("data", &a.data);
    match train_into(&ds, &cfg.model, &cfg.train, &a.out, &mut run) {
        Ok(s) => {
            run.finish(&a.out, "ok")?;
            println!(
                "trained {} epochs: loss {:.6} -> {:.6}; embeddings in {}",
                cfg.train.epochs,
                s.first_loss,
                s.final_loss,
                s.embeddings.display()
            );
            Ok(())
        }
        Err(e) => {
            run.finish(&a.out, &format!("failed: {e}"))?;
            Err(e)
        }
    }
}

/// Everything needed to reproduce one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalPlan {
    embeddings: PathBuf,
    data: PathBuf,
    task: String,
    folds: usize,
    seed: u64,
    lasso: LassoConfig,
}

fn run_eval(plan: &EvalPlan) -> Result<EvalReport, CliError> {
    plan.lasso.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let h = read_embeddings(&plan.embeddings)?;
    let ds = load_dataset(&plan.data)?;
    let y = ds.target(&plan.task)?;
    Ok(kfold_evaluate(&plan.task, &h, y, plan.folds, plan.seed, &plan.lasso)?)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let plan = match &a.rerun {
        Some(path) => {
            let m = read_manifest(path)?;
            if m.command != "evaluate" {
                return Err(CliError::Usage(format!("{} records a `{}` run, not `evaluate`", path.display(), m.command)));
            }
            serde_json::from_value::<EvalPlan>(m.config).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
        None => {
            let cfg = RunConfig::load(a.config.as_deref())?;
            let mut lasso = cfg.lasso.clone();
            set(&mut lasso.alpha, a.alpha);
            EvalPlan {
                embeddings: a.embeddings.clone().expect("required by clap"),
                data: a.data.clone().expect("required by clap"),
                task: a.task.clone().expect("required by clap"),
                folds: a.folds.unwrap_or(cfg.folds()),
                seed: a.seed.unwrap_or(0),
                lasso,
            }
        }
    };
    let out = a.out.clone().unwrap_or_else(|| {
        plan.embeddings.parent().unwrap_or(Path::new(".")).join(format!("eval_{}", plan.task))
    });
    let report = run_eval(&plan)?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut run = RunRecorder::new("evaluate", plan.seed, &plan);
    run.input("embeddings", &plan.embeddings);
    run.input("data", &plan.data);
    let json = out.join("report.json");
    let text = out.join("report.txt");
    write_json(&json, &report)?;
    write_text(&text, &report.to_table())?;
    run.output("report_json", &json);
    run.output("report_text", &text);
    print!("{}", report.to_table());
    if !report.all_converged() {
        run.finish(&out, "lasso did not converge on every fold")?;
        return Err(CliError::Numerical("lasso did not converge on every fold".into()));
    }
    run.finish(&out, "ok")?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    if !(a.eps > 0.0) || !(a.tol > 0.0) {
        return Err(CliError::Usage("--eps and --tol must be positive".into()));
    }
    let cfg = FdConfig { eps: a.eps, tolerance: a.tol, min_samples: a.samples, seed: a.seed, ..FdConfig::default() };
    let mut run = RunRecorder::new("gradcheck", a.seed, &cfg);
    let report = tiny_gradient_check(a.seed, &cfg)?;
    let groups: BTreeSet<&str> = report.samples.iter().map(|s| s.param.as_str()).collect();
    println!(
        "checked {} coordinates across {} parameter tensors ({} redrawn at kinks)",
        report.checked(),
        groups.len(),
        report.skipped_kinks
    );
    println!("max relative error {:.3e} (tolerance {:.1e})", report.max_rel_error, report.tolerance);
    let worst = report.worst.as_ref().map(|w| format!("{}[{}]", w.param, w.index)).unwrap_or_default();
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join("gradcheck.json");
        write_json(&path, &report)?;
        run.output("report", &path);
        run.finish(out, if report.passed { "ok" } else { "failed" })?;
    }
    if report.passed {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed; worst coordinate {worst}")))
    }
}

#[derive(Debug, Clone, Serialize)]
struct GridCell {
    d: usize,
    fusion_layers: usize,
    r2_mean: Option<f64>,
    r2_std: Option<f64>,
    mae_mean: Option<f64>,
    rmse_mean: Option<f64>,
    error: Option<String>,
}

fn grid_cell(ds: &RegionDataset, base: &RunConfig, a: &GridArgs, d: usize, layers: usize) -> GridCell {
    let mut cell = GridCell { d, fusion_layers: layers, r2_mean: None, r2_std: None, mae_mean: None, rmse_mean: None, error: None };
    let dir = a.out.join(format!("d{d}_layers{layers}"));
    let result = (|| -> Result<EvalReport, CliError> {
        let model = ModelConfig { width: d, fusion_layers: layers, ..base.model.clone() };
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut run = RunRecorder::new("train", base.train.seed, &TrainSettings { model: &model, train: &base.train });
        let summary = train_into(ds, &model, &base.train, &dir, &mut run);
        run.finish(&dir, if summary.is_ok() { "ok" } else { "failed" })?;
        let h = read_embeddings(summary?.embeddings)?;
        let mut lasso = base.lasso.clone();
        set(&mut lasso.alpha, a.alpha);
        let y = ds.target(&a.task)?;
        Ok(kfold_evaluate(&a.task, &h, y, a.folds.unwrap_or(base.folds()), base.train.seed, &lasso)?)
    })();
    match result {
        Ok(r) => {
            cell.r2_mean = r.mean.r2;
            cell.r2_std = r.std.r2;
            cell.mae_mean = Some(r.mean.mae);
            cell.rmse_mean = Some(r.mean.rmse);
        }
        Err(e) => {
            log::error!("grid cell d={d} layers={layers} failed: {e}");
            cell.error = Some(e.to_string());
        }
    }
    cell
}

fn grid_table(cells: &[GridCell], d_list: &[usize], layers_list: &[usize]) -> String {
    let mut out = format!("{:>6}", "d");
    for l in layers_list {
        out.push_str(&format!(" {:>17}", format!("layers={l}")));
    }
    out.push('\n');
    for &d in d_list {
        out.push_str(&format!("{d:>6}"));
        for &l in layers_list {
            let c = cells.iter().find(|c| c.d == d && c.fusion_layers == l).expect("every cell evaluated");
            let text = match (c.error.as_ref(), c.r2_mean) {
                (Some(_), _) => "FAILED".to_string(),
                (None, Some(m)) => format!("{m:.4} ± {:.4}", c.r2_std.unwrap_or(0.0)),
                (None, None) => "n/a".to_string(),
            };
            out.push_str(&format!(" {text:>17}"));
        }
        out.push('\n');
    }
    out
}

pub fn grid(a: GridArgs) -> Result<(), CliError> {
    if a.d_list.is_empty() || a.layers_list.is_empty() {
        return Err(CliError::Usage("--d-list and --layers-list must be non-empty".into()));
    }
    if a.parallel == 0 {
        return Err(CliError::Usage("--parallel must be >= 1".into()));
    }
    let base = resolve(&a.model)?;
    base.train.validate()?;
    let ds = load_dataset(&a.data)?;
    ds.target(&a.task)?;
    prepare_out_dir(&a.out, a.force)?;
    let mut run = RunRecorder::new("grid", base.train.seed, &base);
    run.input("data", &a.data);

    let plan: Vec<(usize, usize)> = a.d_list.iter().flat_map(|&d| a.layers_list.iter().map(move |&l| (d, l))).collect();
    let slots: Vec<Mutex<Option<GridCell>>> = plan.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..a.parallel.min(plan.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(d, l)) = plan.get(i) else { break };
                let cell = grid_cell(&ds, &base, &a, d, l);
                *slots[i].lock().expect("no poisoned cells") = Some(cell);
            });
        }
    });
    let cells: Vec<GridCell> = slots.into_iter().map(|s| s.into_inner().expect("lock").expect("filled")).collect();
    let table = grid_table(&cells, &a.d_list, &a.layers_list);
    let json = a.out.join("grid.json");
    let text = a.out.join("grid.txt");
    write_json(&json, &cells)?;
    write_text(&text, &table)?;
    run.output("grid_json", &json);
    run.output("grid_text", &text);
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    run.finish(&a.out, &if failed == 0 { "ok".to_string() } else { format!("{failed} cell(s) failed") })?;
    println!("task: {}  (mean R² ± std over folds)\n{table}", a.task);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_marks_failed_cells() {
        let cells = vec![
            GridCell { d: 8, fusion_layers: 1, r2_mean: Some(0.5), r2_std: Some(0.1), mae_mean: None, rmse_mean: None, error: None },
            GridCell { d: 8, fusion_layers: 2, r2_mean: None, r2_std: None, mae_mean: None, rmse_mean: None, error: Some("x".into()) },
        ];
        let t = grid_table(&cells, &[8], &[1, 2]);
        assert!(t.contains("0.5000 ± 0.1000"));
        assert!(t.contains("FAILED"));
    }

    #[test]
    fn refuses_non_empty_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(matches!(prepare_out_dir(dir.path(), false), Err(CliError::Usage(_))));
        prepare_out_dir(dir.path(), true).unwrap();
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}

//! One function per subcommand. Each returns the files it wrote so callers
//! (and tests) can inspect them.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gram_core::inference::{self, RolloutConfig, Selector};
use gram_core::model::Model;
use gram_core::numerics::{Exec, Tensor};
use gram_core::oracles::MetricsReport;
use gram_core::tasks::{self, Dataset};
use gram_core::trainer::checkpoint::Checkpoint;
use gram_core::trainer::Trainer;
use gram_core::{GramError, Result};
use serde::Serialize;

use crate::config::{RunConfig, Weights};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const FINAL_METRICS: &str = "final_metrics.json";

#[derive(Clone, Debug, PartialEq)]
pub enum GenTask {
    NQueens { n: usize, removals: Vec<usize> },
    Coloring { n: usize, edge_prob: Option<f64>, count: usize },
    Sudoku { count: usize, min_givens: usize },
    SudokuUnconditional { count: usize },
}

/// Generates a dataset and writes it (records, sidecar, metadata) to `out`.
pub fn gen_data(task: &GenTask, seed: u64, out: &Path) -> Result<Dataset> {
    let ds = match task {
        GenTask::NQueens { n, removals } => tasks::gen_nqueens(*n, removals, seed)?,
        GenTask::Coloring { n, edge_prob, count } => {
            tasks::gen_graph_coloring(*n, edge_prob.unwrap_or_else(|| tasks::default_edge_prob(*n)), *count, seed)?.0
        }
        GenTask::Sudoku { count, min_givens } => tasks::gen_sudoku_conditional(*count, *min_givens, seed)?,
        GenTask::SudokuUnconditional { count } => tasks::gen_sudoku_unconditional(*count, seed)?,
    };
    tasks::save_dataset(&ds, out)?;
    Ok(ds)
}

pub fn load_data_for(cfg: &RunConfig, data: &Path) -> Result<Dataset> {
    let ds = tasks::load_dataset(data)?;
    if ds.spec.name != cfg.task {
        return Err(GramError::data(format!("dataset task `{}` does not match configured task `{}`", ds.spec.name, cfg.task)));
    }
    Ok(ds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| GramError::data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Trains into `out`: config snapshot, JSON-lines log, periodic and final
/// checkpoints, and final raw/EMA metrics on the configured split.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>, exec: Exec) -> Result<PathBuf> {
    let ds = load_data_for(cfg, data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_SNAPSHOT), cfg.to_json())?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(Checkpoint::load_expecting(p, &cfg.model, &cfg.train)?)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    trainer.exec = exec;
    let train_ex = ds.examples(&ds.train);
    let val_ex = ds.examples(ds.split(&cfg.val_split)?);
    let mut log = fs::OpenOptions::new().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(out.join(METRICS_LOG))?;
    let ckpt_dir = out.join("checkpoints");
    let first_epoch = trainer.step / ((train_ex.len().div_ceil(cfg.train.batch_size) * cfg.model.n_sup).max(1) as u64);
    let epochs = cfg.train.epochs;
    let every = cfg.checkpoint_every;
    let mut done_epochs = 0usize;
    let chunk = if every == 0 { epochs } else { every };
    while done_epochs < epochs {
        let n = chunk.min(epochs - done_epochs);
        trainer.fit(&train_ex, &val_ex, n, first_epoch + done_epochs as u64, |_, rec| {
            writeln!(log, "{}", rec.to_json_line())?;
            Ok(())
        })?;
        done_epochs += n;
        if every > 0 && done_epochs < epochs {
            fs::create_dir_all(&ckpt_dir)?;
            trainer.checkpoint().save(&ckpt_dir.join(format!("step-{:08}.ckpt", trainer.step)))?;
        }
    }
    let final_path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_path)?;
    let report = trainer.evaluate(&ds, &cfg.inference.split, cfg.inference.width, &cfg.rollout()?, cfg.seed)?;
    write_json(&out.join(FINAL_METRICS), &report)?;
    Ok(final_path)
}

/// A trained model ready for inference.
pub struct Loaded {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: Vec<Tensor<f32>>,
    pub z0: gram_core::model::LatentState<f32>,
    pub ds: Dataset,
}

/// Loads `run/config.json` (or `config`) and the checkpoint (default
/// `run/final.ckpt`), selecting raw or EMA weights per the config.
pub fn load_run(run: &Path, checkpoint: Option<&Path>, data: &Path, cfg: Option<RunConfig>) -> Result<Loaded> {
    let cfg = match cfg {
        Some(c) => c,
        None => crate::config::parse_json(&fs::read_to_string(run.join(CONFIG_SNAPSHOT))?)?,
    };
    let ck_path = checkpoint.map_or_else(|| run.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let ck = Checkpoint::load(&ck_path)?;
    if ck.model != cfg.model {
        return Err(GramError::data(format!("{} was trained with a different model configuration", ck_path.display())));
    }
    let ds = load_data_for(&cfg, data)?;
    let trainer = Trainer::from_checkpoint(ck)?;
    let params = match cfg.inference.weights {
        Weights::Ema => trainer.ema.clone(),
        Weights::Raw => trainer.params.tensors().to_vec(),
    };
    Ok(Loaded { cfg, model: trainer.model, params, z0: trainer.z0, ds })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub task: String,
    pub split: String,
    pub weights: Weights,
    pub width: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
}

pub fn eval(run: &Loaded, exec: Exec) -> Result<EvalOutput> {
    let c = &run.cfg;
    let (metrics, _) =
        inference::evaluate_split(&run.model, &run.params, &run.z0, &run.ds, &c.inference.split, c.inference.width, &c.rollout()?, c.seed, exec)?;
    Ok(EvalOutput {
        task: c.task.clone(),
        split: c.inference.split.clone(),
        weights: c.inference.weights,
        width: c.inference.width,
        seed: c.seed,
        metrics,
    })
}

/// Writes `predictions.txt` (`input_id;traj_id;halt_step;tokens`) and
/// `metrics.json` into `out`.
pub fn sample(run: &Loaded, out: &Path, exec: Exec) -> Result<EvalOutput> {
    let c = &run.cfg;
    let (metrics, trajs) =
        inference::evaluate_split(&run.model, &run.params, &run.z0, &run.ds, &c.inference.split, c.inference.width, &c.rollout()?, c.seed, exec)?;
    fs::create_dir_all(out)?;
    let mut text = String::from("input_id;traj_id;halt_step;prediction\n");
    for (i, per_input) in trajs.iter().enumerate() {
        for (j, t) in per_input.iter().enumerate() {
            let tokens: Vec<String> = t.final_prediction.iter().map(usize::to_string).collect();
            writeln!(text, "{i};{};{};{}", j + 1, t.halt_step, tokens.join(" ")).expect("writing to a String");
        }
    }
    fs::write(out.join("predictions.txt"), text)?;
    let report = EvalOutput {
        task: c.task.clone(),
        split: c.inference.split.clone(),
        weights: c.inference.weights,
        width: c.inference.width,
        seed: c.seed,
        metrics,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

pub fn sweep(run: &Loaded, depths: &[usize], widths: &[usize], selector: Selector, exec: Exec) -> Result<String> {
    let c = &run.cfg;
    let cells = inference::depth_width_sweep(
        &run.model,
        &run.params,
        &run.z0,
        &run.ds,
        &c.inference.split,
        depths,
        widths,
        selector,
        &c.rollout()?,
        c.seed,
        exec,
    )?;
    Ok(inference::sweep_csv(&cells))
}

/// Dumps up to `limit` inputs of the configured split with their targets.
pub fn dump(run: &Loaded, limit: usize, out: &Path, exec: Exec) -> Result<usize> {
    let c = &run.cfg;
    let split = run.ds.split(&c.inference.split)?;
    let mut items: Vec<(Option<Vec<usize>>, Option<Vec<usize>>)> = Vec::new();
    for it in run.ds.eval_items(split).into_iter().take(limit) {
        let target = split.iter().find(|r| r.set_id == it.set_id).map(|r| run.ds.spec.pad(&r.target));
        items.push((it.input, target));
    }
    let rollout = RolloutConfig { output_len: Some(run.ds.spec.target_len), ..c.rollout()? };
    inference::dump_trajectories(&run.model, &run.params, &run.z0, &items, c.inference.width, &rollout, c.seed, exec, out)
}

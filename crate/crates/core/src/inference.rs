//! Prior-mode rollouts, width-N sampling, candidate selection, ACT halting,
//! depth/width sweeps and trajectory dumps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::model::{LatentState, Mode, Model};
use crate::numerics::rng::labels;
use crate::numerics::{Exec, RngStream, Tape, Tensor};
use crate::oracles::{self, MetricsReport};
use crate::tasks::{Dataset, EvalItem, TaskSpec};

/// When a rollout stops early.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaltRule {
    /// Halt once `q_halt > q_continue`.
    TwoValue,
    /// Halt once `sigmoid(q_halt) > 0.5`.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderMode {
    Argmax,
    /// Sample each token from the softmax.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Z0Mode {
    /// The initial state frozen at model creation.
    Fixed,
    /// A fresh standard-normal state per trajectory.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    Vote,
    Lprm,
    /// Picks a valid candidate when one exists; needs ground truth.
    Oracle,
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selector::Vote => "vote",
            Selector::Lprm => "lprm",
            Selector::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub n_sup_max: usize,
    pub act: bool,
    pub halt_rule: HaltRule,
    pub decoder: DecoderMode,
    pub z0: Z0Mode,
    /// Keep pooled `h` per step (for dumps).
    pub keep_h: bool,
    /// Truncate predictions to this many tokens (drop padding positions).
    pub output_len: Option<usize>,
}

impl RolloutConfig {
    pub fn new(n_sup_max: usize) -> Self {
        RolloutConfig {
            n_sup_max,
            act: false,
            halt_rule: HaltRule::TwoValue,
            decoder: DecoderMode::Argmax,
            z0: Z0Mode::Fixed,
            keep_h: false,
            output_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub prediction: Vec<usize>,
    pub q_halt: f64,
    pub q_continue: f64,
    pub value: f64,
    /// Mean over content positions of `h`.
    pub h_pooled: Option<Vec<f32>>,
    /// Cross-entropy against the target, when one was supplied.
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    /// 1-based supervision step at which the rollout stopped.
    pub halt_step: usize,
    pub final_prediction: Vec<usize>,
}

impl TrajectoryRecord {
    pub fn final_value(&self) -> f64 {
        self.steps.last().map_or(f64::NEG_INFINITY, |s| s.value)
    }
}

/// Streams for one trajectory of one input.
fn streams(seed: u64, input_id: u64, traj_id: u64) -> (RngStream, RngStream, RngStream) {
    (
        RngStream::derived(seed, &[labels::EVAL, input_id, traj_id]),
        RngStream::derived(seed, &[labels::DECODER_SAMPLING, input_id, traj_id]),
        RngStream::derived(seed, &[labels::RANDOM_Z0, input_id, traj_id]),
    )
}

fn halts(rule: HaltRule, q_halt: f64, q_continue: f64) -> bool {
    match rule {
        HaltRule::TwoValue => q_halt > q_continue,
        HaltRule::Sigmoid => q_halt > 0.0,
    }
}

fn sample_tokens(logits: &Tensor<f32>, rng: &mut RngStream) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
            let weights: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
            let mut u = rng.uniform() * weights.iter().sum::<f64>();
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            weights.len() - 1
        })
        .collect()
}

fn cross_entropy(logits: &Tensor<f32>, y: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, &t) in y.iter().enumerate().take(logits.rows()) {
        if t == 0 {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let lse = max + row.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln();
        total += lse - f64::from(row[t]);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// One prior-mode trajectory for `input`, on the streams of
/// `(seed, input_id, traj_id)`. `target` only feeds the per-step loss.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    input: Option<&[usize]>,
    target: Option<&[usize]>,
    cfg: &RolloutConfig,
    seed: u64,
    input_id: u64,
    traj_id: u64,
) -> Result<TrajectoryRecord> {
    if cfg.n_sup_max == 0 {
        return Err(GramError::config("n_sup_max must be at least 1"));
    }
    let mc = model.config();
    let (mut latent_rng, mut decoder_rng, mut z0_rng) = streams(seed, input_id, traj_id);
    let mut z = match cfg.z0 {
        Z0Mode::Fixed => z0.clone(),
        Z0Mode::Random => LatentState::sample(mc, &mut z0_rng),
    };
    let out_len = cfg.output_len.unwrap_or(mc.seq_len).min(mc.seq_len);
    let mut steps = Vec::with_capacity(cfg.n_sup_max);
    for _ in 0..cfg.n_sup_max {
        let mut tape = Tape::inference(params);
        let e_x = model.encode(&mut tape, input)?;
        let h = tape.constant(z.h);
        let l = tape.constant(z.l);
        let step = model.supervision_step(&mut tape, h, l, e_x, Mode::Prior, None, &mut latent_rng, false)?;
        let dec = model.decode(&mut tape, step.h)?;
        let logits = tape.value(dec.logits);
        let mut prediction = match cfg.decoder {
            DecoderMode::Argmax => logits.argmax_rows(),
            DecoderMode::Sampled => sample_tokens(logits, &mut decoder_rng),
        };
        prediction.truncate(out_len);
        let q = tape.value(dec.q).data();
        let (q_halt, q_continue) = (f64::from(q[0]), f64::from(q[1]));
        let value = f64::from(tape.value(dec.value).item());
        let loss = target.map(|y| cross_entropy(logits, y));
        let h_val = tape.value(step.h).clone();
        let h_pooled = cfg.keep_h.then(|| {
            let p = mc.n_puzzle;
            let mut acc = vec![0.0f64; mc.d_model];
            for r in p..p + mc.seq_len {
                for (a, &v) in acc.iter_mut().zip(h_val.row(r)) {
                    *a += f64::from(v);
                }
            }
            acc.iter().map(|a| (a / mc.seq_len as f64) as f32).collect()
        });
        z = LatentState { h: h_val, l: tape.value(step.l).clone() };
        steps.push(StepRecord { prediction, q_halt, q_continue, value, h_pooled, loss });
        if cfg.act && halts(cfg.halt_rule, q_halt, q_continue) {
            break;
        }
    }
    let halt_step = steps.len();
    let final_prediction = steps.last().expect("at least one step").prediction.clone();
    Ok(TrajectoryRecord { steps, halt_step, final_prediction })
}

/// `width` independent rollouts on trajectory streams `1..=width`.
#[allow(clippy::too_many_arguments)]
pub fn sample_width(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    input: Option<&[usize]>,
    width: usize,
    cfg: &RolloutConfig,
    seed: u64,
    input_id: u64,
    exec: Exec,
) -> Result<Vec<TrajectoryRecord>> {
    if width == 0 {
        return Err(GramError::config("width must be at least 1"));
    }
    exec.try_map_indexed(width, |i| rollout(model, params, z0, input, None, cfg, seed, input_id, i as u64 + 1))
}

/// Rollouts for every item, flattened over `(item, trajectory)` so the
/// executor sees all of them at once. Item `i` uses input id `i`.
#[allow(clippy::too_many_arguments)]
pub fn sample_items(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    items: &[EvalItem],
    width: usize,
    cfg: &RolloutConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<TrajectoryRecord>>> {
    if width == 0 {
        return Err(GramError::config("width must be at least 1"));
    }
    let flat = exec.try_map_indexed(items.len() * width, |k| {
        let (i, j) = (k / width, k % width);
        rollout(model, params, z0, items[i].input.as_deref(), None, cfg, seed, i as u64, j as u64 + 1)
    })?;
    let mut out = Vec::with_capacity(items.len());
    let mut it = flat.into_iter();
    for _ in 0..items.len() {
        out.push(it.by_ref().take(width).collect());
    }
    Ok(out)
}

// --------------------------------------------------------------- selection

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub index: usize,
    pub chosen: Vec<usize>,
    pub method: Selector,
    /// Vote count or value per candidate.
    pub scores: Vec<f64>,
    pub candidates: Vec<Vec<usize>>,
}

/// Most frequent exact sequence; ties go to the lowest trajectory index.
pub fn majority_vote(candidates: &[Vec<usize>]) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(GramError::usage("majority vote needs at least one candidate"));
    }
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    for c in candidates {
        *counts.entry(c.as_slice()).or_insert(0) += 1;
    }
    let scores: Vec<f64> = candidates.iter().map(|c| counts[c.as_slice()] as f64).collect();
    let index = argmax_first(&scores);
    Ok(SelectionResult { index, chosen: candidates[index].clone(), method: Selector::Vote, scores, candidates: candidates.to_vec() })
}

/// Highest terminal value; ties go to the lowest index.
pub fn best_of_n_lprm(candidates: &[Vec<usize>], values: &[f64]) -> Result<SelectionResult> {
    if candidates.is_empty() || candidates.len() != values.len() {
        return Err(GramError::usage("best-of-n needs one value per candidate"));
    }
    let index = argmax_first(values);
    Ok(SelectionResult { index, chosen: candidates[index].clone(), method: Selector::Lprm, scores: values.to_vec(), candidates: candidates.to_vec() })
}

/// First valid candidate, or candidate 0 when none is valid.
pub fn oracle_select(candidates: &[Vec<usize>], valid: impl Fn(&[usize]) -> bool) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(GramError::usage("oracle selection needs at least one candidate"));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| f64::from(u8::from(valid(c)))).collect();
    let index = argmax_first(&scores);
    Ok(SelectionResult { index, chosen: candidates[index].clone(), method: Selector::Oracle, scores, candidates: candidates.to_vec() })
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Applies `selector` to the first `width` trajectories.
pub fn select(spec: &TaskSpec, item: &EvalItem, trajs: &[TrajectoryRecord], width: usize, selector: Selector) -> Result<SelectionResult> {
    let used = &trajs[..width.min(trajs.len())];
    let candidates: Vec<Vec<usize>> = used.iter().map(|t| t.final_prediction.clone()).collect();
    match selector {
        Selector::Vote => majority_vote(&candidates),
        Selector::Lprm => best_of_n_lprm(&candidates, &used.iter().map(TrajectoryRecord::final_value).collect::<Vec<_>>()),
        Selector::Oracle => oracle_select(&candidates, |c| oracles::is_valid_prediction(spec, item.input.as_deref(), c)),
    }
}

// ----------------------------------------------------------------- metrics

/// Metrics over `width` samples per distinct input of `split`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    ds: &Dataset,
    split: &str,
    width: usize,
    cfg: &RolloutConfig,
    seed: u64,
    exec: Exec,
) -> Result<(MetricsReport, Vec<Vec<TrajectoryRecord>>)> {
    let items = ds.eval_items(ds.split(split)?);
    if items.is_empty() {
        return Ok((MetricsReport { n_samples: width, ..Default::default() }, Vec::new()));
    }
    let trajs = sample_items(model, params, z0, &items, width, cfg, seed, exec)?;
    let report = metrics_for(ds, &items, &trajs, width)?;
    Ok((report, trajs))
}

/// Metrics of the final predictions of the first `width` trajectories.
pub fn metrics_for(ds: &Dataset, items: &[EvalItem], trajs: &[Vec<TrajectoryRecord>], width: usize) -> Result<MetricsReport> {
    let inputs: Vec<Option<Vec<usize>>> = items.iter().map(|it| it.input.clone()).collect();
    let sets: Vec<Vec<Vec<usize>>> =
        items.iter().map(|it| if ds.spec.conditional { ds.solution_sets[it.set_id].clone() } else { Vec::new() }).collect();
    let preds: Vec<Vec<Vec<usize>>> = trajs.iter().map(|t| t[..width].iter().map(|r| r.final_prediction.clone()).collect()).collect();
    oracles::compute_metrics(&ds.spec, &inputs, &sets, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub depth: usize,
    pub width: usize,
    pub selector: Selector,
    /// Accuracy of the selected candidate.
    pub accuracy: f64,
    /// Coverage of all `width` candidates.
    pub coverage: f64,
    /// Mean conflicts of the selected candidate.
    pub conflict: f64,
    pub n_examples: usize,
}

/// Every `(depth, width)` cell. Each depth samples `max(widths)` rollouts
/// with ACT off; narrower widths reuse the leading trajectories.
#[allow(clippy::too_many_arguments)]
pub fn depth_width_sweep(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    ds: &Dataset,
    split: &str,
    depths: &[usize],
    widths: &[usize],
    selector: Selector,
    base: &RolloutConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<SweepCell>> {
    let max_width = widths.iter().copied().max().ok_or_else(|| GramError::config("sweep needs at least one width"))?;
    if widths.contains(&0) || depths.contains(&0) {
        return Err(GramError::config("sweep depths and widths must be positive"));
    }
    let items = ds.eval_items(ds.split(split)?);
    let inputs: Vec<Option<Vec<usize>>> = items.iter().map(|it| it.input.clone()).collect();
    let sets: Vec<Vec<Vec<usize>>> =
        items.iter().map(|it| if ds.spec.conditional { ds.solution_sets[it.set_id].clone() } else { Vec::new() }).collect();
    let mut cells = Vec::with_capacity(depths.len() * widths.len());
    for &depth in depths {
        let cfg = RolloutConfig { n_sup_max: depth, act: false, ..base.clone() };
        let trajs = sample_items(model, params, z0, &items, max_width, &cfg, seed, exec)?;
        for &width in widths {
            let chosen: Vec<Vec<Vec<usize>>> =
                items.iter().zip(&trajs).map(|(it, t)| select(&ds.spec, it, t, width, selector).map(|s| vec![s.chosen])).collect::<Result<_>>()?;
            let selected = oracles::compute_metrics(&ds.spec, &inputs, &sets, &chosen)?;
            let covered = metrics_for(ds, &items, &trajs, width)?;
            cells.push(SweepCell {
                depth,
                width,
                selector,
                accuracy: selected.accuracy,
                coverage: covered.coverage,
                conflict: selected.conflict,
                n_examples: items.len(),
            });
        }
    }
    Ok(cells)
}

pub const SWEEP_HEADER: &str = "depth,width,selector,accuracy,coverage,conflict,n_examples";

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for c in cells {
        writeln!(s, "{},{},{},{:.8e},{:.8e},{:.8e},{}", c.depth, c.width, c.selector, c.accuracy, c.coverage, c.conflict, c.n_examples)
            .expect("writing to a String");
    }
    s
}

// ------------------------------------------------------------------- dumps

/// One CSV row of a trajectory dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRow {
    pub input_id: usize,
    pub traj_id: usize,
    pub step: usize,
    pub halted: bool,
    pub loss: f64,
    pub h: Vec<f32>,
}

/// Rows for `trajs[input][traj]`, which must have been run with `keep_h`.
/// Steps are 1-based; a missing target loss is written as NaN.
pub fn dump_rows(trajs: &[Vec<TrajectoryRecord>]) -> Result<Vec<DumpRow>> {
    let mut rows = Vec::new();
    for (i, per_input) in trajs.iter().enumerate() {
        for (j, t) in per_input.iter().enumerate() {
            for (k, s) in t.steps.iter().enumerate() {
                let h = s.h_pooled.clone().ok_or_else(|| GramError::usage("trajectory dump needs rollouts with keep_h"))?;
                rows.push(DumpRow { input_id: i, traj_id: j + 1, step: k + 1, halted: k + 1 == t.halt_step, loss: s.loss.unwrap_or(f64::NAN), h });
            }
        }
    }
    Ok(rows)
}

pub fn dump_csv(rows: &[DumpRow], d_model: usize) -> String {
    let mut s = String::from("input_id,traj_id,step,halted,loss");
    for k in 0..d_model {
        write!(s, ",h_{k}").expect("writing to a String");
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{},{},{:.8e}", r.input_id, r.traj_id, r.step, u8::from(r.halted), r.loss).expect("writing to a String");
        for v in &r.h {
            write!(s, ",{v:.8e}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub fn parse_dump_csv(text: &str) -> Result<Vec<DumpRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| GramError::data("empty trajectory dump"))?;
    let d = header.split(',').count().checked_sub(5).ok_or_else(|| GramError::data("trajectory dump header too short"))?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || GramError::data(format!("trajectory dump line {}: malformed row", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d + 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok(DumpRow {
                input_id: num(f[0])?,
                traj_id: num(f[1])?,
                step: num(f[2])?,
                halted: num(f[3])? == 1,
                loss: f[4].parse().map_err(|_| bad())?,
                h: f[5..].iter().map(|v| v.parse::<f32>().map_err(|_| bad())).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Rolls out `width` trajectories per item (with `keep_h` and the item's
/// stored target for the loss column) and writes the CSV.
#[allow(clippy::too_many_arguments)]
pub fn dump_trajectories(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    items: &[(Option<Vec<usize>>, Option<Vec<usize>>)],
    width: usize,
    cfg: &RolloutConfig,
    seed: u64,
    exec: Exec,
    path: &Path,
) -> Result<usize> {
    let cfg = RolloutConfig { keep_h: true, ..cfg.clone() };
    let flat = exec.try_map_indexed(items.len() * width, |k| {
        let (i, j) = (k / width, k % width);
        rollout(model, params, z0, items[i].0.as_deref(), items[i].1.as_deref(), &cfg, seed, i as u64, j as u64 + 1)
    })?;
    let grouped: Vec<Vec<TrajectoryRecord>> = flat.chunks(width.max(1)).map(<[_]>::to_vec).collect();
    let rows = dump_rows(&grouped)?;
    fs::write(path, dump_csv(&rows, model.config().d_model))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(v: &[&[usize]]) -> Vec<Vec<usize>> {
        v.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn vote_examples() {
        let r = majority_vote(&seqs(&[&[1], &[1], &[2]])).unwrap();
        assert_eq!(r.chosen, vec![1]);
        let r = majority_vote(&seqs(&[&[3], &[1], &[2]])).unwrap();
        assert_eq!(r.index, 0);
        let r = majority_vote(&seqs(&[&[2], &[1], &[1], &[2]])).unwrap();
        assert_eq!(r.index, 0);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn lprm_examples() {
        let c = seqs(&[&[1], &[2], &[3]]);
        assert_eq!(best_of_n_lprm(&c, &[0.2, 0.9, 0.5]).unwrap().index, 1);
        assert_eq!(best_of_n_lprm(&c[..1], &[0.0]).unwrap().index, 0);
        assert_eq!(best_of_n_lprm(&c, &[0.5, 0.5, 0.1]).unwrap().index, 0);
    }

    #[test]
    fn dump_round_trip() {
        let rows = vec![DumpRow { input_id: 0, traj_id: 1, step: 1, halted: true, loss: 0.125, h: vec![1.0 / 3.0, -2.5e-7] }];
        let back = parse_dump_csv(&dump_csv(&rows, 2)).unwrap();
        assert_eq!(back, rows);
    }
}

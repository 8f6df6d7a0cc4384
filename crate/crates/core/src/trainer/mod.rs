//! Deep-supervision training: one optimizer update per supervision step,
//! with the latent carried detached from step to step.

pub mod checkpoint;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::inference::{self, RolloutConfig};
use crate::model::{LatentState, Mode, Model, ModelConfig};
use crate::numerics::rng::{labels, RngStream};
use crate::numerics::{Exec, ParamStore, Tape, Tensor, Var};
use crate::objective::{self, ElboReport, LossBreakdown, StepLoss};
use crate::oracles::MetricsReport;
use crate::tasks::Dataset;
use checkpoint::Checkpoint;
use optim::AdamW;

/// Where the non-final transitions of a training step draw their noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyNoise {
    /// The whole step follows the posterior.
    Posterior,
    /// Non-final transitions follow the prior; only the final one, whose KL
    /// the surrogate pays for, sees the target.
    Prior,
}

/// How the halt head is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActVariant {
    /// Squared error to halt and bootstrapped continue targets.
    TwoValue,
    /// Binary cross-entropy on the halt logit only.
    HaltOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    /// KL weight.
    pub beta: f64,
    /// KL balance.
    pub alpha: f64,
    pub seed: u64,
    /// Evaluate every this many batches.
    pub eval_every: usize,
    pub act: ActVariant,
    pub early_noise: EarlyNoise,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1.0,
            grad_clip: 1.0,
            batch_size: 64,
            epochs: 10,
            ema_decay: 0.999,
            beta: 0.1,
            alpha: objective::DEFAULT_ALPHA,
            seed: 0,
            eval_every: 10,
            act: ActVariant::TwoValue,
            early_noise: EarlyNoise::Posterior,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr >= 0.0, "lr must be non-negative"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (self.grad_clip > 0.0, "grad_clip must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.ema_decay > 0.0 && self.ema_decay < 1.0, "ema_decay must lie in (0, 1)"),
            (self.beta >= 0.0, "beta must be non-negative"),
            ((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]"),
            (self.eval_every > 0, "eval_every must be positive"),
            ((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2), "adam betas must lie in [0, 1)"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(GramError::config(*msg)),
            None => Ok(()),
        }
    }
}

/// One training pair; `input: None` is the empty conditioning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Option<Vec<usize>>,
    pub target: Vec<usize>,
}

struct ExampleStep {
    grads: Vec<Tensor<f32>>,
    loss: StepLoss,
    z: LatentState<f32>,
    first: Tensor<f32>,
}

/// Carried per-example state between supervision steps.
#[derive(Clone)]
struct Carry {
    z: LatentState<f32>,
    /// Detached first row of the previous step's `h`, for the continue target.
    prev_first: Option<Tensor<f32>>,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub ema: Vec<Tensor<f32>>,
    pub opt: AdamW,
    pub z0: LatentState<f32>,
    /// Optimizer updates so far.
    pub step: u64,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Model::build::<f32>(model_cfg.clone(), &mut RngStream::derived(cfg.seed, &[labels::PARAM_INIT]))?;
        let z0 = LatentState::sample(&model_cfg, &mut RngStream::derived(cfg.seed, &[labels::Z0_INIT]));
        let ema = params.tensors().to_vec();
        let opt = AdamW::new(params.tensors(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Trainer { model, cfg, params, ema, opt, z0, step: 0, exec: Exec::default() })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        let (model, fresh) = Model::build::<f32>(ck.model.clone(), &mut RngStream::new(0, 0))?;
        if fresh.names() != ck.params.names() {
            return Err(GramError::Checkpoint("parameter manifest does not match the model layout".into()));
        }
        let params = fresh.with_tensors(ck.params.tensors().to_vec())?;
        Ok(Trainer { model, cfg: ck.train, params, ema: ck.ema, opt: ck.opt, z0: ck.z0, step: ck.step, exec: Exec::default() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            params: self.params.clone(),
            z0: self.z0.clone(),
            ema: self.ema.clone(),
            opt: self.opt.clone(),
            step: self.step,
        }
    }

    pub fn ema_params(&self) -> ParamStore<f32> {
        self.params.with_tensors(self.ema.clone()).expect("ema mirrors params")
    }

    /// `N_sup` updates on one batch.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(GramError::data("empty batch"));
        }
        let n_sup = self.model.config().n_sup;
        let mut carry: Vec<Carry> = vec![Carry { z: self.z0.clone(), prev_first: None }; batch.len()];
        let mut per_step = Vec::with_capacity(n_sup);
        for n in 0..n_sup {
            let last = n + 1 == n_sup;
            let update_id = self.step;
            let (model, params, cfg) = (&self.model, self.params.tensors(), &self.cfg);
            let results = self.exec.try_map_indexed(batch.len(), |i| {
                let mut rng = RngStream::derived(cfg.seed, &[labels::TRAIN_NOISE, update_id, i as u64]);
                example_step(model, params, cfg, &batch[i], &carry[i], last, &mut rng)
            })?;

            let scale = 1.0 / batch.len() as f32;
            let mut grads: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut losses = Vec::with_capacity(batch.len());
            for (i, r) in results.into_iter().enumerate() {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.add_assign(g);
                }
                losses.push(r.loss);
                carry[i] = Carry { z: r.z, prev_first: Some(r.first) };
            }
            for g in &mut grads {
                g.scale_assign(scale);
            }
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(GramError::numeric(format!("non-finite gradient at update {}", self.step)));
            }
            optim::clip_global_norm(&mut grads, self.cfg.grad_clip);
            let decay = self.params.decays().to_vec();
            self.opt.step(self.params.tensors_mut(), &grads, &decay, self.cfg.lr, self.cfg.weight_decay);
            optim::ema_update(&mut self.ema, self.params.tensors(), self.cfg.ema_decay);
            self.step += 1;
            per_step.push(mean_step_loss(&losses));
        }
        Ok(LossBreakdown::from_steps(per_step))
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &[Example], epoch: u64) -> Result<Vec<LossBreakdown>> {
        let mut out = Vec::new();
        for chunk in self.epoch_order(data.len(), epoch).chunks(self.cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            out.push(self.train_step(&batch)?);
        }
        Ok(out)
    }

    fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::derived(self.cfg.seed, &[labels::SHUFFLE, epoch]).shuffle(&mut order);
        order
    }
}

/// Sampling metrics under raw and EMA parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub raw: MetricsReport,
    pub ema: MetricsReport,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Optimizer updates so far.
    pub step: u64,
    pub epoch: u64,
    /// Loss of the most recent batch, without the per-step detail.
    pub loss: LossBreakdown,
    pub elbo: Option<ElboReport>,
    pub eval: Option<EvalReport>,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serialises")
    }
}

impl Trainer {
    /// Metrics for `width` prior samples per distinct input of `split`.
    pub fn evaluate(&self, ds: &Dataset, split: &str, width: usize, rollout: &RolloutConfig, seed: u64) -> Result<EvalReport> {
        let raw = inference::evaluate_split(&self.model, self.params.tensors(), &self.z0, ds, split, width, rollout, seed, self.exec)?.0;
        let ema = inference::evaluate_split(&self.model, &self.ema, &self.z0, ds, split, width, rollout, seed, self.exec)?.0;
        Ok(EvalReport { raw, ema })
    }

    /// Trains for `epochs` more epochs. Every `eval_every` batches the EMA
    /// parameters are probed on `val` (same noise draws each time) and a
    /// record is handed to `on_record`; a final record closes the run.
    pub fn fit(
        &mut self,
        train: &[Example],
        val: &[Example],
        epochs: usize,
        first_epoch: u64,
        mut on_record: impl FnMut(&Self, LogRecord) -> Result<()>,
    ) -> Result<()> {
        let mut batches = 0usize;
        let mut last = LossBreakdown::default();
        for e in 0..epochs as u64 {
            let epoch = first_epoch + e;
            for chunk in self.epoch_order(train.len(), epoch).chunks(self.cfg.batch_size) {
                let batch: Vec<Example> = chunk.iter().map(|&i| train[i].clone()).collect();
                last = self.train_step(&batch)?;
                last.per_step.clear();
                batches += 1;
                if batches % self.cfg.eval_every == 0 {
                    let record = self.log_record(epoch, &last, val)?;
                    on_record(self, record)?;
                }
            }
        }
        if batches % self.cfg.eval_every != 0 {
            let record = self.log_record(first_epoch + epochs as u64, &last, val)?;
            on_record(self, record)?;
        }
        Ok(())
    }

    fn log_record(&self, epoch: u64, loss: &LossBreakdown, val: &[Example]) -> Result<LogRecord> {
        let elbo = if val.is_empty() { None } else { Some(elbo_probe(&self.model, &self.ema, &self.z0, val, self.cfg.seed, 0, self.exec)?) };
        Ok(LogRecord { step: self.step, epoch, loss: loss.clone(), elbo, eval: None })
    }
}

fn mean_step_loss(losses: &[StepLoss]) -> StepLoss {
    let n = losses.len() as f64;
    let mean = |f: fn(&StepLoss) -> f64| losses.iter().map(f).sum::<f64>() / n;
    StepLoss {
        nll: mean(|s| s.nll),
        kl_raw: mean(|s| s.kl_raw),
        kl_balanced: mean(|s| s.kl_balanced),
        act_loss: mean(|s| s.act_loss),
        lprm_loss: mean(|s| s.lprm_loss),
        total: mean(|s| s.total),
        token_accuracy: mean(|s| s.token_accuracy),
        exact: losses.iter().all(|s| s.exact),
    }
}

fn scalar_f64(tape: &Tape<'_, f32>, v: Var) -> f64 {
    f64::from(tape.value(v).item())
}

fn example_step(
    model: &Model,
    params: &[Tensor<f32>],
    cfg: &TrainConfig,
    ex: &Example,
    carry: &Carry,
    last: bool,
    rng: &mut RngStream,
) -> Result<ExampleStep> {
    let mut tape = Tape::new(params);
    let e_x = model.encode(&mut tape, ex.input.as_deref())?;
    let y_emb = model.embed_target(&mut tape, &ex.target)?;
    let h0 = tape.constant(carry.z.h.clone());
    let l0 = tape.constant(carry.z.l.clone());
    let early = match cfg.early_noise {
        EarlyNoise::Posterior => Mode::Posterior,
        EarlyNoise::Prior => Mode::Prior,
    };
    let step = model.supervision_step_split(&mut tape, h0, l0, e_x, early, Mode::Posterior, Some(y_emb), rng, true)?;
    let dec = model.decode(&mut tape, step.h)?;
    let sur = objective::surrogate_step_loss(&mut tape, model, &step, dec.logits, &ex.target, cfg.beta, cfg.alpha)?;

    let pred = tape.value(dec.logits).argmax_rows();
    let (acc, exact) = objective::token_accuracy(&pred, &ex.target);
    let halt_target = if exact { 1.0f32 } else { 0.0 };

    // halt head
    let q = tape.value(dec.q).data().to_vec();
    let q_halt = tape.slice_cols(dec.q, 0, 1)?;
    let mut act = match cfg.act {
        ActVariant::TwoValue => tape.squared_error(q_halt, &[halt_target])?,
        ActVariant::HaltOnly => tape.bce_logits(q_halt, &[halt_target])?,
    };
    if cfg.act == ActVariant::TwoValue {
        let q_cont = tape.slice_cols(dec.q, 1, 2)?;
        if last {
            let term = tape.squared_error(q_cont, &[halt_target])?;
            act = tape.add(act, term)?;
        }
        if let Some(prev) = &carry.prev_first {
            let prev_h = tape.constant(prev.clone());
            let q_prev = model.halt_head().forward(&mut tape, prev_h)?;
            let q_prev_cont = tape.slice_cols(q_prev, 1, 2)?;
            let term = tape.squared_error(q_prev_cont, &[q[0].max(q[1])])?;
            act = tape.add(act, term)?;
        }
    }

    // value head at each transition of this step
    let r = acc as f32;
    let mut lprm: Option<Var> = None;
    for tr in &step.transitions {
        let v = model.value_of(&mut tape, tr.h)?;
        let term = tape.squared_error(v, &[r])?;
        lprm = Some(match lprm {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let lprm = lprm.expect("at least one transition");

    let aux = tape.add(act, lprm)?;
    let total = tape.add(sur.loss, aux)?;
    let total_value = scalar_f64(&tape, total);
    if !total_value.is_finite() {
        return Err(GramError::numeric("non-finite training loss"));
    }
    let loss = StepLoss {
        nll: sur.nll,
        kl_raw: sur.kl,
        kl_balanced: sur.kl,
        act_loss: scalar_f64(&tape, act),
        lprm_loss: scalar_f64(&tape, lprm),
        total: total_value,
        token_accuracy: acc,
        exact,
    };
    let grads = tape.backward(total)?.into_param_grads(params);
    let h = tape.value(step.h).clone();
    let first = Tensor::new(vec![1, h.cols()], h.row(0).to_vec())?;
    let z = LatentState { h, l: tape.value(step.l).clone() };
    Ok(ExampleStep { grads, loss, z, first })
}

/// Full and truncated bounds over a validation set, averaged per example.
pub fn elbo_probe(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    data: &[Example],
    seed: u64,
    probe_id: u64,
    exec: Exec,
) -> Result<ElboReport> {
    let n_sup = model.config().n_sup;
    let reports = exec.try_map_indexed(data.len(), |i| {
        let mut rng = RngStream::derived(seed, &[labels::ELBO_PROBE, probe_id, i as u64]);
        let ex = &data[i];
        objective::full_trajectory_elbo(model, params, z0, ex.input.as_deref(), &ex.target, n_sup, &mut rng).map(|(r, _)| r)
    })?;
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&ElboReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(ElboReport {
        neg_elbo: mean(|r| r.neg_elbo),
        surrogate: mean(|r| r.surrogate),
        truncated: mean(|r| r.truncated),
        gap: mean(|r| r.gap),
        terminal_nll: mean(|r| r.terminal_nll),
        kl_terms: Vec::new(),
        step_nll: Vec::new(),
    })
}

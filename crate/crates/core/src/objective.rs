//! Training losses and the full-trajectory bound.
//!
//! Reductions: reconstruction is a mean over non-ignored content positions;
//! each KL term sums over the latent width and averages over positions.

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::model::{LatentState, Mode, Model, StepOut};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::kl_diag_value;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// KL balance: share of the gradient sent to the prior side.
pub const DEFAULT_ALPHA: f64 = 0.8;

/// Closed-form `KL(N(mq, e^lq) || N(mp, e^lp))`, summed over all entries.
pub fn kl_diag_gaussian<F: Scalar>(mq: &[F], lq: &[F], mp: &[F], lp: &[F]) -> Result<f64> {
    if lq.len() != mq.len() || mp.len() != mq.len() || lp.len() != mq.len() {
        return Err(GramError::config("kl: length mismatch"));
    }
    let kl = kl_diag_value(mq, lq, mp, lp);
    if !kl.is_finite() {
        return Err(GramError::numeric("non-finite KL"));
    }
    Ok(kl)
}

/// Balanced KL on the tape: same value as the plain KL, with the prior side
/// receiving `alpha` of the gradient and the posterior side `1 - alpha`.
pub fn kl_balanced<F: Scalar>(tape: &mut Tape<'_, F>, q: (Var, Var), p: (Var, Var), alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GramError::config(format!("KL balance {alpha} outside [0, 1]")));
    }
    tape.kl_diag(q.0, q.1, p.0, p.1, F::of(1.0 - alpha), F::of(alpha))
}

/// Plain KL on the tape (gradient to both sides).
pub fn kl_raw<F: Scalar>(tape: &mut Tape<'_, F>, q: (Var, Var), p: (Var, Var)) -> Result<Var> {
    tape.kl_diag(q.0, q.1, p.0, p.1, F::one(), F::one())
}

/// Content targets with pad (token 0) ignored.
pub fn loss_targets(y: &[usize]) -> Vec<Option<usize>> {
    y.iter().map(|&t| (t != 0).then_some(t)).collect()
}

/// Fraction of non-pad target positions predicted correctly, and whether all are.
pub fn token_accuracy(pred: &[usize], y: &[usize]) -> (f64, bool) {
    let mut n = 0usize;
    let mut ok = 0usize;
    for (&p, &t) in pred.iter().zip(y) {
        if t != 0 {
            n += 1;
            ok += usize::from(p == t);
        }
    }
    if n == 0 {
        return (1.0, true);
    }
    (ok as f64 / n as f64, ok == n)
}

/// Tape handles and values of one supervision step's surrogate.
#[derive(Clone, Debug)]
pub struct SurrogateTerms {
    pub loss: Var,
    pub nll: f64,
    /// KL of the final transition (plain value).
    pub kl: f64,
    pub all_ignored: bool,
}

/// `NLL(logits, y) + beta * KL_balanced` over the final transition only.
pub fn surrogate_step_loss<F: Scalar>(
    tape: &mut Tape<'_, F>,
    model: &Model,
    step: &StepOut,
    logits: Var,
    y: &[usize],
    beta: f64,
    alpha: f64,
) -> Result<SurrogateTerms> {
    let last = step.transitions.last().ok_or_else(|| GramError::usage("empty supervision step"))?;
    let (nll_var, all_ignored) = tape.softmax_cross_entropy(logits, &loss_targets(y))?;
    let nll = tape.value(nll_var).item().to_f64();
    if model.config().guidance == crate::model::Guidance::None || beta == 0.0 {
        return Ok(SurrogateTerms { loss: nll_var, nll, kl: 0.0, all_ignored });
    }
    let (Some(q), Some(p)) = (last.posterior, last.prior) else {
        return Err(GramError::usage("surrogate loss needs posterior-mode records"));
    };
    let kl = kl_balanced(tape, q, p, alpha)?;
    let kl_value = tape.value(kl).item().to_f64();
    let weighted = tape.scale(kl, F::of(beta));
    let loss = tape.add(nll_var, weighted)?;
    Ok(SurrogateTerms { loss, nll, kl: kl_value, all_ignored })
}

/// Bootstrapped targets `(halt, continue)` per step: halt is prediction
/// correctness; continue is `max` of the next step's two values, or the
/// step's own halt target at the last step.
pub fn act_targets(q: &[[f64; 2]], correct: &[bool]) -> Result<Vec<[f64; 2]>> {
    if q.len() != correct.len() {
        return Err(GramError::config("act: q table and correctness lengths differ"));
    }
    let n = q.len();
    Ok((0..n)
        .map(|i| {
            let halt = if correct[i] { 1.0 } else { 0.0 };
            let cont = if i + 1 < n { q[i + 1][0].max(q[i + 1][1]) } else { halt };
            [halt, cont]
        })
        .collect())
}

/// Sum over steps of squared errors to both bootstrapped targets.
pub fn act_loss(q: &[[f64; 2]], correct: &[bool]) -> Result<f64> {
    let targets = act_targets(q, correct)?;
    Ok(q.iter().zip(&targets).map(|(v, t)| (v[0] - t[0]).powi(2) + (v[1] - t[1]).powi(2)).sum())
}

/// `sum_t (v_t - r)^2`.
pub fn lprm_loss(values: &[f64], r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(GramError::data(format!("value target {r} outside [0, 1]")));
    }
    Ok(values.iter().map(|v| (v - r).powi(2)).sum())
}

/// Per-step entry of a [`LossBreakdown`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub nll: f64,
    pub kl_raw: f64,
    pub kl_balanced: f64,
    pub act_loss: f64,
    pub lprm_loss: f64,
    pub total: f64,
    pub token_accuracy: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl_raw: f64,
    pub kl_balanced: f64,
    pub act_loss: f64,
    pub lprm_loss: f64,
    pub total: f64,
    pub per_step: Vec<StepLoss>,
}

impl LossBreakdown {
    /// Averages step entries into the summary fields.
    pub fn from_steps(per_step: Vec<StepLoss>) -> Self {
        let n = per_step.len().max(1) as f64;
        let mean = |f: fn(&StepLoss) -> f64| per_step.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            nll: mean(|s| s.nll),
            kl_raw: mean(|s| s.kl_raw),
            kl_balanced: mean(|s| s.kl_balanced),
            act_loss: mean(|s| s.act_loss),
            lprm_loss: mean(|s| s.lprm_loss),
            total: mean(|s| s.total),
            per_step,
        }
    }
}

/// Full trajectory bound against its truncated counterpart on one rollout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    /// Terminal NLL plus every transition's KL.
    pub neg_elbo: f64,
    /// Mean over supervision steps of the step surrogate `NLL_n + KL_n`.
    pub surrogate: f64,
    /// Terminal NLL plus only the final-transition KL of each step.
    pub truncated: f64,
    /// `neg_elbo - truncated`.
    pub gap: f64,
    pub terminal_nll: f64,
    /// Every transition's KL in order, `T * N_sup` entries.
    pub kl_terms: Vec<f64>,
    pub step_nll: Vec<f64>,
}

/// Per-transition Gaussian parameters kept for independent recomputation.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDists {
    pub mq: Tensor<f32>,
    pub lq: Tensor<f32>,
    pub mp: Tensor<f32>,
    pub lp: Tensor<f32>,
}

/// One posterior rollout of `T * N_sup` transitions without gradients.
/// Returns the report and, per transition, the Gaussian parameters used.
pub fn full_trajectory_elbo(
    model: &Model,
    params: &[Tensor<f32>],
    z0: &LatentState<f32>,
    x: Option<&[usize]>,
    y: &[usize],
    n_sup: usize,
    rng: &mut RngStream,
) -> Result<(ElboReport, Vec<Option<TransitionDists>>)> {
    let mut z = z0.clone();
    let mut kl_terms = Vec::new();
    let mut dists = Vec::new();
    let mut step_nll = Vec::with_capacity(n_sup);
    let mut step_final_kl = Vec::with_capacity(n_sup);
    let rows = model.config().positions() as f64;
    for _ in 0..n_sup {
        let mut tape = Tape::inference(params);
        let e_x = model.encode(&mut tape, x)?;
        let y_emb = model.embed_target(&mut tape, y)?;
        let (h, l) = (tape.constant(z.h.clone()), tape.constant(z.l.clone()));
        let step = model.supervision_step(&mut tape, h, l, e_x, Mode::Posterior, Some(y_emb), rng, false)?;
        for tr in &step.transitions {
            match (tr.posterior, tr.prior) {
                (Some(q), Some(p)) => {
                    let (mq, lq, mp, lp) = (tape.value(q.0), tape.value(q.1), tape.value(p.0), tape.value(p.1));
                    kl_terms.push(kl_diag_gaussian(mq.data(), lq.data(), mp.data(), lp.data())? / rows);
                    dists.push(Some(TransitionDists { mq: mq.clone(), lq: lq.clone(), mp: mp.clone(), lp: lp.clone() }));
                }
                _ => {
                    kl_terms.push(0.0);
                    dists.push(None);
                }
            }
        }
        step_final_kl.push(*kl_terms.last().expect("at least one transition"));
        let dec = model.decode(&mut tape, step.h)?;
        let (nll, _) = tape.softmax_cross_entropy(dec.logits, &loss_targets(y))?;
        step_nll.push(tape.value(nll).item().to_f64());
        z = LatentState { h: tape.value(step.h).clone(), l: tape.value(step.l).clone() };
    }
    let terminal_nll = *step_nll.last().ok_or_else(|| GramError::config("n_sup must be positive"))?;
    let neg_elbo = terminal_nll + kl_terms.iter().sum::<f64>();
    let truncated = terminal_nll + step_final_kl.iter().sum::<f64>();
    let surrogate = step_nll.iter().zip(&step_final_kl).map(|(a, b)| a + b).sum::<f64>() / n_sup as f64;
    let report = ElboReport { neg_elbo, surrogate, truncated, gap: neg_elbo - truncated, terminal_nll, kl_terms, step_nll };
    Ok((report, dists))
}

//! The recursive latent network: encoder, low/high-level core, Gaussian
//! guidance heads, decoder, halt head and value head.
//!
//! One transition refines `l` for `K` steps with `l <- f_L(l, h + e_x)`, then
//! proposes `u = f_H(h, l)` and moves `h = u + eps` with `eps` drawn from the
//! prior head `p(eps | u)` at inference or the target-conditioned posterior
//! head `q(eps | u, y)` in training. Only `h` is stochastic.

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::{gaussian_reparam, AttentionBlock, Linear, ParamStore, RmsNorm, Scalar, SwiGlu, SwiGluBlock, Tape, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoreKind {
    Attention,
    Swiglu,
}

/// How the high-level noise is parameterised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    /// Learned mean and variance.
    Full,
    /// No noise at all; the deterministic recursive baseline.
    None,
    /// Zero mean, learned variance.
    StochasticOnly,
    /// Learned mean, zero variance.
    GuideOnly,
}

impl Guidance {
    pub fn is_stochastic(self) -> bool {
        matches!(self, Guidance::Full | Guidance::StochasticOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Content positions (excluding puzzle tokens).
    pub seq_len: usize,
    pub n_puzzle: usize,
    pub vocab: usize,
    pub k_low: usize,
    pub t_high: usize,
    pub n_sup: usize,
    pub core: CoreKind,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub head_hidden: usize,
    /// Rotary base; `None` disables position encoding.
    pub rope_base: Option<f64>,
    /// One network serves as both `f_L` and `f_H`.
    pub shared_core: bool,
    pub guidance: Guidance,
    /// Reserve a learned empty-conditioning vector.
    pub unconditional: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for a task of the given length and vocabulary.
    pub fn desk(seq_len: usize, vocab: usize) -> Self {
        ModelConfig {
            d_model: 128,
            seq_len,
            n_puzzle: 16,
            vocab,
            k_low: 2,
            t_high: 2,
            n_sup: 8,
            core: CoreKind::Attention,
            layers: 2,
            heads: 4,
            ffn: 256,
            head_hidden: 128,
            rope_base: Some(10_000.0),
            shared_core: true,
            guidance: Guidance::Full,
            unconditional: false,
        }
    }

    /// Full-size architecture (Sudoku shape).
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            seq_len: 81,
            n_puzzle: 16,
            vocab: 11,
            k_low: 6,
            t_high: 3,
            n_sup: 16,
            core: CoreKind::Attention,
            layers: 2,
            heads: 8,
            ffn: 1536,
            head_hidden: 512,
            rope_base: Some(10_000.0),
            shared_core: true,
            guidance: Guidance::Full,
            unconditional: false,
        }
    }

    pub fn positions(&self) -> usize {
        self.seq_len + self.n_puzzle
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("seq_len", self.seq_len),
            ("vocab", self.vocab),
            ("k_low", self.k_low),
            ("t_high", self.t_high),
            ("n_sup", self.n_sup),
            ("layers", self.layers),
            ("ffn", self.ffn),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GramError::config(format!("{name} must be at least 1")));
            }
        }
        if self.n_puzzle == 0 {
            return Err(GramError::config("n_puzzle must be at least 1 (halt and value heads read the first token)"));
        }
        if self.core == CoreKind::Attention {
            if self.heads == 0 || self.d_model % self.heads != 0 {
                return Err(GramError::config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
            }
            if self.rope_base.is_some() && (self.d_model / self.heads) % 2 != 0 {
                return Err(GramError::config("rotary encoding needs an even head width"));
            }
        }
        Ok(())
    }
}

/// The pair `(h, l)`, each `[positions, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<F> {
    pub h: Tensor<F>,
    pub l: Tensor<F>,
}

impl<F: Scalar> LatentState<F> {
    /// Standard normal draw; used once for the frozen initial state.
    pub fn sample(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let shape = [cfg.positions(), cfg.d_model];
        let h = rng.normal_tensor(&shape);
        let l = rng.normal_tensor(&shape);
        LatentState { h, l }
    }

    pub fn cast<G: Scalar>(&self) -> LatentState<G> {
        LatentState { h: self.h.cast(), l: self.l.cast() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Prior,
    Posterior,
    /// `eps = 0`.
    Deterministic,
}

#[derive(Clone, Debug)]
enum CoreLayer {
    Attention(AttentionBlock),
    Swiglu(SwiGluBlock),
}

/// A stack of residual blocks closed by a final normalisation.
#[derive(Clone, Debug)]
pub struct Core {
    layers: Vec<CoreLayer>,
    norm: RmsNorm,
}

impl Core {
    fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let lname = format!("{name}.{i}");
            layers.push(match cfg.core {
                CoreKind::Attention => CoreLayer::Attention(AttentionBlock::new(store, &lname, cfg.d_model, cfg.heads, cfg.ffn, cfg.rope_base, rng)?),
                CoreKind::Swiglu => CoreLayer::Swiglu(SwiGluBlock::new(store, &lname, cfg.d_model, cfg.ffn, rng)),
            });
        }
        Ok(Core { layers, norm: RmsNorm::new(store, &format!("{name}.final_norm"), cfg.d_model) })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                CoreLayer::Attention(b) => b.forward(tape, x)?,
                CoreLayer::Swiglu(b) => b.forward(tape, x)?,
            };
        }
        self.norm.forward(tape, x)
    }
}

/// Per-position diagonal Gaussian: separate gated MLPs for mean and log-variance.
#[derive(Clone, Debug)]
struct GaussHead {
    mu: SwiGlu,
    log_var: SwiGlu,
}

impl GaussHead {
    fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut RngStream) -> Self {
        let mu = SwiGlu::new(store, &format!("{name}.mu"), d_in, hidden, d_out, rng);
        let log_var = SwiGlu::new(store, &format!("{name}.log_var"), d_in, hidden, d_out, rng);
        // start every head at N(0, I)
        for w in [mu.down.w, log_var.down.w] {
            let shape = store.get(w).shape().to_vec();
            store.tensors_mut()[w] = Tensor::zeros(&shape);
        }
        GaussHead { mu, log_var }
    }
}

/// Tape handles produced by one latent transition.
#[derive(Clone, Debug)]
pub struct Transition {
    pub h: Var,
    pub l: Var,
    pub u: Var,
    pub eps: Var,
    /// Prior `(mu, log_var)`; absent without guidance.
    pub prior: Option<(Var, Var)>,
    /// Posterior `(mu, log_var)`; present in posterior mode only.
    pub posterior: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct StepOut {
    pub h: Var,
    pub l: Var,
    pub transitions: Vec<Transition>,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[seq_len, V]` over content positions.
    pub logits: Var,
    /// `[1, 2]`: `(q_halt, q_continue)`.
    pub q: Var,
    /// `[1, 1]`.
    pub value: Var,
}

/// Parameter layout and forward computation. Parameters themselves live in
/// a [`ParamStore`] so they can be swapped (raw vs EMA) or cast to `f64`.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    tok_emb: usize,
    puzzle_emb: usize,
    empty_emb: Option<usize>,
    core_l: Core,
    core_h: Option<Core>,
    prior: Option<GaussHead>,
    posterior: Option<GaussHead>,
    decoder: Linear,
    halt: Linear,
    value: Linear,
}

impl Model {
    pub fn build<F: Scalar>(cfg: ModelConfig, rng: &mut RngStream) -> Result<(Model, ParamStore<F>)> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let emb_std = 1.0 / (d as f64).sqrt();
        let emb = |store: &mut ParamStore<F>, name: &str, rows: usize, rng: &mut RngStream| {
            let mut t = rng.normal_tensor::<F>(&[rows, d]);
            t.scale_assign(F::of(emb_std));
            store.add(name, t, true)
        };
        let tok_emb = emb(&mut store, "embed.tokens", cfg.vocab, rng);
        let puzzle_emb = emb(&mut store, "embed.puzzle", cfg.n_puzzle, rng);
        let empty_emb = cfg.unconditional.then(|| emb(&mut store, "embed.empty", 1, rng));
        let core_l = Core::new(&mut store, if cfg.shared_core { "core" } else { "core_l" }, &cfg, rng)?;
        let core_h = if cfg.shared_core { None } else { Some(Core::new(&mut store, "core_h", &cfg, rng)?) };
        let (prior, posterior) = if cfg.guidance == Guidance::None {
            (None, None)
        } else {
            (
                Some(GaussHead::new(&mut store, "prior", d, cfg.head_hidden, d, rng)),
                Some(GaussHead::new(&mut store, "posterior", 2 * d, cfg.head_hidden, d, rng)),
            )
        };
        let decoder = Linear::new(&mut store, "decoder", d, cfg.vocab, true, rng);
        let halt = Linear::constant(&mut store, "halt", d, 2, &[0.0, 0.0]);
        let value = Linear::constant(&mut store, "value", d, 1, &[0.0]);
        let model = Model { cfg, tok_emb, puzzle_emb, empty_emb, core_l, core_h, prior, posterior, decoder, halt, value };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn halt_head(&self) -> &Linear {
        &self.halt
    }

    pub fn value_head(&self) -> &Linear {
        &self.value
    }

    /// Indices of the halt and value head tensors.
    pub fn aux_param_indices(&self) -> Vec<usize> {
        [&self.halt, &self.value].iter().flat_map(|l| std::iter::once(l.w).chain(l.b)).collect()
    }

    /// Prior-side and posterior-side parameter indices of the guidance heads.
    pub fn head_param_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let idx = |h: &Option<GaussHead>| -> Vec<usize> {
            h.iter().flat_map(|g| [&g.mu, &g.log_var]).flat_map(|m| [&m.gate, &m.up, &m.down]).flat_map(|l| std::iter::once(l.w).chain(l.b)).collect()
        };
        (idx(&self.prior), idx(&self.posterior))
    }

    fn sqrt_d<F: Scalar>(&self) -> F {
        F::of((self.cfg.d_model as f64).sqrt())
    }

    fn check_tokens(&self, tokens: &[usize], what: &str) -> Result<()> {
        if tokens.len() != self.cfg.seq_len {
            return Err(GramError::data(format!("{what} has {} tokens, expected {}", tokens.len(), self.cfg.seq_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(GramError::data(format!("{what} token {t} outside vocabulary {}", self.cfg.vocab)));
        }
        Ok(())
    }

    /// `e_x`: puzzle tokens followed by content embeddings, all scaled by
    /// `sqrt(D)`. `None` selects the learned empty-conditioning vector.
    pub fn encode<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Option<&[usize]>) -> Result<Var> {
        let content = match x {
            Some(tokens) => {
                self.check_tokens(tokens, "input")?;
                let table = tape.param(self.tok_emb);
                tape.gather(table, tokens)?
            }
            None => {
                let idx = self.empty_emb.ok_or_else(|| GramError::usage("empty conditioning needs a model built with unconditional=true"))?;
                let e = tape.param(idx);
                tape.repeat_rows(e, self.cfg.seq_len)?
            }
        };
        let puzzle = tape.param(self.puzzle_emb);
        let all = tape.concat_rows(puzzle, content)?;
        Ok(tape.scale(all, self.sqrt_d()))
    }

    /// Target embedding for the posterior: token table on content rows,
    /// zeros on puzzle rows.
    pub fn embed_target<F: Scalar>(&self, tape: &mut Tape<'_, F>, y: &[usize]) -> Result<Var> {
        self.check_tokens(y, "target")?;
        let table = tape.param(self.tok_emb);
        let content = tape.gather(table, y)?;
        let content = tape.scale(content, self.sqrt_d());
        let zeros = tape.constant(Tensor::zeros(&[self.cfg.n_puzzle, self.cfg.d_model]));
        tape.concat_rows(zeros, content)
    }

    /// `l <- f_L(l, h + e_x)`, `K` times.
    pub fn low_level_refine<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var, mut l: Var, e_x: Var) -> Result<Var> {
        let inj = tape.add(h, e_x)?;
        for _ in 0..self.cfg.k_low {
            let x = tape.add(l, inj)?;
            l = self.core_l.forward(tape, x)?;
        }
        Ok(l)
    }

    fn f_h<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var, l: Var) -> Result<Var> {
        let x = tape.add(h, l)?;
        self.core_h.as_ref().unwrap_or(&self.core_l).forward(tape, x)
    }

    fn head<F: Scalar>(&self, tape: &mut Tape<'_, F>, head: &GaussHead, input: Var) -> Result<(Var, Var)> {
        let shape = [self.cfg.positions(), self.cfg.d_model];
        let mu = match self.cfg.guidance {
            Guidance::StochasticOnly => tape.constant(Tensor::zeros(&shape)),
            _ => head.mu.forward(tape, input)?,
        };
        let log_var = match self.cfg.guidance {
            // unit variance stands in for the KL; sampling ignores it
            Guidance::GuideOnly => tape.constant(Tensor::zeros(&shape)),
            _ => {
                let raw = head.log_var.forward(tape, input)?;
                tape.clamp(raw, F::of(LOG_VAR_MIN), F::of(LOG_VAR_MAX))
            }
        };
        Ok((mu, log_var))
    }

    /// Prior head `(mu, log_var)` at `u`.
    pub fn prior_dist<F: Scalar>(&self, tape: &mut Tape<'_, F>, u: Var) -> Result<Option<(Var, Var)>> {
        match &self.prior {
            Some(p) => Ok(Some(self.head(tape, p, u)?)),
            None => Ok(None),
        }
    }

    /// Posterior head `(mu, log_var)` at `(u, y)`.
    pub fn posterior_dist<F: Scalar>(&self, tape: &mut Tape<'_, F>, u: Var, y_emb: Var) -> Result<Option<(Var, Var)>> {
        match &self.posterior {
            Some(q) => {
                let input = tape.concat_cols(u, y_emb)?;
                Ok(Some(self.head(tape, q, input)?))
            }
            None => Ok(None),
        }
    }

    fn sample_noise<F: Scalar>(&self, tape: &mut Tape<'_, F>, dist: (Var, Var), rng: &mut RngStream) -> Result<Var> {
        match self.cfg.guidance {
            Guidance::GuideOnly => Ok(dist.0),
            _ => gaussian_reparam(tape, dist.0, dist.1, rng),
        }
    }

    /// `u = f_H(h, l)`, `h' = u + eps` with `eps` from the head selected by `mode`.
    pub fn high_level_update<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        h: Var,
        l: Var,
        mode: Mode,
        y_emb: Option<Var>,
        rng: &mut RngStream,
    ) -> Result<Transition> {
        if mode == Mode::Posterior && y_emb.is_none() {
            return Err(GramError::usage("posterior mode needs the target embedding"));
        }
        let u = self.f_h(tape, h, l)?;
        let shape = [self.cfg.positions(), self.cfg.d_model];
        let (prior, posterior) = match mode {
            Mode::Deterministic => (None, None),
            Mode::Prior => (self.prior_dist(tape, u)?, None),
            Mode::Posterior => {
                let p = self.prior_dist(tape, u)?;
                let q = self.posterior_dist(tape, u, y_emb.expect("checked above"))?;
                (p, q)
            }
        };
        let source = match mode {
            Mode::Posterior => posterior,
            _ => prior,
        };
        let eps = match source {
            Some(dist) => self.sample_noise(tape, dist, rng)?,
            None => tape.constant(Tensor::zeros(&shape)),
        };
        let h_new = tape.add(u, eps)?;
        Ok(Transition { h: h_new, l, u, eps, prior, posterior })
    }

    pub fn latent_transition<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        h: Var,
        l: Var,
        e_x: Var,
        mode: Mode,
        y_emb: Option<Var>,
        rng: &mut RngStream,
    ) -> Result<Transition> {
        let l = self.low_level_refine(tape, h, l, e_x)?;
        self.high_level_update(tape, h, l, mode, y_emb, rng)
    }

    /// `T` transitions. With `truncate`, all but the last run without
    /// recording and the last starts from stop-gradient copies, so the step
    /// loss reaches parameters only through the final transition.
    #[allow(clippy::too_many_arguments)]
    pub fn supervision_step<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        h: Var,
        l: Var,
        e_x: Var,
        mode: Mode,
        y_emb: Option<Var>,
        rng: &mut RngStream,
        truncate: bool,
    ) -> Result<StepOut> {
        self.supervision_step_split(tape, h, l, e_x, mode, mode, y_emb, rng, truncate)
    }

    /// As [`Model::supervision_step`], but the first `T - 1` transitions
    /// draw their noise in `early_mode` and only the last uses `mode`.
    #[allow(clippy::too_many_arguments)]
    pub fn supervision_step_split<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        mut h: Var,
        mut l: Var,
        e_x: Var,
        early_mode: Mode,
        mode: Mode,
        y_emb: Option<Var>,
        rng: &mut RngStream,
        truncate: bool,
    ) -> Result<StepOut> {
        let t_high = self.cfg.t_high;
        let mut transitions = Vec::with_capacity(t_high);
        for t in 0..t_high {
            let last = t + 1 == t_high;
            if truncate && t_high > 1 && last {
                h = tape.stop_grad(h);
                l = tape.stop_grad(l);
            }
            let prev = if truncate && !last { Some(tape.set_grad_enabled(false)) } else { None };
            let out = self.latent_transition(tape, h, l, e_x, if last { mode } else { early_mode }, y_emb, rng);
            if let Some(p) = prev {
                tape.set_grad_enabled(p);
            }
            let tr = out?;
            h = tr.h;
            l = tr.l;
            transitions.push(tr);
        }
        tape.check_finite(h, "high-level state")?;
        Ok(StepOut { h, l, transitions })
    }

    /// Decoder logits from content rows of `h`; halt and value heads from a
    /// detached copy of the first row.
    pub fn decode<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var) -> Result<Decoded> {
        let p = self.cfg.n_puzzle;
        let content = tape.slice_rows(h, p, p + self.cfg.seq_len)?;
        let logits = self.decoder.forward(tape, content)?;
        let first = self.first_row(tape, h)?;
        let q = self.halt.forward(tape, first)?;
        let value = self.value.forward(tape, first)?;
        tape.check_finite(logits, "decoder logits")?;
        Ok(Decoded { logits, q, value })
    }

    fn first_row<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var) -> Result<Var> {
        let first = tape.slice_rows(h, 0, 1)?;
        Ok(tape.stop_grad(first))
    }

    /// Value head on a detached copy of `h`'s first row.
    pub fn value_of<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var) -> Result<Var> {
        let first = self.first_row(tape, h)?;
        self.value.forward(tape, first)
    }

    /// Halt head on a detached copy of `h`'s first row.
    pub fn halt_of<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var) -> Result<Var> {
        let first = self.first_row(tape, h)?;
        self.halt.forward(tape, first)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            seq_len: 8,
            n_puzzle: 2,
            vocab: 5,
            k_low: 2,
            t_high: 2,
            n_sup: 2,
            heads: 2,
            ffn: 32,
            head_hidden: 16,
            ..ModelConfig::desk(8, 5)
        }
    }

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(cfg.validate(), Err(GramError::Config(_))));
        let cfg = ModelConfig { k_low: 0, ..tiny() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_rejects_out_of_range_tokens() {
        let (model, store) = Model::build::<f32>(tiny(), &mut RngStream::new(0, 0)).unwrap();
        let mut tape = Tape::inference(store.tensors());
        assert!(matches!(model.encode(&mut tape, Some(&[9; 8])), Err(GramError::Data(_))));
        assert!(matches!(model.encode(&mut tape, None), Err(GramError::Usage(_))));
    }

    #[test]
    fn posterior_without_target_is_usage_error() {
        let cfg = tiny();
        let (model, store) = Model::build::<f32>(cfg.clone(), &mut RngStream::new(0, 0)).unwrap();
        let z0 = LatentState::<f32>::sample(&cfg, &mut RngStream::new(1, 0));
        let mut tape = Tape::inference(store.tensors());
        let (h, l) = (tape.constant(z0.h), tape.constant(z0.l));
        let mut rng = RngStream::new(2, 0);
        assert!(matches!(model.high_level_update(&mut tape, h, l, Mode::Posterior, None, &mut rng), Err(GramError::Usage(_))));
    }
}

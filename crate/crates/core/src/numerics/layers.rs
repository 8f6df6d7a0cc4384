//! Parameter store and the layer operations the recursive core is built from.
//!
//! Layers hold only indices into a [`ParamStore`]; forward passes take a
//! [`Tape`] borrowing the store's tensors, so one layer description serves
//! both `f32` training and `f64` gradient checks.

use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{GramError, Result};

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    decay: Vec<bool>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), decay: Vec::new() }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.decay.push(decay);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decays(&self) -> &[bool] {
        &self.decay
    }

    pub fn get(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), decay: self.decay.clone() }
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if tensors.len() != self.tensors.len() || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(GramError::config("parameter tensors do not match the store layout"));
        }
        Ok(ParamStore { names: self.names.clone(), tensors, decay: self.decay.clone() })
    }
}

fn scaled_normal<F: Scalar>(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor<F> {
    let mut t = rng.normal_tensor::<F>(shape);
    t.scale_assign(F::of(std));
    t
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut RngStream) -> Self {
        let w = store.add(format!("{name}.w"), scaled_normal(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt()), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), false));
        Linear { w, b, d_in, d_out }
    }

    /// Zero weights and the given constant bias.
    pub fn constant<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize, bias: &[f64]) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]), true);
        let bt = Tensor::new(vec![d_out], bias.iter().map(|&v| F::of(v)).collect()).expect("bias length");
        let b = Some(store.add(format!("{name}.b"), bt, false));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// Free-function form of [`Linear::forward`] on explicit arrays.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::inference(&[]);
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(x, w, Some(b))?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: usize,
}

impl RmsNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        RmsNorm { gain: store.add(format!("{name}.gain"), Tensor::full(&[d], F::one()), false) }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        tape.rms_norm(x, g)
    }
}

/// Position-wise gated MLP, `down(silu(gate(x)) * up(x))`, without a residual.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl SwiGlu {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut RngStream) -> Self {
        SwiGlu {
            gate: Linear::new(store, &format!("{name}.gate"), d_in, hidden, true, rng),
            up: Linear::new(store, &format!("{name}.up"), d_in, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d_out, true, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = self.gate.forward(tape, x)?;
        let g = tape.silu(g);
        let u = self.up.forward(tape, x)?;
        let hmid = tape.mul(g, u)?;
        self.down.forward(tape, hmid)
    }
}

/// Residual pre-norm SwiGLU feed-forward: `x + mlp(norm(x))`.
#[derive(Clone, Debug)]
pub struct SwiGluBlock {
    pub norm: RmsNorm,
    pub mlp: SwiGlu,
}

impl SwiGluBlock {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, ffn: usize, rng: &mut RngStream) -> Self {
        SwiGluBlock { norm: RmsNorm::new(store, &format!("{name}.norm"), d), mlp: SwiGlu::new(store, &format!("{name}.mlp"), d, ffn, d, rng) }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, x)?;
        let m = self.mlp.forward(tape, n)?;
        tape.add(x, m)
    }
}

/// Residual pre-norm multi-head self-attention, then a [`SwiGluBlock`].
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub rope_base: Option<f64>,
    pub ffn: SwiGluBlock,
}

impl AttentionBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rope_base: Option<f64>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(GramError::config(format!("width {d} is not divisible by {heads} heads")));
        }
        if rope_base.is_some() && (d / heads) % 2 != 0 {
            return Err(GramError::config(format!("rotary encoding needs an even head width, got {}", d / heads)));
        }
        Ok(AttentionBlock {
            norm: RmsNorm::new(store, &format!("{name}.attn_norm"), d),
            wq: Linear::new(store, &format!("{name}.q"), d, d, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, false, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
            rope_base,
            ffn: SwiGluBlock::new(store, &format!("{name}.ffn"), d, ffn, rng),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, x)?;
        let mut q = self.wq.forward(tape, n)?;
        let mut k = self.wk.forward(tape, n)?;
        let v = self.wv.forward(tape, n)?;
        if let Some(base) = self.rope_base {
            q = tape.rope(q, self.heads, base)?;
            k = tape.rope(k, self.heads, base)?;
        }
        let a = tape.attention(q, k, v, self.heads)?;
        let o = self.wo.forward(tape, a)?;
        let x = tape.add(x, o)?;
        self.ffn.forward(tape, x)
    }
}

/// Noise draw `mu + exp(log_var / 2) * n`, `n` standard normal from `rng`.
///
/// The draw enters the tape as a constant, so gradients reach `mu` and
/// `log_var` only. A log-variance of negative infinity means zero noise.
pub fn gaussian_reparam<F: Scalar>(tape: &mut Tape<'_, F>, mu: Var, log_var: Var, rng: &mut RngStream) -> Result<Var> {
    if tape.shape(mu) != tape.shape(log_var) {
        return Err(GramError::config(format!("reparam: mu {:?} vs log_var {:?}", tape.shape(mu), tape.shape(log_var))));
    }
    tape.check_finite(mu, "reparam mean")?;
    if tape.value(log_var).data().iter().any(|v| v.is_nan() || *v == F::infinity()) {
        return Err(GramError::numeric("non-finite log-variance in reparam"));
    }
    let shape = tape.shape(mu).to_vec();
    let noise = tape.constant(rng.normal_tensor::<F>(&shape));
    let std = tape.exp_scaled(log_var, F::of(0.5));
    let scaled = tape.mul(std, noise)?;
    tape.add(mu, scaled)
}

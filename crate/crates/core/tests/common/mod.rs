#![allow(dead_code)]

use gram_core::model::{Guidance, LatentState, Model, ModelConfig};
use gram_core::numerics::{ParamStore, RngStream, Scalar, Tensor};

/// D=16 over 8 content positions, two puzzle tokens, K=2, T=2.
pub fn tiny(guidance: Guidance) -> ModelConfig {
    ModelConfig { d_model: 16, n_puzzle: 2, k_low: 2, t_high: 2, n_sup: 2, heads: 2, ffn: 32, head_hidden: 16, guidance, ..ModelConfig::desk(8, 5) }
}

/// Builds the model and moves every parameter off its initial value, so
/// zero-initialised heads carry gradient too.
pub fn perturbed<F: Scalar>(cfg: ModelConfig, seed: u64, scale: f64) -> (Model, ParamStore<F>) {
    let (model, store) = Model::build::<F>(cfg, &mut RngStream::new(seed, 0)).unwrap();
    let mut rng = RngStream::new(seed, 1);
    let tensors: Vec<Tensor<F>> = store
        .tensors()
        .iter()
        .map(|t| {
            let noise: Tensor<F> = rng.normal_tensor(t.shape());
            let data = t.data().iter().zip(noise.data()).map(|(&a, &b)| F::of(a.to_f64() + scale * b.to_f64())).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    let store = store.with_tensors(tensors).unwrap();
    (model, store)
}

pub fn latent<F: Scalar>(cfg: &ModelConfig, seed: u64) -> LatentState<F> {
    LatentState::sample(cfg, &mut RngStream::new(seed, 7))
}

pub fn tokens(rng: &mut RngStream, len: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..len).map(|_| lo + rng.below(hi - lo + 1)).collect()
}

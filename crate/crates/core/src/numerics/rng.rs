//! Seeded, splittable random streams.
//!
//! A stream is identified by `(seed, stream id)`. ChaCha is counter-based, so
//! a stream's draws depend only on that pair and on how many values it has
//! produced, never on thread scheduling. Trajectory `i` of a width-`N` batch
//! owns stream `i`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Stream whose id is derived from a list of labels, e.g.
    /// `[TRAIN_NOISE, step, example]`.
    pub fn derived(seed: u64, labels: &[u64]) -> Self {
        RngStream::new(seed, derive_stream_id(labels))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn normal_tensor<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = F::of(self.standard_normal());
        }
        t
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Mutable access for APIs that want a `rand::Rng`.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_stream_id(labels: &[u64]) -> u64 {
    labels.iter().fold(0x9e37_79b9_7f4a_7c15u64, |acc, &l| mix(acc ^ mix(l.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

/// Fixed labels for subsystem streams derived from a single run seed.
pub mod labels {
    pub const PARAM_INIT: u64 = 1;
    pub const Z0_INIT: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const ELBO_PROBE: u64 = 6;
    pub const DATA_GEN: u64 = 7;
    pub const DECODER_SAMPLING: u64 = 8;
    pub const RANDOM_Z0: u64 = 9;
}

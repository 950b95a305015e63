//! Seeded counter-based random source.
//!
//! Backed by ChaCha8. The full generator state is the 32-byte key, the stream
//! id and the 128-bit word position, so it can be snapshotted into a
//! checkpoint and resumed bit-exactly.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

/// Uniform samples are clamped to `[UNIFORM_EPS, 1 - UNIFORM_EPS]` before
/// the double log of the Gumbel transform.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Size of [`RngState::to_bytes`].
pub const RNG_STATE_BYTES: usize = 32 + 8 + 16;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn to_bytes(&self) -> [u8; RNG_STATE_BYTES] {
        let mut out = [0u8; RNG_STATE_BYTES];
        out[..32].copy_from_slice(&self.key);
        out[32..40].copy_from_slice(&self.stream.to_le_bytes());
        out[40..].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; RNG_STATE_BYTES]) -> Self {
        let mut key = [0u8; 32];
        key.copy_from_slice(&bytes[..32]);
        let mut stream = [0u8; 8];
        stream.copy_from_slice(&bytes[32..40]);
        let mut word_pos = [0u8; 16];
        word_pos.copy_from_slice(&bytes[40..]);
        Self {
            key,
            stream: u64::from_le_bytes(stream),
            word_pos: u128::from_le_bytes(word_pos),
        }
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a named purpose derived from one seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.key);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer on `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// One standard Gumbel sample, `-ln(-ln u)` with `u` kept off `{0, 1}`.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
        -(-u.ln()).ln()
    }
}

/// Tensor of i.i.d. standard Gumbel samples.
pub fn gumbel_noise<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gumbel())).collect();
    Tensor::new(shape, data).expect("shape and buffer agree")
}

/// Tensor of normal samples with the given standard deviation.
pub fn normal_tensor<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape, data).expect("shape and buffer agree")
}

//! Named, independently seeded random streams.
//!
//! Every random quantity in a training step is drawn from a generator keyed by
//! `(run seed, stream, purpose, draw index)`. Holding one stream's index fixed
//! while the others advance replays that stream's values exactly, which is how
//! the variance tools condition on individual sources of randomness.

use std::fmt;
use std::str::FromStr;

use diffgraph::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

/// Sources of randomness inside one distillation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    /// Forward-diffusion noise `eps`.
    Noise,
    /// Diffusion times `t`.
    Time,
    /// Generator latents and real-data minibatches.
    Data,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Noise, Stream::Time, Stream::Data];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Noise => "noise",
            Stream::Time => "time",
            Stream::Data => "data",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Stream::Noise),
            "time" => Ok(Stream::Time),
            "data" => Ok(Stream::Data),
            other => Err(CoreError::invalid("stream", format!("unknown stream `{other}`"))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed derived from a run seed and any number of discriminating words.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(seed), |h, &w| splitmix64(h ^ splitmix64(w)))
}

/// Generator for one-off uses outside a training step (initialization, evaluation sets).
pub fn keyed_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fnv1a(purpose)]))
}

/// Draw indices for the three sampling streams of one gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    seed: u64,
    index: [u64; 3],
}

impl Draw {
    /// All streams at the same index, as in an ordinary training step.
    pub fn new(seed: u64, index: u64) -> Self {
        Self {
            seed,
            index: [index; 3],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self, stream: Stream) -> u64 {
        self.index[stream.slot()]
    }

    pub fn with(mut self, stream: Stream, index: u64) -> Self {
        self.index[stream.slot()] = index;
        self
    }

    pub fn rng(&self, stream: Stream, purpose: &str) -> ChaCha8Rng {
        let s = derive_seed(
            self.seed,
            &[stream.slot() as u64 + 1, fnv1a(purpose), self.index[stream.slot()]],
        );
        ChaCha8Rng::seed_from_u64(s)
    }
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

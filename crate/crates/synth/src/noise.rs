//! Noise-sharing toy: two tasks that see linear embeddings of a shared latent
//! and a third task whose tokens are pure noise.
//!
//! Task 1 classifies `argmax z[0..=3]`, task 2 classifies `argmax z[3..=6]`;
//! the overlap at `z[3]` gives the two tasks something worth sharing. Task 3
//! tokens come from their own stream and carry no information about `z`.

use kem_core::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sample_stream, stream, PARAM_STREAM_BASE};

pub const LATENT_DIM: usize = 8;
pub const N_CLASSES: usize = 4;
pub const TOKEN_NOISE_STD: f64 = 0.1;

const STREAMS_PER_SAMPLE: u64 = 3;
const LATENT: u64 = 0;
const TOKEN_NOISE: u64 = 1;
const NOISE_TASK: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseToyBatch {
    pub batch: usize,
    pub m: usize,
    pub d: usize,
    /// `batch × 8`.
    pub z: Tensor<f64>,
    /// `batch × m × d` each.
    pub task1_tokens: Tensor<f64>,
    pub task2_tokens: Tensor<f64>,
    pub task3_tokens: Tensor<f64>,
    pub labels1: Vec<usize>,
    pub labels2: Vec<usize>,
}

impl NoiseToyBatch {
    /// Tokens of `task` (0, 1 or 2) for sample `i`, as an `m × d` matrix.
    pub fn tokens(&self, task: usize, i: usize) -> Tensor<f64> {
        let src = match task {
            0 => &self.task1_tokens,
            1 => &self.task2_tokens,
            _ => &self.task3_tokens,
        };
        let n = self.m * self.d;
        Tensor::new(vec![self.m, self.d], src.data()[i * n..(i + 1) * n].to_vec()).expect("block shape")
    }

    /// All three task blocks of sample `i` stacked task-major: `3m × d`.
    pub fn stacked(&self, i: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(3 * self.m * self.d);
        for t in 0..3 {
            data.extend_from_slice(self.tokens(t, i).data());
        }
        Tensor::new(vec![3 * self.m, self.d], data).expect("stack shape")
    }
}

/// Fixed embedding weights for one toy instance; batches are drawn by sample
/// index so train and test splits share the embedding.
#[derive(Clone, Debug)]
pub struct NoiseToy {
    seed: u64,
    m: usize,
    d: usize,
    /// Per task, `8 × (m·d)` with entries `N(0, 1/8)`.
    embed: [Tensor<f64>; 2],
}

impl NoiseToy {
    pub fn new(seed: u64, m: usize, d: usize) -> Result<Self> {
        if m < 2 || d < 2 {
            return Err(Error::Contract(format!("noise toy needs m, d >= 2, got m={m}, d={d}")));
        }
        let std = (1.0 / LATENT_DIM as f64).sqrt();
        let embed = [0, 1].map(|t| {
            let mut rng = stream(seed, PARAM_STREAM_BASE + t);
            Tensor::randn(LATENT_DIM, m * d, std, &mut rng)
        });
        Ok(NoiseToy { seed, m, d, embed })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Samples `start .. start + batch`.
    pub fn batch(&self, start: u64, batch: usize) -> NoiseToyBatch {
        let (m, d) = (self.m, self.d);
        let width = m * d;
        let mut z = Vec::with_capacity(batch * LATENT_DIM);
        let mut t1 = Vec::with_capacity(batch * width);
        let mut t2 = Vec::with_capacity(batch * width);
        let mut t3 = Vec::with_capacity(batch * width);
        let mut labels1 = Vec::with_capacity(batch);
        let mut labels2 = Vec::with_capacity(batch);
        let noise = Normal::new(0.0, TOKEN_NOISE_STD).expect("valid std");
        for i in 0..batch as u64 {
            let index = start + i;
            let mut rng = sample_stream(self.seed, index, STREAMS_PER_SAMPLE, LATENT);
            let zi: Vec<f64> = (0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let mut rng = sample_stream(self.seed, index, STREAMS_PER_SAMPLE, TOKEN_NOISE);
            for (embed, out) in self.embed.iter().zip([&mut t1, &mut t2]) {
                for c in 0..width {
                    let clean: f64 = (0..LATENT_DIM).map(|k| zi[k] * embed.get(k, c)).sum();
                    out.push(clean + noise.sample(&mut rng));
                }
            }
            let mut rng = sample_stream(self.seed, index, STREAMS_PER_SAMPLE, NOISE_TASK);
            t3.extend((0..width).map(|_| rng.sample::<f64, _>(StandardNormal)));
            labels1.push(argmax(&zi[0..=3]));
            labels2.push(argmax(&zi[3..=6]));
            z.extend(zi);
        }
        let block = |v| Tensor::new(vec![batch, m, d], v).expect("batch shape");
        NoiseToyBatch {
            batch,
            m,
            d,
            z: Tensor::new(vec![batch, LATENT_DIM], z).expect("latent shape"),
            task1_tokens: block(t1),
            task2_tokens: block(t2),
            task3_tokens: block(t3),
            labels1,
            labels2,
        }
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One batch of `batch` samples from the toy whose embedding is seeded by `seed`.
pub fn gen_noise_toy(seed: u64, batch: usize, m: usize, d: usize) -> Result<NoiseToyBatch> {
    if batch == 0 {
        return Err(Error::Contract("batch must be positive".into()));
    }
    Ok(NoiseToy::new(seed, m, d)?.batch(0, batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let a = gen_noise_toy(3, 5, 4, 6).unwrap();
        let b = gen_noise_toy(3, 5, 4, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.task1_tokens.shape(), &[5, 4, 6]);
        assert_eq!(a.stacked(2).shape(), &[12, 6]);
        assert_eq!(a.stacked(2).row(8), a.tokens(2, 2).row(0));
        assert_ne!(a, gen_noise_toy(4, 5, 4, 6).unwrap());
    }

    #[test]
    fn labels_follow_latent() {
        let b = gen_noise_toy(0, 50, 2, 2).unwrap();
        for i in 0..50 {
            let z = b.z.row(i);
            let l1 = b.labels1[i];
            assert!((0..=3).all(|k| z[k] <= z[l1]));
            let l2 = b.labels2[i];
            assert!((3..=6).all(|k| z[k] <= z[3 + l2]));
        }
    }

    #[test]
    fn batches_are_slices_of_one_sequence() {
        let toy = NoiseToy::new(9, 3, 3).unwrap();
        let whole = toy.batch(0, 6);
        let tail = toy.batch(4, 2);
        assert_eq!(whole.stacked(5), tail.stacked(1));
        assert_eq!(whole.labels2[4..], tail.labels2[..]);
    }

    #[test]
    fn small_dimensions_rejected() {
        assert!(gen_noise_toy(0, 1, 1, 4).is_err());
        assert!(gen_noise_toy(0, 1, 4, 1).is_err());
        assert!(gen_noise_toy(0, 0, 4, 4).is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

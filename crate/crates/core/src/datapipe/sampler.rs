use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resumable position of a [`BalancedSampler`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    /// ChaCha word position; a `u128` split in two for JSON.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// Infinite with-replacement index stream in which every record is drawn
/// with probability proportional to `1 / count(its class)`, so both classes
/// are equally likely.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    seed: u64,
    rng: ChaCha8Rng,
    dist: WeightedIndex<f64>,
}

impl BalancedSampler {
    pub fn new(labels: &[u8], seed: u64) -> Result<Self> {
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Data(format!(
                "balanced sampling needs both classes, got {pos} malignant and {neg} benign"
            )));
        }
        let weights = labels.iter().map(|&l| if l == 1 { 1.0 / pos as f64 } else { 1.0 / neg as f64 });
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Data(e.to_string()))?;
        Ok(BalancedSampler {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist,
        })
    }

    pub fn next_index(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }

    pub fn state(&self) -> SamplerState {
        let pos = self.rng.get_word_pos();
        SamplerState {
            seed: self.seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&mut self, state: SamplerState) {
        self.seed = state.seed;
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

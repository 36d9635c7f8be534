//! Denoising-autoencoder corruption: span infilling, word drop, word blank,
//! and local word swaps, applied in that order.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::corpus::{BLANK, MASK};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaeNoiseConfig {
    /// Target fraction of tokens covered by masked spans.
    pub infill_ratio: f64,
    pub drop_prob: f64,
    pub blank_prob: f64,
    /// Probability that a token swaps with a later neighbour.
    pub swap_prob: f64,
    /// Maximum distance of a swap.
    pub swap_window: usize,
    pub span_length_mean: f64,
}

impl Default for DaeNoiseConfig {
    fn default() -> Self {
        Self {
            infill_ratio: 0.2,
            drop_prob: 0.1,
            blank_prob: 0.1,
            swap_prob: 0.1,
            swap_window: 3,
            span_length_mean: 3.0,
        }
    }
}

impl DaeNoiseConfig {
    pub fn none() -> Self {
        Self {
            infill_ratio: 0.0,
            drop_prob: 0.0,
            blank_prob: 0.0,
            swap_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.infill_ratio, self.drop_prob, self.blank_prob, self.swap_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("noise probabilities must lie in [0, 1]".into()));
        }
        if self.swap_window == 0 {
            return Err(Error::InvalidArgument("swap window must be at least 1".into()));
        }
        if !(self.span_length_mean > 0.0) {
            return Err(Error::InvalidArgument("span length mean must be positive".into()));
        }
        Ok(())
    }
}

/// Marks spans until at least `infill_ratio · n` tokens are covered. Span
/// lengths are Poisson with the configured mean, at least 1.
pub fn infill_mask<R: Rng + ?Sized>(n: usize, cfg: &DaeNoiseConfig, rng: &mut R) -> Result<Vec<bool>> {
    let mut masked = vec![false; n];
    let target = (cfg.infill_ratio * n as f64).round() as usize;
    if target == 0 {
        return Ok(masked);
    }
    let poisson = Poisson::new(cfg.span_length_mean).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut covered = 0;
    while covered < target {
        let len = (poisson.sample(rng) as usize).max(1);
        let free: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
        let start = free[rng.random_range(0..free.len())];
        for m in masked.iter_mut().skip(start).take(len) {
            if !*m {
                *m = true;
                covered += 1;
            }
        }
    }
    Ok(masked)
}

/// Corrupts `clean` deterministically under `noise_seed`. Never returns an
/// empty sequence and only introduces `MASK` and `BLANK`.
pub fn noise_dae(clean: &[usize], cfg: &DaeNoiseConfig, noise_seed: u64) -> Result<Vec<usize>> {
    if clean.is_empty() {
        return Err(Error::InvalidArgument("cannot noise an empty sequence".into()));
    }
    cfg.validate()?;
    let mut rng = seed::rng(noise_seed);

    let masked = infill_mask(clean.len(), cfg, &mut rng)?;
    let mut seq = Vec::with_capacity(clean.len());
    for (i, &tok) in clean.iter().enumerate() {
        if !masked[i] {
            seq.push(tok);
        } else if i == 0 || !masked[i - 1] {
            seq.push(MASK);
        }
    }

    if cfg.drop_prob > 0.0 {
        let kept: Vec<usize> = seq.iter().copied().filter(|&t| t == MASK || !rng.random_bool(cfg.drop_prob)).collect();
        if !kept.is_empty() {
            seq = kept;
        } else {
            seq.truncate(1);
        }
    }

    if cfg.blank_prob > 0.0 {
        for t in seq.iter_mut() {
            if *t != MASK && rng.random_bool(cfg.blank_prob) {
                *t = BLANK;
            }
        }
    }

    if cfg.swap_prob > 0.0 && seq.len() > 1 {
        for i in 0..seq.len() - 1 {
            if rng.random_bool(cfg.swap_prob) {
                let j = (i + rng.random_range(1..=cfg.swap_window)).min(seq.len() - 1);
                seq.swap(i, j);
            }
        }
    }
    Ok(seq)
}

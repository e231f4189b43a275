//! Absorbing-state (masking) diffusion over token sequences: the forward
//! corruption, its coordinate-wise reverse posterior, and the 1/t-weighted
//! cross-entropy training loss.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::softmax_xent;
use crate::{Error, Matrix, Result, Scalar};

/// Lower bound on the noise level; bounds the 1/t loss weight.
pub const EPS: f64 = 1e-3;

static EMPTY_BATCHES: AtomicU64 = AtomicU64::new(0);

/// Number of loss evaluations so far whose batch had no masked position.
pub fn empty_batch_count() -> u64 {
    EMPTY_BATCHES.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub mask: u32,
    pub pad: u32,
}

/// A corrupted sequence at noise level `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub tokens: Vec<u32>,
    pub mask_flags: Vec<bool>,
    pub pad_flags: Vec<bool>,
    pub t: f64,
}

impl MaskedSequence {
    /// Wraps clean tokens with nothing masked.
    pub fn clean(tokens: Vec<u32>, special: SpecialTokens, t: f64) -> Self {
        let pad_flags = tokens.iter().map(|&x| x == special.pad).collect();
        let mask_flags = tokens.iter().map(|&x| x == special.mask).collect();
        Self {
            tokens,
            mask_flags,
            pad_flags,
            t,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask_flags[i]).collect()
    }

    /// Masks position `i` in place.
    pub fn mask_at(&mut self, i: usize, special: SpecialTokens) {
        debug_assert!(!self.pad_flags[i]);
        self.tokens[i] = special.mask;
        self.mask_flags[i] = true;
    }

    /// Index of the first non-pad position (the sequence length if none).
    pub fn content_start(&self) -> usize {
        self.pad_flags.iter().position(|&p| !p).unwrap_or(self.len())
    }
}

/// Masks each non-pad token independently with probability `t`.
///
/// One uniform draw is consumed per non-pad position, so callers sharing a
/// seed see identical masks for identical inputs.
pub fn forward_mask(seq: &[u32], t: f64, special: SpecialTokens, rng: &mut impl Rng) -> MaskedSequence {
    debug_assert!((0.0..=1.0).contains(&t));
    let mut ms = MaskedSequence::clean(seq.to_vec(), special, t);
    for i in 0..seq.len() {
        if !ms.pad_flags[i] && rng.random::<f64>() < t {
            ms.mask_at(i, special);
        }
    }
    ms
}

/// Reverse-process law of one position when moving from `t` to `ell < t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCell {
    /// Probability of staying masked.
    pub p_mask: f64,
    /// The token revealed otherwise.
    pub token: u32,
}

/// Coordinate-wise posterior `q(s_ell | s_t, s_0)`.
///
/// Unmasked (and pad) positions keep their token with certainty; masked
/// positions stay masked with probability `ell/t` and otherwise reveal the
/// clean token.
pub fn posterior_step(seq_t: &MaskedSequence, seq_0: &[u32], ell: f64) -> Result<Vec<PosteriorCell>> {
    if !(0.0..seq_t.t).contains(&ell) {
        return Err(Error::invalid(format!("posterior needs 0 <= ell < t, got ell={ell}, t={}", seq_t.t)));
    }
    if seq_0.len() != seq_t.len() {
        return Err(Error::invalid("clean sequence length differs"));
    }
    let stay = ell / seq_t.t;
    (0..seq_t.len())
        .map(|i| {
            if seq_t.mask_flags[i] {
                Ok(PosteriorCell {
                    p_mask: stay,
                    token: seq_0[i],
                })
            } else if seq_t.tokens[i] != seq_0[i] {
                Err(Error::invalid(format!(
                    "position {i}: visible token {} disagrees with clean token {}",
                    seq_t.tokens[i], seq_0[i]
                )))
            } else {
                Ok(PosteriorCell {
                    p_mask: 0.0,
                    token: seq_0[i],
                })
            }
        })
        .collect()
}

/// Draws a sequence at level `ell` from posterior cells.
pub fn sample_posterior(
    cells: &[PosteriorCell],
    seq_t: &MaskedSequence,
    ell: f64,
    special: SpecialTokens,
    rng: &mut impl Rng,
) -> MaskedSequence {
    let mut out = seq_t.clone();
    out.t = ell;
    for (i, cell) in cells.iter().enumerate() {
        if seq_t.mask_flags[i] && rng.random::<f64>() >= cell.p_mask {
            out.tokens[i] = cell.token;
            out.mask_flags[i] = false;
        }
    }
    debug_assert!(out.tokens.iter().zip(&out.mask_flags).all(|(&x, &m)| m == (x == special.mask)));
    out
}

/// `t ~ Uniform[EPS, 1]`.
pub fn sample_noise_level(rng: &mut impl Rng) -> f64 {
    EPS + (1.0 - EPS) * rng.random::<f64>()
}

/// `n` noise levels, one per stratum of `[ε, 1]` under a shared uniform
/// offset, in shuffled order. Each level is marginally uniform on `[ε, 1]`.
pub fn stratified_noise_levels(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let u: f64 = rng.random();
    let mut ts: Vec<f64> = (0..n)
        .map(|i| EPS + (1.0 - EPS) * ((i as f64 + u) / n as f64))
        .collect();
    ts.shuffle(rng);
    ts
}

/// Cross-entropy targets and weights for one sequence at batch size
/// `batch`: every masked non-pad position targets its clean token with
/// weight `1 / (t · batch)`.
pub fn loss_targets<T: Scalar>(seq_0: &[u32], ms: &MaskedSequence, batch: usize) -> (Vec<Option<usize>>, Vec<T>) {
    let w = T::of(1.0 / (ms.t * batch as f64));
    let mut targets = Vec::with_capacity(ms.len());
    let mut weights = Vec::with_capacity(ms.len());
    for (i, &x) in seq_0.iter().enumerate().take(ms.len()) {
        if ms.mask_flags[i] && !ms.pad_flags[i] {
            targets.push(Some(x as usize));
            weights.push(w);
        } else {
            targets.push(None);
            weights.push(T::zero());
        }
    }
    (targets, weights)
}

#[derive(Debug, Clone)]
pub struct ElboLoss<T> {
    pub loss: T,
    /// Gradient with respect to each sequence's logits.
    pub grads: Vec<Matrix<T>>,
    pub masked: usize,
}

/// Batch-mean of `(1/t) · Σ_masked −log softmax(logits)[clean]`.
pub fn elbo_loss<T: Scalar>(logits: &[Matrix<T>], seq_0: &[Vec<u32>], ms: &[MaskedSequence]) -> Result<ElboLoss<T>> {
    if logits.len() != ms.len() || seq_0.len() != ms.len() {
        return Err(Error::invalid("batch components differ in length"));
    }
    if ms.iter().any(|m| m.t < EPS) {
        return Err(Error::invalid("noise level below EPS"));
    }
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(ms.len());
    let mut masked = 0;
    for ((z, s0), m) in logits.iter().zip(seq_0).zip(ms) {
        if z.rows() != m.len() || s0.len() != m.len() {
            return Err(Error::invalid("logits do not cover every position"));
        }
        let (targets, weights) = loss_targets::<T>(s0, m, ms.len());
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= z.cols()) {
            return Err(Error::invalid(format!("target token {bad} outside the output vocabulary")));
        }
        masked += targets.iter().filter(|t| t.is_some()).count();
        let (l, g) = softmax_xent(z, &targets, &weights);
        loss += l;
        grads.push(g);
    }
    if masked == 0 {
        EMPTY_BATCHES.fetch_add(1, Ordering::Relaxed);
        log::warn!("loss batch without masked positions");
    }
    Ok(ElboLoss { loss, grads, masked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const SP: SpecialTokens = SpecialTokens { mask: 9, pad: 10 };

    #[test]
    fn forward_boundaries() {
        let seq = vec![10, 10, 1, 2, 3];
        let mut r = rng::seeded(0);
        let m0 = forward_mask(&seq, 0.0, SP, &mut r);
        assert_eq!(m0.tokens, seq);
        assert_eq!(m0.masked_count(), 0);
        let m1 = forward_mask(&seq, 1.0, SP, &mut r);
        assert_eq!(m1.tokens, vec![10, 10, 9, 9, 9]);
        assert_eq!(m1.pad_flags, vec![true, true, false, false, false]);
    }

    #[test]
    fn mask_rate_concentrates() {
        let seq: Vec<u32> = (0..10_000).map(|i| i % 8).collect();
        let mut r = rng::seeded(5);
        let ms = forward_mask(&seq, 0.3, SP, &mut r);
        let rate = ms.masked_count() as f64 / 1e4;
        assert!((rate - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / 1e4).sqrt());
    }

    #[test]
    fn posterior_formula() {
        let mut ms = MaskedSequence::clean(vec![1, 2, 3], SP, 0.8);
        ms.mask_at(1, SP);
        let cells = posterior_step(&ms, &[1, 2, 3], 0.4).unwrap();
        assert_eq!(cells[1], PosteriorCell { p_mask: 0.5, token: 2 });
        assert_eq!(cells[0].p_mask, 0.0);
        let full = posterior_step(&ms, &[1, 2, 3], 0.0).unwrap();
        assert_eq!(full[1].p_mask, 0.0);
        assert!(posterior_step(&ms, &[4, 2, 3], 0.4).is_err());
        assert!(posterior_step(&ms, &[1, 2, 3], 0.8).is_err());
    }

    #[test]
    fn noise_level_support_and_mean() {
        let mut r = rng::seeded(3);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_noise_level(&mut r)).collect();
        assert!(draws.iter().all(|&t| (EPS..=1.0).contains(&t)));
        let mean = draws.iter().sum::<f64>() / 1e4;
        assert!((mean - 0.5 * (1.0 + EPS)).abs() < 0.01);
        let mut r2 = rng::seeded(3);
        assert_eq!(sample_noise_level(&mut r2), draws[0]);
    }

    #[test]
    fn uniform_logits_and_weighting() {
        let v = 7;
        let logits = vec![Matrix::<f64>::zeros(2, v)];
        let mut ms = MaskedSequence::clean(vec![1, 2], SP, 1.0);
        ms.mask_at(0, SP);
        let l1 = elbo_loss(&logits, &[vec![1, 2]], &[ms.clone()]).unwrap();
        assert!((l1.loss - (v as f64).ln()).abs() < 1e-12);
        ms.t = 0.5;
        let l2 = elbo_loss(&logits, &[vec![1, 2]], &[ms]).unwrap();
        assert!((l2.loss - 2.0 * l1.loss).abs() < 1e-12);
    }

    #[test]
    fn appending_pads_leaves_loss_unchanged() {
        let logits = Matrix::<f64>::from_vec(2, 3, vec![0.1, -0.3, 0.7, 1.0, 0.0, -1.0]);
        let mut ms = MaskedSequence::clean(vec![2, 0], SP, 0.4);
        ms.mask_at(0, SP);
        ms.mask_at(1, SP);
        let base = elbo_loss(std::slice::from_ref(&logits), &[vec![2, 0]], &[ms.clone()]).unwrap();
        let mut padded = Matrix::zeros(4, 3);
        padded.data_mut()[6..].copy_from_slice(logits.data());
        let mut pms = MaskedSequence::clean(vec![10, 10, 2, 0], SP, 0.4);
        pms.mask_at(2, SP);
        pms.mask_at(3, SP);
        let pl = elbo_loss(&[padded], &[vec![10, 10, 2, 0]], &[pms]).unwrap();
        assert!((pl.loss - base.loss).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_gives_zero_loss() {
        let before = empty_batch_count();
        let ms = MaskedSequence::clean(vec![1], SP, 0.5);
        let l = elbo_loss(&[Matrix::<f64>::zeros(1, 3)], &[vec![1]], &[ms]).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(empty_batch_count() > before);
    }
}

//! Synthetic sequence-to-sequence datasets.
//!
//! Discrete tasks use symbols `0..V` on both sides. Targets are framed by
//! `BOS = V` and `EOS = V + 1`, so the decoder vocabulary has `V + 2` ids.

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symbol count plus the two framing ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub symbols: usize,
}

impl Vocab {
    pub fn bos(self) -> usize {
        self.symbols
    }

    pub fn eos(self) -> usize {
        self.symbols + 1
    }

    /// Decoder vocabulary size.
    pub fn size(self) -> usize {
        self.symbols + 2
    }

    /// `BOS, tokens…, EOS`.
    pub fn frame(self, tokens: &[usize]) -> Vec<usize> {
        let mut t = Vec::with_capacity(tokens.len() + 2);
        t.push(self.bos());
        t.extend_from_slice(tokens);
        t.push(self.eos());
        t
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteExample {
    pub source: Vec<usize>,
    /// `BOS, …, EOS` with no inner EOS.
    pub target: Vec<usize>,
}

impl DiscreteExample {
    /// Target without the framing ids.
    pub fn inner(&self) -> &[usize] {
        &self.target[1..self.target.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousExample {
    pub source: Vec<usize>,
    /// `[T, F]` frames, every value in `[−1, 1]`.
    pub target: Tensor<f32>,
}

fn check(len_range: (usize, usize), vocab: usize) -> Result<()> {
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(Error::InvalidArgument(alloc::format!("length range {len_range:?}")));
    }
    if vocab == 0 {
        return Err(Error::InvalidArgument("empty vocabulary".into()));
    }
    Ok(())
}

fn sources(n: usize, len_range: (usize, usize), vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(len_range.0..=len_range.1);
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect()
}

/// Target = source. Lengths are uniform over the inclusive `len_range`.
pub fn gen_copy_task(n: usize, len_range: (usize, usize), vocab: usize, seed: u64) -> Result<Vec<DiscreteExample>> {
    check(len_range, vocab)?;
    let v = Vocab { symbols: vocab };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sources(n, len_range, vocab, &mut rng)
        .into_iter()
        .map(|s| DiscreteExample {
            target: v.frame(&s),
            source: s,
        })
        .collect())
}

/// Target = reversed source.
pub fn gen_reverse_task(n: usize, len_range: (usize, usize), vocab: usize, seed: u64) -> Result<Vec<DiscreteExample>> {
    check(len_range, vocab)?;
    let v = Vocab { symbols: vocab };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sources(n, len_range, vocab, &mut rng)
        .into_iter()
        .map(|s| {
            let mut r = s.clone();
            r.reverse();
            DiscreteExample {
                target: v.frame(&r),
                source: s,
            }
        })
        .collect())
}

/// Per-token, per-feature angular frequency and phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidDictionary {
    pub features: usize,
    pub omega: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SinusoidDictionary {
    pub fn new(vocab: usize, features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vocab * features;
        let omega = (0..n).map(|_| rng.gen_range(0.2..1.2)).collect();
        let phase = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Self { features, omega, phase }
    }

    pub fn value(&self, token: usize, feature: usize, t: usize) -> f64 {
        let k = token * self.features + feature;
        Float::sin(self.omega[k] * t as f64 + self.phase[k])
    }

    /// One frame per source token; frame `t` is the mean over all source
    /// tokens of their sinusoids at `t`.
    pub fn render(&self, source: &[usize]) -> Tensor<f32> {
        let n = source.len() as f64;
        Tensor::from_fn2(source.len(), self.features, |t, f| {
            (source.iter().map(|&s| self.value(s, f, t)).sum::<f64>() / n) as f32
        })
    }
}

/// Continuous regression analog of text-to-feature synthesis. The
/// dictionary is drawn from `seed` too, so train and validation sets that
/// should share it must use [`gen_continuous_with`].
pub fn gen_continuous_task(
    n: usize,
    len_range: (usize, usize),
    vocab: usize,
    features: usize,
    seed: u64,
) -> Result<Vec<ContinuousExample>> {
    let dict = SinusoidDictionary::new(vocab, features, seed);
    gen_continuous_with(&dict, n, len_range, seed)
}

/// [`gen_continuous_task`] with an explicit dictionary.
pub fn gen_continuous_with(
    dict: &SinusoidDictionary,
    n: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Vec<ContinuousExample>> {
    let vocab = dict.omega.len() / dict.features.max(1);
    check(len_range, vocab)?;
    if dict.features == 0 {
        return Err(Error::InvalidArgument("zero features".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    Ok(sources(n, len_range, vocab, &mut rng)
        .into_iter()
        .map(|s| ContinuousExample {
            target: dict.render(&s),
            source: s,
        })
        .collect())
}

/// Merges each run of `k` consecutive examples into one: sources and inner
/// targets are concatenated under a single BOS/EOS pair. A trailing
/// remainder shorter than `k` is dropped.
pub fn concat_longform(data: &[DiscreteExample], k: usize) -> Result<Vec<DiscreteExample>> {
    if k < 2 {
        return Err(Error::InvalidArgument(alloc::format!("concatenation factor {k} < 2")));
    }
    Ok(data
        .chunks_exact(k)
        .map(|group| {
            let (bos, eos) = (group[0].target[0], group[0].target[group[0].target.len() - 1]);
            let mut source = Vec::new();
            let mut target = alloc::vec![bos];
            for ex in group {
                source.extend_from_slice(&ex.source);
                target.extend_from_slice(ex.inner());
            }
            target.push(eos);
            DiscreteExample { source, target }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_ids() {
        let v = Vocab { symbols: 4 };
        assert_eq!((v.bos(), v.eos(), v.size()), (4, 5, 6));
        assert_eq!(v.frame(&[1, 2]), alloc::vec![4, 1, 2, 5]);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(gen_copy_task(3, (0, 2), 4, 0).is_err());
        assert!(gen_copy_task(3, (5, 2), 4, 0).is_err());
        assert!(gen_reverse_task(3, (1, 2), 0, 0).is_err());
        assert!(concat_longform(&[], 1).is_err());
    }
}

//! Edit distance and length-bucketed error rates.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Error counts over reference tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub errors: usize,
    pub ref_tokens: usize,
    pub sequences: usize,
    pub exact: usize,
}

impl Tally {
    fn add(&mut self, errors: usize, ref_len: usize) {
        self.errors += errors;
        self.ref_tokens += ref_len;
        self.sequences += 1;
        self.exact += usize::from(errors == 0);
    }

    /// `errors / ref_tokens`; zero for an empty tally.
    pub fn error_rate(&self) -> f64 {
        if self.ref_tokens == 0 {
            return if self.errors == 0 { 0.0 } else { self.errors as f64 };
        }
        self.errors as f64 / self.ref_tokens as f64
    }

    pub fn exact_accuracy(&self) -> f64 {
        if self.sequences == 0 {
            0.0
        } else {
            self.exact as f64 / self.sequences as f64
        }
    }
}

/// Reference lengths in `(lo, hi]`; the first bucket includes 0 and the
/// overflow bucket has no upper edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
    pub tally: Tally,
}

impl Bucket {
    pub fn contains(&self, len: usize) -> bool {
        (len > self.lo || (self.lo == 0 && len == 0)) && self.hi.map_or(true, |h| len <= h)
    }

    pub fn label(&self) -> alloc::string::String {
        match self.hi {
            Some(h) if self.lo == 0 => alloc::format!("[0,{h}]"),
            Some(h) => alloc::format!("({},{h}]", self.lo),
            None => alloc::format!("({},inf)", self.lo),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub buckets: Vec<Bucket>,
    pub total: Tally,
}

impl Metrics {
    /// Empty buckets split at `edges` (strictly increasing), plus overflow.
    pub fn with_edges(edges: &[usize]) -> Result<Self> {
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("bucket edges must increase".into()));
        }
        let mut buckets = Vec::with_capacity(edges.len() + 1);
        let mut lo = 0;
        for &e in edges {
            buckets.push(Bucket {
                lo,
                hi: Some(e),
                tally: Tally::default(),
            });
            lo = e;
        }
        buckets.push(Bucket {
            lo,
            hi: None,
            tally: Tally::default(),
        });
        Ok(Self {
            buckets,
            total: Tally::default(),
        })
    }

    /// Multiples `[1×, 2×, 3×]` of the longest training target.
    pub fn default_edges(train_max_len: usize) -> Vec<usize> {
        vec![train_max_len, 2 * train_max_len, 3 * train_max_len]
    }

    pub fn record<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        let e = edit_distance(reference, hypothesis);
        self.total.add(e, reference.len());
        if let Some(b) = self.buckets.iter_mut().find(|b| b.contains(reference.len())) {
            b.tally.add(e, reference.len());
        }
    }

    pub fn error_rate(&self) -> f64 {
        self.total.error_rate()
    }

    /// Bucket whose range is exactly `(lo, hi]`.
    pub fn bucket(&self, lo: usize, hi: usize) -> Option<&Bucket> {
        self.buckets.iter().find(|b| b.lo == lo && b.hi == Some(hi))
    }
}

/// `Σ edit_distance / Σ |ref|`, overall and per reference-length bucket.
pub fn error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>], edges: &[usize]) -> Result<Metrics> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch(refs.len(), hyps.len()));
    }
    let mut m = Metrics::with_edges(edges)?;
    for (r, h) in refs.iter().zip(hyps) {
        m.record(r, h);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_membership() {
        let m = Metrics::with_edges(&[5, 10]).unwrap();
        assert!(m.buckets[0].contains(0) && m.buckets[0].contains(5));
        assert!(!m.buckets[1].contains(5) && m.buckets[1].contains(6));
        assert!(m.buckets[2].contains(1000));
        assert_eq!(m.buckets[1].label(), "(5,10]");
        assert!(Metrics::with_edges(&[3, 3]).is_err());
    }
}

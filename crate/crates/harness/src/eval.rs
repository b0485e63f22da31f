//! Decoding, bucketed error rates and teacher-forced validation scores.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use s4dec_core::autodiff::Eager;
use s4dec_core::metrics::{Metrics, Tally};
use s4dec_core::model::{Example, Prepared, Seq2Seq, Target};
use s4dec_core::params::ParamStore;
use s4dec_core::search::{beam_search, greedy, SearchConfig};
use s4dec_core::tasks::{DiscreteExample, Vocab};
use s4dec_core::tensor::{log_softmax, Tensor};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::{HarnessError, Result};

/// Decoding stops after `ceil(MAX_LEN_RATIO · |source|)` tokens.
pub const MAX_LEN_RATIO: f64 = 1.0;

pub fn max_len(source_len: usize) -> usize {
    (MAX_LEN_RATIO * source_len as f64).ceil() as usize
}

/// Worker count for evaluation: `SSQ_THREADS` when set and positive.
pub fn eval_threads() -> Option<usize> {
    std::env::var("SSQ_THREADS")
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

pub(crate) fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = eval_threads() {
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

/// Greedy when `beam == 1`, beam search otherwise. Returns the tokens
/// without BOS/EOS.
pub fn decode(model: &Prepared<'_, f32>, source: &[usize], vocab: Vocab, beam: usize) -> Result<Vec<usize>> {
    let stepper = model.token_stepper(source)?;
    let cfg = SearchConfig {
        beam,
        max_len: max_len(source.len()),
        bos: vocab.bos(),
        eos: vocab.eos(),
    };
    let hyp = if beam == 1 {
        greedy(&stepper, &cfg)?
    } else {
        beam_search(&stepper, &cfg)?
    };
    Ok(hyp.tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub hypotheses: Vec<Vec<usize>>,
}

/// Decodes every example (in parallel, results in input order) and buckets
/// error rates by reference length.
pub fn evaluate_discrete(
    model: &Seq2Seq,
    store: &ParamStore<f32>,
    data: &[DiscreteExample],
    vocab: Vocab,
    beam: usize,
    edges: &[usize],
) -> Result<Evaluation> {
    let prepared = model.prepare(store)?;
    let hypotheses = pool()?.install(|| {
        data.par_iter()
            .map(|ex| decode(&prepared, &ex.source, vocab, beam))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut metrics = Metrics::with_edges(edges)?;
    for (ex, h) in data.iter().zip(&hypotheses) {
        metrics.record(ex.inner(), h);
    }
    Ok(Evaluation { metrics, hypotheses })
}

/// Teacher-forced validation numbers. For tokens, `loss` is mean cross
/// entropy per position and `accuracy` the argmax hit rate; for frames,
/// `loss` is the mean absolute error per value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValidScore {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn teacher_forced_score(model: &Seq2Seq, store: &ParamStore<f32>, data: &Dataset) -> Result<ValidScore> {
    let examples = data.examples();
    if examples.is_empty() {
        return Err(HarnessError::Data("empty validation set".into()));
    }
    let kernels = model
        .decoder
        .s4_kernels(&mut Eager, store, Seq2Seq::max_steps(&examples))?;
    let ks = (!kernels.is_empty()).then_some(&kernels[..]);
    let per = pool()?.install(|| {
        examples
            .par_iter()
            .map(|ex| example_score(model, store, ex, ks))
            .collect::<Result<Vec<_>>>()
    })?;
    let (mut loss, mut hits, mut n) = (0.0, 0usize, 0usize);
    for (l, h, c) in per {
        loss += l;
        hits += h;
        n += c;
    }
    let accuracy = matches!(data, Dataset::Discrete(_)).then(|| hits as f64 / n as f64);
    Ok(ValidScore {
        loss: loss / n as f64,
        accuracy,
    })
}

/// (summed loss, argmax hits, supervised count) for one example.
fn example_score(
    model: &Seq2Seq,
    store: &ParamStore<f32>,
    ex: &Example<'_>,
    kernels: Option<&[Arc<Tensor<f32>>]>,
) -> Result<(f64, usize, usize)> {
    let y = model.teacher_forced(store, ex, kernels)?;
    match ex.target {
        Target::Tokens(t) => {
            let (mut loss, mut hits) = (0.0, 0);
            for (i, &label) in t[1..].iter().enumerate() {
                let row: Vec<f64> = y.row(i).iter().map(|&v| f64::from(v)).collect();
                let lp = log_softmax(&row);
                loss -= lp[label];
                let arg = lp
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, v)| if *v > lp[b] { j } else { b });
                hits += usize::from(arg == label);
            }
            Ok((loss, hits, t.len() - 1))
        }
        Target::Frames(f) => {
            let loss = y
                .data()
                .iter()
                .zip(f.data())
                .map(|(a, b)| f64::from((a - b).abs()))
                .sum();
            Ok((loss, 0, f.numel()))
        }
    }
}

#[derive(Serialize)]
struct TallyJson {
    errors: usize,
    ref_tokens: usize,
    sequences: usize,
    exact: usize,
    error_rate: f64,
    exact_accuracy: f64,
}

impl From<&Tally> for TallyJson {
    fn from(t: &Tally) -> Self {
        Self {
            errors: t.errors,
            ref_tokens: t.ref_tokens,
            sequences: t.sequences,
            exact: t.exact,
            error_rate: t.error_rate(),
            exact_accuracy: t.exact_accuracy(),
        }
    }
}

#[derive(Serialize)]
struct BucketJson {
    label: String,
    lo: usize,
    hi: Option<usize>,
    #[serde(flatten)]
    tally: TallyJson,
}

pub fn metrics_json(m: &Metrics) -> serde_json::Value {
    let buckets: Vec<BucketJson> = m
        .buckets
        .iter()
        .map(|b| BucketJson {
            label: b.label(),
            lo: b.lo,
            hi: b.hi,
            tally: (&b.tally).into(),
        })
        .collect();
    serde_json::json!({ "total": TallyJson::from(&m.total), "buckets": buckets })
}

/// Header of the bucket CSV; `prefix` columns come first on every row.
pub(crate) fn csv_header(prefix: &[&str]) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain(
            [
                "bucket",
                "lo",
                "hi",
                "errors",
                "ref_tokens",
                "sequences",
                "exact",
                "error_rate",
            ]
            .iter()
            .map(|s| s.to_string()),
        )
        .collect()
}

/// One row per bucket plus a `total` row.
pub(crate) fn csv_rows(prefix: &[String], m: &Metrics) -> Vec<Vec<String>> {
    let row = |label: String, lo: String, hi: String, t: &Tally| {
        let mut r = prefix.to_vec();
        r.extend([
            label,
            lo,
            hi,
            t.errors.to_string(),
            t.ref_tokens.to_string(),
            t.sequences.to_string(),
            t.exact.to_string(),
            t.error_rate().to_string(),
        ]);
        r
    };
    let mut rows: Vec<Vec<String>> = m
        .buckets
        .iter()
        .map(|b| {
            row(
                b.label(),
                b.lo.to_string(),
                b.hi.map_or(String::new(), |h| h.to_string()),
                &b.tally,
            )
        })
        .collect();
    rows.push(row("total".into(), String::new(), String::new(), &m.total));
    rows
}

pub(crate) fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn metrics_csv(path: &Path, m: &Metrics) -> Result<()> {
    write_csv(path, &csv_header(&[]), &csv_rows(&[], m))
}

/// Evaluates a checkpoint on a discrete dataset. Buckets default to
/// multiples of the checkpoint's training max length.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, beam: usize) -> Result<Evaluation> {
    let cfg = &ckpt.manifest.config;
    let Dataset::Discrete(examples) = data else {
        return Err(HarnessError::Mismatch(
            "decoding evaluation needs a discrete dataset".into(),
        ));
    };
    let vocab = cfg.task.vocab();
    let bad_src = examples.iter().flat_map(|e| &e.source).any(|&s| s >= cfg.task.vocab);
    let bad_tgt = examples.iter().any(|e| {
        e.target.first() != Some(&vocab.bos())
            || e.target.last() != Some(&vocab.eos())
            || e.inner().iter().any(|&t| t >= vocab.symbols)
    });
    if bad_src || bad_tgt {
        return Err(HarnessError::Mismatch(format!(
            "dataset ids do not fit the checkpoint vocabulary of {} symbols",
            cfg.task.vocab
        )));
    }
    let (model, store) = ckpt.restore()?;
    evaluate_discrete(
        &model,
        &store,
        examples,
        vocab,
        beam,
        &Metrics::default_edges(cfg.task.max_len),
    )
}

//! Greedy and beam decoding over any incremental model.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::log_softmax;

/// A model that consumes one token at a time and returns next-token scores
/// (logits or log-probabilities; both are normalized here).
pub trait StepModel {
    type State: Clone;
    fn initial_state(&self) -> Result<Self::State>;
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchConfig {
    pub beam: usize,
    pub max_len: usize,
    pub bos: usize,
    pub eos: usize,
}

/// A decoded sequence. `tokens` excludes BOS and EOS; `score` is the
/// log-probability divided by the number of emitted tokens (EOS included).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub ended: bool,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn emitted(&self) -> usize {
        self.tokens.len() + usize::from(self.ended)
    }

    pub fn score(&self) -> f64 {
        match self.emitted() {
            0 => 0.0,
            n => self.log_prob / n as f64,
        }
    }
}

fn normalized(scores: Vec<f64>) -> Vec<f64> {
    log_softmax(&scores)
}

/// Argmax decoding (BOS excluded) until EOS or `max_len` tokens. Ties go
/// to the lowest id.
pub fn greedy<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<Hypothesis> {
    let mut state = model.initial_state()?;
    let mut last = cfg.bos;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        ended: false,
        log_prob: 0.0,
    };
    for _ in 0..cfg.max_len {
        let lp = normalized(model.step(&mut state, last)?);
        let (best, &v) =
            lp.iter()
                .enumerate()
                .filter(|&(i, _)| i != cfg.bos)
                .fold(
                    (cfg.eos, &f64::NEG_INFINITY),
                    |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc },
                );
        hyp.log_prob += v;
        if best == cfg.eos {
            hyp.ended = true;
            break;
        }
        hyp.tokens.push(best);
        last = best;
    }
    Ok(hyp)
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
}

/// Beam search with length-normalized final scores.
///
/// Each step expands every live hypothesis by every token except BOS and
/// keeps the `beam` best by total log-probability. Expansions ending in EOS
/// leave the beam as finished hypotheses. Hypotheses still alive at
/// `max_len` finish without EOS. The greedy decode is always a candidate,
/// so the returned score is never below greedy's.
pub fn beam_search<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live = alloc::vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            ended: false,
            log_prob: 0.0,
        },
        state: model.initial_state()?,
    }];
    for _ in 0..cfg.max_len {
        let mut scored = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (h, l) in live.iter().enumerate() {
            let mut st = l.state.clone();
            let last = l.hyp.tokens.last().copied().unwrap_or(cfg.bos);
            let lp = normalized(model.step(&mut st, last)?);
            for (tok, v) in lp.into_iter().enumerate() {
                if tok != cfg.bos {
                    scored.push((l.hyp.log_prob + v, h, tok));
                }
            }
            states.push(st);
        }
        // stable sort keeps (hypothesis, token) order among ties
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(cfg.beam);
        let mut next = Vec::new();
        for (lp, h, tok) in scored {
            let mut hyp = live[h].hyp.clone();
            hyp.log_prob = lp;
            if tok == cfg.eos {
                hyp.ended = true;
                finished.push(hyp);
            } else {
                hyp.tokens.push(tok);
                next.push(Live {
                    hyp,
                    state: states[h].clone(),
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|l| l.hyp));
    finished.push(greedy(model, cfg)?);
    let mut best = finished.swap_remove(0);
    for h in finished {
        if h.score() > best.score() {
            best = h;
        }
    }
    Ok(best)
}

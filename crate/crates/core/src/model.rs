//! Encoder stub plus decoder, with batch losses and inference helpers.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eager, Graph};
use crate::decoder::{
    Decoder, DecoderConfig, DecoderInput, DecoderState, Encoder, OutputHead, Regularizer, StepDecoder, StepInput,
};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::params::ParamStore;
use crate::search::StepModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub src_vocab: usize,
    /// Neighbours on each side seen by the encoder stub.
    pub enc_context: usize,
    pub enc_hidden: usize,
}

/// Decoder supervision for one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target<'a> {
    /// `BOS, …, EOS`; the decoder reads all but the last id and predicts
    /// all but the first.
    Tokens(&'a [usize]),
    /// `[T, F]` frames; the decoder reads a zero frame then frames `0..T−1`.
    Frames(&'a Tensor<f32>),
}

impl Target<'_> {
    /// Number of supervised positions.
    pub fn len(&self) -> usize {
        match self {
            Target::Tokens(t) => t.len().saturating_sub(1),
            Target::Frames(f) => f.shape()[0] * f.shape()[1],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn steps(&self) -> usize {
        match self {
            Target::Tokens(t) => t.len().saturating_sub(1),
            Target::Frames(f) => f.shape()[0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Example<'a> {
    pub source: &'a [usize],
    pub target: Target<'a>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Regularization settings and the stream they draw from.
pub struct TrainMode<'a> {
    pub rng: &'a mut dyn RngCore,
}

impl core::fmt::Debug for TrainMode<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("TrainMode")
    }
}

impl Seq2Seq {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.decoder.d_model;
        let encoder = Encoder::new(store, cfg.src_vocab, cfg.enc_context, d, cfg.enc_hidden, rng.next_u64())?;
        let decoder = Decoder::new(store, cfg.decoder, rng.next_u64())?;
        Ok(Self { cfg, encoder, decoder })
    }

    fn decoder_input<T: Real>(&self, target: &Target<'_>) -> Result<(DecoderInput<T>, Option<Tensor<T>>)> {
        match (target, self.cfg.decoder.output_head) {
            (Target::Tokens(t), OutputHead::Token { vocab_size }) => {
                if t.len() < 2 {
                    return Err(Error::EmptyInput);
                }
                if let Some(&bad) = t.iter().find(|&&x| x >= vocab_size) {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "token {bad} outside vocab {vocab_size}"
                    )));
                }
                Ok((DecoderInput::Tokens(t[..t.len() - 1].to_vec()), None))
            }
            (Target::Frames(f), OutputHead::Continuous { feature_dim }) => {
                let (len, feats) = f.dims2("frames")?;
                if feats != feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: feature_dim,
                        got: feats,
                    });
                }
                if len == 0 {
                    return Err(Error::EmptyInput);
                }
                let f: Tensor<T> = f.cast();
                let mut shifted = vec![T::zero(); feats];
                shifted.extend_from_slice(&f.data()[..(len - 1) * feats]);
                Ok((DecoderInput::Frames(Tensor::new(&[len, feats], shifted)?), Some(f)))
            }
            _ => Err(Error::shape("model", "target kind does not match the output head")),
        }
    }

    /// Summed token cross-entropy or summed absolute frame error of one
    /// example, with the decoder output.
    #[allow(clippy::too_many_arguments)]
    pub fn example_loss<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        ex: &Example<'_>,
        kernels: Option<&[G::Node]>,
        mode: Option<&mut TrainMode<'_>>,
    ) -> Result<G::Node> {
        let (input, frames) = self.decoder_input::<T>(&ex.target)?;
        let memory = self.encoder.forward(g, store, ex.source)?;
        let mask = vec![true; ex.source.len()];
        let reg = mode.map(|m| Regularizer {
            dropout: self.cfg.decoder.dropout,
            stochastic_depth_p: self.cfg.decoder.stochastic_depth_p,
            rng: &mut *m.rng,
        });
        let y = self
            .decoder
            .forward_train(g, store, &input, &memory, &mask, kernels, reg)?;
        match (&ex.target, frames) {
            (Target::Tokens(t), _) => g.cross_entropy(&y, t[1..].to_vec()),
            (Target::Frames(_), Some(f)) => {
                let n = T::of(f.numel() as f64);
                let fnode = g.constant(f);
                let l = g.l1_loss(&y, &fnode)?;
                g.scale(&l, n)
            }
            _ => unreachable!("frames always accompany frame targets"),
        }
    }

    /// Mean per supervised position over the batch: token cross-entropy or
    /// per-value L1. S4 kernels are computed once at the batch max length.
    pub fn batch_loss<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        batch: &[Example<'_>],
        mut mode: Option<&mut TrainMode<'_>>,
    ) -> Result<G::Node> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let kernels = self.decoder.s4_kernels(g, store, Self::max_steps(batch))?;
        let ks = if kernels.is_empty() { None } else { Some(&kernels[..]) };
        let mut total: Option<G::Node> = None;
        let mut count = 0usize;
        for ex in batch {
            let l = self.example_loss(g, store, ex, ks, mode.as_deref_mut())?;
            count += ex.target.len();
            total = Some(match total {
                None => l,
                Some(t) => g.add(&t, &l)?,
            });
        }
        let total = total.expect("non-empty batch");
        g.scale(&total, T::of(1.0 / count.max(1) as f64))
    }

    /// Binds parameters and discretizes S4 layers once, for any number of
    /// incremental decodes.
    pub fn prepare<'a, T: Real>(&'a self, store: &'a ParamStore<T>) -> Result<Prepared<'a, T>> {
        Ok(Prepared {
            model: self,
            step: self.decoder.prepare(store)?,
        })
    }

    /// Teacher-forced decoder outputs `[steps, width]` without
    /// regularization: logits for tokens, predicted frames otherwise.
    /// `kernels` may come from [`Decoder::s4_kernels`] at any length that
    /// covers the target.
    pub fn teacher_forced<T: Real>(
        &self,
        store: &ParamStore<T>,
        ex: &Example<'_>,
        kernels: Option<&[Arc<Tensor<T>>]>,
    ) -> Result<Tensor<T>> {
        let mut g = Eager;
        let (input, _) = self.decoder_input::<T>(&ex.target)?;
        let memory = self.encoder.forward(&mut g, store, ex.source)?;
        let mask = vec![true; ex.source.len()];
        let y = self
            .decoder
            .forward_train(&mut g, store, &input, &memory, &mask, kernels, None)?;
        Ok((*y).clone())
    }

    /// Longest decoder input among `examples`.
    pub fn max_steps(examples: &[Example<'_>]) -> usize {
        examples.iter().map(|e| e.target.steps()).max().unwrap_or(0).max(1)
    }

    /// Teacher-forced loss of one example without regularization.
    pub fn eval_loss<T: Real>(&self, store: &ParamStore<T>, ex: &Example<'_>) -> Result<f64> {
        let mut g = Eager;
        Ok(self.example_loss(&mut g, store, ex, None, None)?.item().as_f64())
    }
}

/// A model ready for step-mode inference.
#[derive(Debug)]
pub struct Prepared<'a, T> {
    model: &'a Seq2Seq,
    step: StepDecoder<'a, T>,
}

impl<'a, T: Real> Prepared<'a, T> {
    /// Incremental token model over one source, for greedy or beam search.
    pub fn token_stepper(&self, src: &[usize]) -> Result<TokenStepper<'_, 'a, T>> {
        let enc = self.model.encoder.encode(self.step.store, src)?;
        let initial = self.step.init_state(&enc)?;
        Ok(TokenStepper {
            step: &self.step,
            initial,
        })
    }

    /// Free-running frame generation: each output frame is fed back.
    pub fn generate_frames(&self, src: &[usize], len: usize) -> Result<Tensor<T>> {
        let OutputHead::Continuous { feature_dim } = self.model.cfg.decoder.output_head else {
            return Err(Error::shape("model", "frame generation needs a continuous head"));
        };
        let enc = self.model.encoder.encode(self.step.store, src)?;
        let mut state = self.step.init_state(&enc)?;
        let mut prev = vec![T::zero(); feature_dim];
        let mut out = Vec::with_capacity(len * feature_dim);
        for _ in 0..len {
            prev = self.step.step(&mut state, StepInput::Frame(&prev))?;
            out.extend_from_slice(&prev);
        }
        Tensor::new(&[len, feature_dim], out)
    }
}

/// [`StepModel`] over a prepared decoder and fixed encoder output.
#[derive(Debug)]
pub struct TokenStepper<'p, 'a, T> {
    step: &'p StepDecoder<'a, T>,
    initial: DecoderState<T>,
}

impl<T: Real> StepModel for TokenStepper<'_, '_, T> {
    type State = DecoderState<T>;

    fn initial_state(&self) -> Result<DecoderState<T>> {
        Ok(self.initial.clone())
    }

    fn step(&self, state: &mut DecoderState<T>, token: usize) -> Result<Vec<f64>> {
        Ok(self
            .step
            .step(state, StepInput::Token(token))?
            .into_iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

//! Encoder stub, S4 decoder and Transformer decoder baseline.
//!
//! Both decoder variants share one pre-LayerNorm layout: every block is
//! `x + dropout(sublayer(LN(x)))`. A layer is `[mixer, source attention,
//! feed-forward]` where the mixer is an S4 block (S4 + linear + GLU) or
//! masked self-attention. Only the Transformer adds sinusoidal positions
//! (and scales token embeddings by `√d_model`).
//!
//! Models are written once against [`Graph`], so the same code runs on a
//! recording [`crate::autodiff::Tape`] for training and on
//! [`crate::autodiff::Eager`] for inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::num::{standard_normal, Real};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::s4::{S4Layer, S4State, S4Stepper};
use crate::tensor::{self, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    S4,
    Transformer,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::S4 => "s4",
            Variant::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    /// Logits over `vocab_size` classes; decoder inputs use the same ids.
    Token { vocab_size: usize },
    /// Linear regression onto `feature_dim` values per frame.
    Continuous { feature_dim: usize },
}

impl OutputHead {
    pub fn width(self) -> usize {
        match self {
            OutputHead::Token { vocab_size } => vocab_size,
            OutputHead::Continuous { feature_dim } => feature_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub state_size: usize,
    pub dropout: f64,
    pub stochastic_depth_p: f64,
    pub variant: Variant,
    pub output_head: OutputHead,
}

impl DecoderConfig {
    /// 2 layers, `d_model` 64, 4 heads, `N` 16.
    pub fn desk(variant: Variant, output_head: OutputHead) -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            state_size: 16,
            dropout: 0.1,
            stochastic_depth_p: 0.1,
            variant,
            output_head,
        }
    }

    /// 6 layers, `d_model` 512, `N` 64.
    pub fn paper(variant: Variant, output_head: OutputHead) -> Self {
        Self {
            num_layers: 6,
            d_model: 512,
            n_heads: 8,
            d_ffn: 2048,
            state_size: 64,
            ..Self::desk(variant, output_head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.variant == Variant::Transformer && self.d_model % 2 != 0 {
            return Err(Error::OddModelDim(self.d_model));
        }
        if self.variant == Variant::S4 && (self.state_size == 0 || self.state_size % 2 != 0) {
            return Err(Error::OddStateSize(self.state_size));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.stochastic_depth_p) {
            return bad(format!(
                "dropout {} / stochastic depth {}",
                self.dropout, self.stochastic_depth_p
            ));
        }
        if self.output_head.width() == 0 || self.d_ffn == 0 {
            return bad("empty output head or feed-forward".into());
        }
        Ok(())
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^{2i/d})`, `PE[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_pe<T: Real>(len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model % 2 != 0 {
        return Err(Error::OddModelDim(d_model));
    }
    Ok(Tensor::from_fn2(len, d_model, |pos, j| {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / Float::powf(10000.0, i2 / d_model as f64);
        T::of(if j % 2 == 0 {
            Float::sin(angle)
        } else {
            Float::cos(angle)
        })
    }))
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor<T> {
    Tensor::from_fn2(rows, cols, |_, _| T::of(bound * (2.0 * rng.gen::<f64>() - 1.0)))
}

/// Weight `[out, in]` and bias `[out]`, applied as `x Wᵀ + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / Float::sqrt(d_in as f64);
        Self {
            w: store.add(format!("{name}.w"), ParamKind::Weight, uniform(rng, d_out, d_in, bound)),
            b: store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[d_out])),
        }
    }

    fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), ParamKind::Weight, Tensor::zeros(&[d_out, d_in])),
            b: store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[d_out])),
        }
    }

    pub fn apply<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Node) -> Result<G::Node> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul_nt(x, &w)?;
        g.add_row(&y, &b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::full(&[d], T::one())),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(&[d])),
        }
    }

    pub fn apply<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Node) -> Result<G::Node> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, &gamma, &beta, T::of(LN_EPS))
    }
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            n_heads,
        }
    }

    /// Softmax over already projected queries and keys, per head, followed
    /// by the output projection. `mask` is row-major `[Lq, Lk]`, true = keep.
    pub fn attend<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        q: &G::Node,
        k: &G::Node,
        v: &G::Node,
        mask: Option<&[bool]>,
    ) -> Result<G::Node> {
        let (_, d) = g.value(q).dims2("attention")?;
        let dh = d / self.n_heads;
        let scale = T::of(1.0 / Float::sqrt(dh as f64));
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, s, e)?;
            let qh = g.scale(&qh, scale)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            let scores = g.matmul_nt(&qh, &kh)?;
            let p = g.softmax(&scores, mask.map(|m| m.to_vec()))?;
            heads.push(g.matmul(&p, &vh)?);
        }
        let refs: Vec<&G::Node> = heads.iter().collect();
        let cat = if refs.len() == 1 {
            heads[0].clone()
        } else {
            g.concat_cols(&refs)?
        };
        self.o.apply(g, store, &cat)
    }

    /// Full attention of `query` rows onto `context` rows.
    pub fn forward<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        query: &G::Node,
        context: &G::Node,
        mask: Option<&[bool]>,
    ) -> Result<G::Node> {
        let q = self.q.apply(g, store, query)?;
        let k = self.k.apply(g, store, context)?;
        let v = self.v.apply(g, store, context)?;
        self.attend(g, store, &q, &k, &v, mask)
    }

    /// Per-head attention probabilities `[Lq, Lk]`.
    pub fn probabilities<T: Real>(
        &self,
        store: &ParamStore<T>,
        query: &Tensor<T>,
        context: &Tensor<T>,
        mask: Option<&[bool]>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Eager;
        let qn = g.constant(query.clone());
        let cn = g.constant(context.clone());
        let q = self.q.apply(&mut g, store, &qn)?;
        let k = self.k.apply(&mut g, store, &cn)?;
        let d = q.cols();
        let dh = d / self.n_heads;
        let scale = T::of(1.0 / Float::sqrt(dh as f64));
        (0..self.n_heads)
            .map(|h| {
                let qh = tensor::scale(&tensor::slice_cols(&q, h * dh, (h + 1) * dh)?, scale);
                let kh = tensor::slice_cols(&k, h * dh, (h + 1) * dh)?;
                tensor::softmax_rows(&tensor::matmul_nt(&qh, &kh)?, mask)
            })
            .collect()
    }
}

/// Standalone multi-head attention: `Q`, `K`, `V` are projected by `attn`,
/// attended per head and output-projected.
pub fn multi_head_attention<T: Real>(
    attn: &Attention,
    store: &ParamStore<T>,
    query: &Tensor<T>,
    key: &Tensor<T>,
    value: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let d = store.get(attn.q.w).rows();
    for t in [query, key, value] {
        let (_, c) = t.dims2("attention")?;
        if c != d {
            return Err(Error::DimensionMismatch { expected: d, got: c });
        }
    }
    if key.rows() != value.rows() {
        return Err(Error::LengthMismatch(key.rows(), value.rows()));
    }
    let mut g = Eager;
    let (qn, kn, vn) = (
        g.constant(query.clone()),
        g.constant(key.clone()),
        g.constant(value.clone()),
    );
    let q = attn.q.apply(&mut g, store, &qn)?;
    let k = attn.k.apply(&mut g, store, &kn)?;
    let v = attn.v.apply(&mut g, store, &vn)?;
    Ok((*attn.attend(&mut g, store, &q, &k, &v, mask)?).clone())
}

/// Row-major lower-triangular `[len, len]` mask.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len <= i / len).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn apply<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, x: &G::Node) -> Result<G::Node> {
        let h = self.up.apply(g, store, x)?;
        let h = g.relu(&h)?;
        self.down.apply(g, store, &h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    S4(S4Layer),
    SelfAttention(Attention),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub mixer: Mixer,
    pub src_attn: Attention,
    pub ffn: FeedForward,
    pub norms: [Norm; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum InputMap {
    Embedding(ParamId),
    Projection(Linear),
}

/// Teacher-forced decoder inputs: token ids or `[L, F]` frames.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderInput<T> {
    Tokens(Vec<usize>),
    Frames(Tensor<T>),
}

impl<T: Real> DecoderInput<T> {
    pub fn len(&self) -> usize {
        match self {
            DecoderInput::Tokens(t) => t.len(),
            DecoderInput::Frames(f) => f.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One autoregressive input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepInput<'a, T> {
    Token(usize),
    Frame(&'a [T]),
}

/// Train-time regularization. `None` in its place means evaluation mode.
pub struct Regularizer<'a> {
    pub dropout: f64,
    pub stochastic_depth_p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl core::fmt::Debug for Regularizer<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Regularizer")
            .field("dropout", &self.dropout)
            .field("stochastic_depth_p", &self.stochastic_depth_p)
            .finish()
    }
}

fn dropout<T: Real, G: Graph<T>>(g: &mut G, x: &G::Node, p: f64, rng: &mut dyn RngCore) -> Result<G::Node> {
    if p == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::of(1.0 / (1.0 - p));
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = g.constant(Tensor::new(&shape, mask)?);
    g.mul(x, &m)
}

/// `x + dropout(f(LN(x)))`, with the whole branch dropped (stochastic depth)
/// or rescaled by the survival probability during training.
fn residual<T: Real, G: Graph<T>>(
    g: &mut G,
    store: &ParamStore<T>,
    norm: &Norm,
    x: &G::Node,
    reg: &mut Option<Regularizer<'_>>,
    f: impl FnOnce(&mut G, &G::Node) -> Result<G::Node>,
) -> Result<G::Node> {
    if let Some(r) = reg {
        if r.stochastic_depth_p > 0.0 && r.rng.gen::<f64>() < r.stochastic_depth_p {
            return Ok(x.clone());
        }
    }
    let h = norm.apply(g, store, x)?;
    let mut y = f(g, &h)?;
    if let Some(r) = reg {
        y = dropout(g, &y, r.dropout, r.rng)?;
        if r.stochastic_depth_p > 0.0 {
            y = g.scale(&y, T::of(1.0 / (1.0 - r.stochastic_depth_p)))?;
        }
    }
    g.add(x, &y)
}

/// Encoder memory for source-target attention.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub memory: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> EncoderOutput<T> {
    pub fn new(memory: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        let (rows, _) = memory.dims2("encoder output")?;
        if rows != mask.len() {
            return Err(Error::LengthMismatch(rows, mask.len()));
        }
        Ok(Self { memory, mask })
    }

    /// All source positions visible.
    pub fn unmasked(memory: Tensor<T>) -> Result<Self> {
        let rows = memory.dims2("encoder output")?.0;
        Self::new(memory, vec![true; rows])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    input: InputMap,
    pub layers: Vec<DecoderLayer>,
    pub head: Linear,
}

impl Decoder {
    /// Registers all parameters under `decoder.*`. The output head starts at
    /// zero so an untrained model predicts the uniform distribution (or the
    /// zero frame).
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let input = match cfg.output_head {
            OutputHead::Token { vocab_size } => {
                let std = 1.0 / Float::sqrt(d as f64);
                let table = Tensor::from_fn2(vocab_size, d, |_, _| T::of(std * standard_normal(&mut rng)));
                InputMap::Embedding(store.add("decoder.embed", ParamKind::Embedding, table))
            }
            OutputHead::Continuous { feature_dim } => {
                InputMap::Projection(Linear::new(store, "decoder.in_proj", feature_dim, d, &mut rng))
            }
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = format!("decoder.{i}");
            let mixer = match cfg.variant {
                Variant::S4 => {
                    let mut srng = ChaCha8Rng::seed_from_u64(rng.gen());
                    Mixer::S4(S4Layer::new(
                        store,
                        &format!("{p}.s4"),
                        d,
                        cfg.state_size,
                        d,
                        &mut srng,
                    )?)
                }
                Variant::Transformer => Mixer::SelfAttention(Attention::new(
                    store,
                    &format!("{p}.self_attn"),
                    d,
                    cfg.n_heads,
                    &mut rng,
                )),
            };
            let src_attn = Attention::new(store, &format!("{p}.src_attn"), d, cfg.n_heads, &mut rng);
            let ffn = FeedForward {
                up: Linear::new(store, &format!("{p}.ffn.up"), d, cfg.d_ffn, &mut rng),
                down: Linear::new(store, &format!("{p}.ffn.down"), cfg.d_ffn, d, &mut rng),
            };
            let norms = [0, 1, 2].map(|k| Norm::new(store, &format!("{p}.norms.{k}"), d));
            layers.push(DecoderLayer {
                mixer,
                src_attn,
                ffn,
                norms,
            });
        }
        let head = Linear::zeroed(store, "decoder.head", d, cfg.output_head.width());
        Ok(Self {
            cfg,
            input,
            layers,
            head,
        })
    }

    fn check_variant(&self, expected: Variant) -> Result<()> {
        if self.cfg.variant != expected {
            return Err(Error::VariantMismatch {
                expected: expected.name(),
            });
        }
        Ok(())
    }

    /// Input rows before any layer: embedding or projection, then for the
    /// Transformer `√d` scaling of token embeddings plus `PE[offset..]`.
    fn embed<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        input: &DecoderInput<T>,
        offset: usize,
    ) -> Result<G::Node> {
        let x = match (&self.input, input) {
            (InputMap::Embedding(id), DecoderInput::Tokens(t)) => {
                let table = g.param(store, *id);
                let x = g.gather(&table, t.clone())?;
                if self.cfg.variant == Variant::Transformer {
                    g.scale(&x, T::of(Float::sqrt(self.cfg.d_model as f64)))?
                } else {
                    x
                }
            }
            (InputMap::Projection(lin), DecoderInput::Frames(f)) => {
                let fx = g.constant(f.clone());
                lin.apply(g, store, &fx)?
            }
            _ => return Err(Error::shape("decoder", "input kind does not match the output head")),
        };
        match self.cfg.variant {
            Variant::S4 => Ok(x),
            Variant::Transformer => {
                let len = input.len();
                let pe = sinusoidal_pe::<T>(offset + len, self.cfg.d_model)?;
                let rows = Tensor::new(
                    &[len, self.cfg.d_model],
                    pe.data()[offset * self.cfg.d_model..].to_vec(),
                )?;
                let pe = g.constant(rows);
                g.add(&x, &pe)
            }
        }
    }

    /// S4 kernels of length `len` for every layer, to be shared by several
    /// sequences of one batch. Empty for the Transformer.
    pub fn s4_kernels<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        len: usize,
    ) -> Result<Vec<G::Node>> {
        self.layers
            .iter()
            .filter_map(|l| match &l.mixer {
                Mixer::S4(s4) => Some(s4.kernel(g, store, len)),
                Mixer::SelfAttention(_) => None,
            })
            .collect()
    }

    /// Teacher-forced forward over a whole target prefix. Returns `[L, out]`
    /// logits or frames. `kernels` may hold precomputed S4 kernels (see
    /// [`Decoder::s4_kernels`]); `reg` enables dropout and stochastic depth.
    pub fn forward_train<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        input: &DecoderInput<T>,
        memory: &G::Node,
        src_mask: &[bool],
        kernels: Option<&[G::Node]>,
        mut reg: Option<Regularizer<'_>>,
    ) -> Result<G::Node> {
        let len = input.len();
        if len == 0 {
            return Err(Error::EmptyInput);
        }
        let (t_src, dm) = g.value(memory).dims2("decoder memory")?;
        if dm != self.cfg.d_model {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.d_model,
                got: dm,
            });
        }
        if src_mask.len() != t_src {
            return Err(Error::LengthMismatch(t_src, src_mask.len()));
        }
        let src_mask: Vec<bool> = (0..len).flat_map(|_| src_mask.iter().copied()).collect();
        let self_mask = causal_mask(len);
        let mut x = self.embed(g, store, input, 0)?;
        let mut s4_index = 0;
        for layer in &self.layers {
            x = match &layer.mixer {
                Mixer::S4(s4) => {
                    let k = kernels.map(|ks| ks[s4_index].clone());
                    s4_index += 1;
                    residual(g, store, &layer.norms[0], &x, &mut reg, |g, h| match &k {
                        Some(k) => s4.forward_with_kernel(g, store, h, k),
                        None => s4.forward(g, store, h),
                    })?
                }
                Mixer::SelfAttention(att) => residual(g, store, &layer.norms[0], &x, &mut reg, |g, h| {
                    att.forward(g, store, h, h, Some(&self_mask))
                })?,
            };
            x = residual(g, store, &layer.norms[1], &x, &mut reg, |g, h| {
                layer.src_attn.forward(g, store, h, memory, Some(&src_mask))
            })?;
            x = residual(g, store, &layer.norms[2], &x, &mut reg, |g, h| {
                layer.ffn.apply(g, store, h)
            })?;
        }
        self.head.apply(g, store, &x)
    }

    /// [`Decoder::forward_train`] restricted to the S4 variant.
    pub fn s4_decoder_forward_train<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        input: &DecoderInput<T>,
        memory: &G::Node,
        src_mask: &[bool],
        reg: Option<Regularizer<'_>>,
    ) -> Result<G::Node> {
        self.check_variant(Variant::S4)?;
        self.forward_train(g, store, input, memory, src_mask, None, reg)
    }

    /// [`Decoder::forward_train`] restricted to the Transformer variant.
    pub fn transformer_decoder_forward_train<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        input: &DecoderInput<T>,
        memory: &G::Node,
        src_mask: &[bool],
        reg: Option<Regularizer<'_>>,
    ) -> Result<G::Node> {
        self.check_variant(Variant::Transformer)?;
        self.forward_train(g, store, input, memory, src_mask, None, reg)
    }

    /// Discretizes S4 layers once for an inference session.
    pub fn prepare<'a, T: Real>(&'a self, store: &'a ParamStore<T>) -> Result<StepDecoder<'a, T>> {
        let steppers = self
            .layers
            .iter()
            .map(|l| match &l.mixer {
                Mixer::S4(s4) => s4.prepare(store).map(Some),
                Mixer::SelfAttention(_) => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(StepDecoder {
            decoder: self,
            store,
            steppers,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerState<T> {
    /// `H × N` recurrent state, constant size in the step count.
    S4(S4State<T>),
    /// Projected self-attention keys and values, one row per step.
    Cache { keys: Vec<T>, values: Vec<T> },
}

/// Incremental decoding state of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<T> {
    pub position: usize,
    pub layers: Vec<LayerState<T>>,
    /// Per layer source-attention keys and values, `[T_src, d]`.
    pub src_keys: Vec<Tensor<T>>,
    pub src_values: Vec<Tensor<T>>,
    pub src_mask: Vec<bool>,
}

impl<T: Real> DecoderState<T> {
    /// Number of scalars in the per-layer mixer state.
    pub fn mixer_state_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::S4(s) => {
                    let (h, n) = s.shape();
                    2 * h * n
                }
                LayerState::Cache { keys, values } => keys.len() + values.len(),
            })
            .sum()
    }

    /// Resets every S4 recurrent state to zero, keeping the step counter.
    pub fn zero_recurrent_states(&mut self) {
        for l in &mut self.layers {
            if let LayerState::S4(s) = l {
                let (h, n) = s.shape();
                *s = S4State::zeros(h, n);
            }
        }
    }
}

/// A decoder bound to fixed parameters, with S4 layers discretized.
#[derive(Debug)]
pub struct StepDecoder<'a, T> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore<T>,
    steppers: Vec<Option<S4Stepper<T>>>,
}

impl<'a, T: Real> StepDecoder<'a, T> {
    /// Zero S4 states or empty caches, with source projections computed once.
    pub fn init_state(&self, enc: &EncoderOutput<T>) -> Result<DecoderState<T>> {
        let d = self.decoder.cfg.d_model;
        let (_, dm) = enc.memory.dims2("encoder output")?;
        if dm != d {
            return Err(Error::DimensionMismatch { expected: d, got: dm });
        }
        let mut g = Eager;
        let mem = g.constant(enc.memory.clone());
        let mut src_keys = Vec::new();
        let mut src_values = Vec::new();
        let mut layers = Vec::new();
        for (layer, stepper) in self.decoder.layers.iter().zip(&self.steppers) {
            src_keys.push((*layer.src_attn.k.apply(&mut g, self.store, &mem)?).clone());
            src_values.push((*layer.src_attn.v.apply(&mut g, self.store, &mem)?).clone());
            layers.push(match stepper {
                Some(s) => LayerState::S4(s.zero_state()),
                None => LayerState::Cache {
                    keys: Vec::new(),
                    values: Vec::new(),
                },
            });
        }
        Ok(DecoderState {
            position: 0,
            layers,
            src_keys,
            src_values,
            src_mask: enc.mask.clone(),
        })
    }

    fn check_state(&self, state: &DecoderState<T>) -> Result<()> {
        let d = self.decoder.cfg.d_model;
        let n = self.decoder.layers.len();
        if state.layers.len() != n || state.src_keys.len() != n || state.src_values.len() != n {
            return Err(Error::StateCorrupt(format!(
                "{} layer states for {n} layers",
                state.layers.len()
            )));
        }
        for (i, (l, st)) in state.layers.iter().zip(&self.steppers).enumerate() {
            match (l, st) {
                (LayerState::S4(s), Some(_)) => {
                    if s.shape() != (d, self.decoder.cfg.state_size) {
                        return Err(Error::StateCorrupt(format!("layer {i}: S4 state {:?}", s.shape())));
                    }
                }
                (LayerState::Cache { keys, values }, None) => {
                    let want = state.position * d;
                    if keys.len() != want || values.len() != want {
                        return Err(Error::StateCorrupt(format!(
                            "layer {i}: cache of {} rows at position {}",
                            keys.len() / d,
                            state.position
                        )));
                    }
                }
                _ => {
                    return Err(Error::StateCorrupt(format!(
                        "layer {i}: state kind does not match the model"
                    )))
                }
            }
        }
        for (k, v) in state.src_keys.iter().zip(&state.src_values) {
            if k.rows() != state.src_mask.len() || v.rows() != state.src_mask.len() {
                return Err(Error::StateCorrupt("source cache does not match its mask".into()));
            }
        }
        Ok(())
    }

    /// One autoregressive step; returns logits or the next frame.
    pub fn step(&self, state: &mut DecoderState<T>, input: StepInput<'_, T>) -> Result<Vec<T>> {
        self.check_state(state)?;
        let dec = self.decoder;
        let d = dec.cfg.d_model;
        let input = match input {
            StepInput::Token(t) => DecoderInput::Tokens(vec![t]),
            StepInput::Frame(f) => DecoderInput::Frames(Tensor::new(&[1, f.len()], f.to_vec())?),
        };
        let mut g = Eager;
        let mut reg = None;
        let mut x = dec.embed(&mut g, self.store, &input, state.position)?;
        let pos = state.position;
        for (i, layer) in dec.layers.iter().enumerate() {
            let store = self.store;
            let ls = &mut state.layers[i];
            x = match (&layer.mixer, ls, &self.steppers[i]) {
                (Mixer::S4(_), LayerState::S4(s), Some(stepper)) => {
                    residual(&mut g, store, &layer.norms[0], &x, &mut reg, |g, h| {
                        let y = stepper.step(s, g.value(h).data())?;
                        Ok(g.constant(Tensor::new(&[1, d], y)?))
                    })?
                }
                (Mixer::SelfAttention(att), LayerState::Cache { keys, values }, None) => {
                    residual(&mut g, store, &layer.norms[0], &x, &mut reg, |g, h| {
                        let q = att.q.apply(g, store, h)?;
                        let k = att.k.apply(g, store, h)?;
                        let v = att.v.apply(g, store, h)?;
                        keys.extend_from_slice(g.value(&k).data());
                        values.extend_from_slice(g.value(&v).data());
                        let kn = g.constant(Tensor::new(&[pos + 1, d], keys.clone())?);
                        let vn = g.constant(Tensor::new(&[pos + 1, d], values.clone())?);
                        att.attend(g, store, &q, &kn, &vn, None)
                    })?
                }
                _ => {
                    return Err(Error::StateCorrupt(format!(
                        "layer {i}: state kind does not match the model"
                    )))
                }
            };
            let (sk, sv) = (
                g.constant(state.src_keys[i].clone()),
                g.constant(state.src_values[i].clone()),
            );
            let mask = state.src_mask.clone();
            x = residual(&mut g, store, &layer.norms[1], &x, &mut reg, |g, h| {
                let q = layer.src_attn.q.apply(g, store, h)?;
                layer.src_attn.attend(g, store, &q, &sk, &sv, Some(&mask))
            })?;
            x = residual(&mut g, store, &layer.norms[2], &x, &mut reg, |g, h| {
                layer.ffn.apply(g, store, h)
            })?;
        }
        state.position += 1;
        let y = dec.head.apply(&mut g, self.store, &x)?;
        Ok(y.data().to_vec())
    }
}

/// Zero states / empty caches for `enc` (see [`StepDecoder::init_state`]).
pub fn decoder_init_state<T: Real>(step: &StepDecoder<'_, T>, enc: &EncoderOutput<T>) -> Result<DecoderState<T>> {
    step.init_state(enc)
}

/// One incremental step (see [`StepDecoder::step`]).
pub fn decoder_step<T: Real>(
    step: &StepDecoder<'_, T>,
    state: &mut DecoderState<T>,
    input: StepInput<'_, T>,
) -> Result<Vec<T>> {
    step.step(state, input)
}

/// Source-side stub standing in for an acoustic encoder: every source token
/// is embedded together with its `context` neighbours on either side (a
/// learned pad row fills the edges), then passed through a two-layer
/// feed-forward network. No position information is added, so alignment
/// has to be found from content.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub src_vocab: usize,
    pub context: usize,
    pub d_model: usize,
    embed: ParamId,
    hidden: Linear,
    out: Linear,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        src_vocab: usize,
        context: usize,
        d_model: usize,
        d_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if src_vocab == 0 || d_model == 0 || d_hidden == 0 {
            return Err(Error::InvalidArgument("empty encoder".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::from_fn2(src_vocab + 1, d_model, |_, _| T::of(standard_normal(&mut rng)));
        let embed = store.add("encoder.embed", ParamKind::Embedding, table);
        let width = (2 * context + 1) * d_model;
        let hidden = Linear::new(store, "encoder.hidden", width, d_hidden, &mut rng);
        let out = Linear::new(store, "encoder.out", d_hidden, d_model, &mut rng);
        Ok(Self {
            src_vocab,
            context,
            d_model,
            embed,
            hidden,
            out,
        })
    }

    /// `[T_src, d_model]` memory for one source sequence.
    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, src: &[usize]) -> Result<G::Node> {
        if src.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = src.iter().find(|&&s| s >= self.src_vocab) {
            return Err(Error::InvalidArgument(format!(
                "source token {bad} outside vocab {}",
                self.src_vocab
            )));
        }
        let table = g.param(store, self.embed);
        let c = self.context as isize;
        let pad = self.src_vocab;
        let mut parts = Vec::with_capacity(2 * self.context + 1);
        for off in -c..=c {
            let idx = (0..src.len() as isize)
                .map(|t| {
                    let j = t + off;
                    if j < 0 || j >= src.len() as isize {
                        pad
                    } else {
                        src[j as usize]
                    }
                })
                .collect();
            parts.push(g.gather(&table, idx)?);
        }
        let refs: Vec<&G::Node> = parts.iter().collect();
        let x = if refs.len() == 1 {
            parts[0].clone()
        } else {
            g.concat_cols(&refs)?
        };
        let h = self.hidden.apply(g, store, &x)?;
        let h = g.relu(&h)?;
        self.out.apply(g, store, &h)
    }

    /// Encoder output for inference.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, src: &[usize]) -> Result<EncoderOutput<T>> {
        let mut g = Eager;
        let m = self.forward(&mut g, store, src)?;
        EncoderOutput::unmasked((*m).clone())
    }
}

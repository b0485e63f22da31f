//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Models are written once against the [`Graph`] trait. Running them on a
//! [`Tape`] records every op so [`Tape::backward`] can replay the backward
//! rules in exact reverse order; running them on [`Eager`] just computes
//! values. Every differentiable op lives in [`Op`]; ops that are too
//! structured to express as elementary steps (the S4 kernel) plug in as a
//! [`CustomOp`] with a hand-written vector-Jacobian product.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::num::{sigmoid, Real};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, row_stats, Tensor};

/// An op with a hand-written backward rule.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradients with respect to every input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

pub enum Op<T: Real> {
    Add,
    Sub,
    Mul,
    Scale(T),
    AddRow,
    MulRow,
    MatMul,
    MatMulNT,
    Sigmoid,
    Relu,
    Softmax { mask: Option<Vec<bool>> },
    LayerNorm { eps: T },
    Gather { indices: Vec<usize> },
    SliceCols { start: usize, end: usize },
    ConcatCols,
    ConcatRows,
    Glu,
    CausalConv,
    CMul,
    CrossEntropy { targets: Vec<usize> },
    L1Loss,
    Sum,
    Mean,
    Custom(Box<dyn CustomOp<T>>),
}

impl<T: Real> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl<T: Real> Op<T> {
    /// Looks up an op that takes no attributes by name.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "add_row" => Op::AddRow,
            "mul_row" => Op::MulRow,
            "matmul" => Op::MatMul,
            "matmul_nt" => Op::MatMulNT,
            "sigmoid" => Op::Sigmoid,
            "relu" => Op::Relu,
            "softmax" => Op::Softmax { mask: None },
            "concat_cols" => Op::ConcatCols,
            "concat_rows" => Op::ConcatRows,
            "glu" => Op::Glu,
            "causal_conv" => Op::CausalConv,
            "cmul" => Op::CMul,
            "l1_loss" => Op::L1Loss,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::MatMul => "matmul",
            Op::MatMulNT => "matmul_nt",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::ConcatRows => "concat_rows",
            Op::Glu => "glu",
            Op::CausalConv => "causal_conv",
            Op::CMul => "cmul",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1Loss => "l1_loss",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Custom(c) => c.name(),
        }
    }

    fn arity(&self) -> Option<usize> {
        Some(match self {
            Op::Add | Op::Sub | Op::Mul | Op::AddRow | Op::MulRow | Op::MatMul | Op::MatMulNT => 2,
            Op::CausalConv | Op::CMul | Op::L1Loss => 2,
            Op::LayerNorm { .. } => 3,
            Op::ConcatCols | Op::ConcatRows | Op::Custom(_) => return None,
            _ => 1,
        })
    }

    pub fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if let Some(n) = self.arity() {
            if x.len() != n {
                return Err(Error::shape(
                    self.name(),
                    format!("expected {n} inputs, got {}", x.len()),
                ));
            }
        }
        match self {
            Op::Add => tensor::add(x[0], x[1]),
            Op::Sub => tensor::sub(x[0], x[1]),
            Op::Mul => tensor::mul(x[0], x[1]),
            Op::Scale(s) => Ok(tensor::scale(x[0], *s)),
            Op::AddRow => tensor::add_row(x[0], x[1]),
            Op::MulRow => tensor::mul_row(x[0], x[1]),
            Op::MatMul => tensor::matmul(x[0], x[1]),
            Op::MatMulNT => tensor::matmul_nt(x[0], x[1]),
            Op::Sigmoid => Ok(tensor::sigmoid_t(x[0])),
            Op::Relu => Ok(tensor::relu(x[0])),
            Op::Softmax { mask } => tensor::softmax_rows(x[0], mask.as_deref()),
            Op::LayerNorm { eps } => tensor::layer_norm(x[0], x[1], x[2], *eps),
            Op::Gather { indices } => tensor::gather_rows(x[0], indices),
            Op::SliceCols { start, end } => tensor::slice_cols(x[0], *start, *end),
            Op::ConcatCols => tensor::concat_cols(x),
            Op::ConcatRows => tensor::concat_rows(x),
            Op::Glu => tensor::glu_rows(x[0]),
            Op::CausalConv => tensor::causal_conv(x[0], x[1]),
            Op::CMul => tensor::cmul(x[0], x[1]),
            Op::CrossEntropy { targets } => tensor::cross_entropy(x[0], targets),
            Op::L1Loss => tensor::l1_loss(x[0], x[1]),
            Op::Sum => Ok(tensor::sum(x[0])),
            Op::Mean => Ok(tensor::mean(x[0])),
            Op::Custom(c) => c.forward(x),
        }
    }

    /// Vector-Jacobian product for every input.
    pub fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(match self {
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|v| -v)],
            Op::Mul => vec![tensor::mul(g, x[1])?, tensor::mul(g, x[0])?],
            Op::Scale(s) => vec![tensor::scale(g, *s)],
            Op::AddRow => vec![g.clone(), col_sum(g, x[1].shape())],
            Op::MulRow => {
                let gv = col_sum(&tensor::mul(g, x[0])?, x[1].shape());
                vec![tensor::mul_row(g, x[1])?, gv]
            }
            Op::MatMul => {
                let (m, k) = x[0].dims2("matmul")?;
                let n = x[1].cols();
                let mut ga = Tensor::zeros(&[m, k]);
                gemm_nt(g.data(), x[1].data(), ga.data_mut(), m, n, k);
                let mut gb = Tensor::zeros(&[k, n]);
                gemm_tn(x[0].data(), g.data(), gb.data_mut(), m, k, n);
                vec![ga, gb]
            }
            Op::MatMulNT => {
                let (m, k) = x[0].dims2("matmul_nt")?;
                let n = x[1].rows();
                let mut ga = Tensor::zeros(&[m, k]);
                gemm_nn(g.data(), x[1].data(), ga.data_mut(), m, n, k);
                let mut gb = Tensor::zeros(&[n, k]);
                gemm_tn(g.data(), x[0].data(), gb.data_mut(), m, n, k);
                vec![ga, gb]
            }
            Op::Sigmoid => {
                let mut gx = g.clone();
                for (d, &s) in gx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (T::one() - s);
                }
                vec![gx]
            }
            Op::Relu => {
                let mut gx = g.clone();
                for (d, &v) in gx.data_mut().iter_mut().zip(x[0].data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                vec![gx]
            }
            Op::Softmax { .. } => {
                let (m, n) = y.dims2("softmax")?;
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx.data_mut()[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![gx]
            }
            Op::LayerNorm { eps } => layer_norm_backward(x[0], x[1], g, *eps)?,
            Op::Gather { indices } => {
                let d = x[0].cols();
                let mut gt = Tensor::zeros(x[0].shape());
                for (r, &i) in indices.iter().enumerate() {
                    let src = g.row(r);
                    for (o, &v) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                vec![gt]
            }
            Op::SliceCols { start, end } => {
                let (r, c) = x[0].dims2("slice_cols")?;
                let mut gx = Tensor::zeros(&[r, c]);
                let w = end - start;
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![gx]
            }
            Op::ConcatCols => {
                let mut out = Vec::with_capacity(x.len());
                let mut off = 0;
                for p in x {
                    let w = p.cols();
                    out.push(tensor::slice_cols(g, off, off + w)?);
                    off += w;
                }
                out
            }
            Op::ConcatRows => {
                let c = g.cols();
                let mut out = Vec::with_capacity(x.len());
                let mut off = 0;
                for p in x {
                    let n = p.numel();
                    out.push(Tensor::new(p.shape(), g.data()[off..off + n].to_vec())?);
                    off += n;
                }
                debug_assert_eq!(off, g.rows() * c);
                out
            }
            Op::Glu => {
                let (m, c) = x[0].dims2("glu")?;
                let h = c / 2;
                let mut gx = Tensor::zeros(&[m, c]);
                for i in 0..m {
                    for j in 0..h {
                        let a = x[0].data()[i * c + j];
                        let s = sigmoid(x[0].data()[i * c + h + j]);
                        let gv = g.data()[i * h + j];
                        gx.data_mut()[i * c + j] = gv * s;
                        gx.data_mut()[i * c + h + j] = gv * a * s * (T::one() - s);
                    }
                }
                vec![gx]
            }
            Op::CausalConv => {
                let (h, klen) = x[0].dims2("causal_conv")?;
                let l = x[1].rows();
                let (k, u) = (x[0].data(), x[1].data());
                let mut gk = Tensor::zeros(&[h, klen]);
                let mut gu = Tensor::zeros(&[l, h]);
                for t in 0..l {
                    let grow = &g.data()[t * h..(t + 1) * h];
                    for j in 0..=t {
                        let s = t - j;
                        for c in 0..h {
                            gk.data_mut()[c * klen + j] += grow[c] * u[s * h + c];
                            gu.data_mut()[s * h + c] += grow[c] * k[c * klen + j];
                        }
                    }
                }
                vec![gk, gu]
            }
            Op::CMul => {
                let conj_mul = |g: &Tensor<T>, z: &Tensor<T>| {
                    let mut out = g.clone();
                    for (o, (gv, zv)) in out
                        .data_mut()
                        .chunks_mut(2)
                        .zip(g.data().chunks(2).zip(z.data().chunks(2)))
                    {
                        o[0] = gv[0] * zv[0] + gv[1] * zv[1];
                        o[1] = gv[1] * zv[0] - gv[0] * zv[1];
                    }
                    out
                };
                vec![conj_mul(g, x[1]), conj_mul(g, x[0])]
            }
            Op::CrossEntropy { targets } => {
                let (m, c) = x[0].dims2("cross_entropy")?;
                let gs = g.item();
                let mut gl = Tensor::zeros(&[m, c]);
                for (i, &t) in targets.iter().enumerate() {
                    let lp = tensor::log_softmax(x[0].row(i));
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl.data_mut()[i * c + j] = gs * (lp[j].exp() - onehot);
                    }
                }
                vec![gl]
            }
            Op::L1Loss => {
                let n = T::of(x[0].numel().max(1) as f64);
                let gs = g.item() / n;
                let mut gp = Tensor::zeros(x[0].shape());
                for (o, (&a, &b)) in gp.data_mut().iter_mut().zip(x[0].data().iter().zip(x[1].data())) {
                    *o = if a > b {
                        gs
                    } else if a < b {
                        -gs
                    } else {
                        T::zero()
                    };
                }
                let gt = gp.map(|v| -v);
                vec![gp, gt]
            }
            Op::Sum => vec![Tensor::full(x[0].shape(), g.item())],
            Op::Mean => {
                let n = T::of(x[0].numel().max(1) as f64);
                vec![Tensor::full(x[0].shape(), g.item() / n)]
            }
            Op::Custom(c) => c.backward(x, y, g)?,
        })
    }
}

fn col_sum<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let c = g.cols();
    let mut out = Tensor::zeros(shape);
    for row in g.data().chunks(c) {
        for (o, &v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn layer_norm_backward<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<Vec<Tensor<T>>> {
    let (m, c) = x.dims2("layer_norm")?;
    let n = T::of(c as f64);
    let mut gx = Tensor::zeros(&[m, c]);
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let mut xhat = vec![T::zero(); c];
    let mut gh = vec![T::zero(); c];
    for i in 0..m {
        let row = x.row(i);
        let grow = g.row(i);
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..c {
            xhat[j] = (row[j] - mean) * rstd;
            gh[j] = grow[j] * gamma.data()[j];
            gg.data_mut()[j] += grow[j] * xhat[j];
            gb.data_mut()[j] += grow[j];
        }
        let mean_gh = gh.iter().copied().sum::<T>() / n;
        let mean_ghx = gh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
        for j in 0..c {
            gx.data_mut()[i * c + j] = rstd * (gh[j] - mean_gh - xhat[j] * mean_ghx);
        }
    }
    Ok(vec![gx, gg, gb])
}

/// Execution backend the models are written against.
pub trait Graph<T: Real> {
    type Node: Clone;

    fn constant(&mut self, value: Tensor<T>) -> Self::Node;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor<T>;
    fn apply(&mut self, op: Op<T>, inputs: &[&Self::Node]) -> Result<Self::Node>;

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Mul, &[a, b])
    }
    fn scale(&mut self, a: &Self::Node, s: T) -> Result<Self::Node> {
        self.apply(Op::Scale(s), &[a])
    }
    fn add_row(&mut self, a: &Self::Node, v: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::AddRow, &[a, v])
    }
    fn mul_row(&mut self, a: &Self::Node, v: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::MulRow, &[a, v])
    }
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn matmul_nt(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::MatMulNT, &[a, b])
    }
    fn sigmoid(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Sigmoid, &[a])
    }
    fn relu(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Relu, &[a])
    }
    fn softmax(&mut self, a: &Self::Node, mask: Option<Vec<bool>>) -> Result<Self::Node> {
        self.apply(Op::Softmax { mask }, &[a])
    }
    fn layer_norm(&mut self, a: &Self::Node, gamma: &Self::Node, beta: &Self::Node, eps: T) -> Result<Self::Node> {
        self.apply(Op::LayerNorm { eps }, &[a, gamma, beta])
    }
    fn gather(&mut self, table: &Self::Node, indices: Vec<usize>) -> Result<Self::Node> {
        self.apply(Op::Gather { indices }, &[table])
    }
    fn slice_cols(&mut self, a: &Self::Node, start: usize, end: usize) -> Result<Self::Node> {
        self.apply(Op::SliceCols { start, end }, &[a])
    }
    fn concat_cols(&mut self, parts: &[&Self::Node]) -> Result<Self::Node> {
        self.apply(Op::ConcatCols, parts)
    }
    fn concat_rows(&mut self, parts: &[&Self::Node]) -> Result<Self::Node> {
        self.apply(Op::ConcatRows, parts)
    }
    fn glu(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Glu, &[a])
    }
    fn causal_conv(&mut self, kernel: &Self::Node, u: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::CausalConv, &[kernel, u])
    }
    fn cmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::CMul, &[a, b])
    }
    fn cross_entropy(&mut self, logits: &Self::Node, targets: Vec<usize>) -> Result<Self::Node> {
        self.apply(Op::CrossEntropy { targets }, &[logits])
    }
    fn l1_loss(&mut self, pred: &Self::Node, target: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::L1Loss, &[pred, target])
    }
    fn sum(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Sum, &[a])
    }
    fn mean(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Mean, &[a])
    }
    fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[&Self::Node]) -> Result<Self::Node> {
        self.apply(Op::Custom(op), inputs)
    }
}

/// Value-only backend.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type Node = Arc<Tensor<T>>;

    fn constant(&mut self, value: Tensor<T>) -> Self::Node {
        Arc::new(value)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Node {
        store.shared(id)
    }

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor<T> {
        node
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Self::Node]) -> Result<Self::Node> {
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|n| n.as_ref()).collect();
        op.forward(&xs).map(Arc::new)
    }
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

struct Entry<T: Real> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    id: u64,
    entries: Vec<Entry<T>>,
    bound: Vec<Option<Var>>,
    consumed: bool,
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("len", &self.entries.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            bound: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Arc<Tensor<T>>, inputs: Vec<usize>, op: Option<Op<T>>, requires_grad: bool) -> Var {
        self.entries.push(Entry {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: self.entries.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Arc::new(value), Vec::new(), None, requires_grad)
    }

    fn check(&self, v: &Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.entries.len() {
            return Err(Error::DetachedLoss);
        }
        Ok(())
    }

    /// Appends `op(inputs)` to the tape.
    pub fn record(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        for v in inputs {
            self.check(v)?;
        }
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| self.entries[v.id].value.as_ref()).collect();
        let value = op.forward(&xs)?;
        let requires_grad = inputs.iter().any(|v| self.entries[v.id].requires_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(Arc::new(value), ids, Some(op), requires_grad))
    }

    pub fn get(&self, v: &Var) -> &Tensor<T> {
        &self.entries[v.id].value
    }

    /// Leaf bound to a parameter on first use, if any.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.index()).copied().flatten()
    }

    /// Reverse sweep from a scalar loss. A tape can be swept once.
    pub fn backward(&mut self, loss: &Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.check(loss)?;
        let lv = &self.entries[loss.id].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.id).rev() {
            let entry = &self.entries[i];
            let Some(op) = entry.op.as_ref() else { continue };
            if !entry.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let xs: Vec<&Tensor<T>> = entry.inputs.iter().map(|&j| self.entries[j].value.as_ref()).collect();
            let gin = op.backward(&xs, &entry.value, &g)?;
            for (&j, gj) in entry.inputs.iter().zip(gin) {
                if !self.entries[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.accumulate(&gj),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        // keep leaf gradients only
        for (g, e) in grads.iter_mut().zip(&self.entries) {
            if e.op.is_some() {
                *g = None;
            }
        }
        let shapes = self.entries.iter().map(|e| e.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
            bound: self.bound.clone(),
        })
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type Node = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound_param(id) {
            return v;
        }
        let v = self.push(store.shared(id), Vec::new(), None, true);
        if self.bound.len() <= id.index() {
            self.bound.resize(id.index() + 1, None);
        }
        self.bound[id.index()] = Some(v);
        v
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor<T> {
        self.get(node)
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Var]) -> Result<Var> {
        let ins: Vec<Var> = inputs.iter().map(|v| **v).collect();
        self.record(op, &ins)
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    bound: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zeros when the leaf did not reach the loss.
    pub fn get(&self, v: &Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    /// Gradient for every parameter in `store`, zeros for the ones the
    /// forward pass never touched.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match self.bound.get(id.index()).copied().flatten() {
                Some(v) => self.get(&v),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_and_sigmoid_chain() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.leaf(Tensor::scalar(-2.0), true);
        let xy = tape.mul(&x, &y).unwrap();
        let s = tape.sigmoid(&xy).unwrap();
        let loss = tape.sum(&s).unwrap();
        let g = tape.backward(&loss).unwrap();
        let sv = sigmoid(-6.0);
        assert!((g.get(&x).item() - sv * (1.0 - sv) * -2.0).abs() < 1e-15);
        assert!((g.get(&y).item() - sv * (1.0 - sv) * 3.0).abs() < 1e-15);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let l = tape.scale(&x, 2.0).unwrap();
        tape.backward(&l).unwrap();
        assert_eq!(tape.backward(&l).unwrap_err(), Error::TapeConsumed);
        assert_eq!(tape.scale(&x, 2.0).unwrap_err(), Error::TapeConsumed);
    }

    #[test]
    fn loss_checks() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert_eq!(tape.backward(&x).unwrap_err(), Error::NotScalar(alloc::vec![2, 2]));
        let mut other = Tape::<f64>::new();
        let z = other.leaf(Tensor::scalar(0.0), true);
        assert_eq!(tape.backward(&z).unwrap_err(), Error::DetachedLoss);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0), true);
        let unused = tape.leaf(Tensor::full(&[2, 2], 1.0), true);
        let l = tape.sum(&x).unwrap();
        let g = tape.backward(&l).unwrap();
        assert_eq!(g.get(&unused), Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(&x), Tensor::full(&[3], 1.0));
    }

    #[test]
    fn op_lookup_by_name() {
        assert!(matches!(Op::<f32>::parse("matmul"), Ok(Op::MatMul)));
        assert_eq!(
            Op::<f32>::parse("conv3d").unwrap_err(),
            Error::UnknownOp("conv3d".into())
        );
    }

    #[test]
    fn add_of_zeros_is_zeros() {
        let mut e = Eager;
        let a = Graph::<f64>::constant(&mut e, Tensor::zeros(&[2, 3]));
        let y = e.add(&a, &a).unwrap();
        assert_eq!(*y, Tensor::zeros(&[2, 3]));
    }
}

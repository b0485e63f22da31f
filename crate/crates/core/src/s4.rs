//! The S4 layer.
//!
//! Each of the `H` feature channels owns an independent single-input
//! single-output state space of size `N` whose state matrix is diagonal
//! plus low rank, `A = diag(λ) − p pᴴ`. The real parts of `λ` are stored
//! as `r` with `Re λ = −exp(r)`, so every channel is stable for any value
//! of its parameters. The step size is `Δ = exp(log Δ)` per channel.
//!
//! Training uses the convolutional view: the kernel `K̄_k = Re(C̄ Āᵏ B̄)` is
//! materialized at the current parameters for the sequence length and
//! convolved causally with the input. Inference uses the recurrent view
//! from a [`S4Stepper`], which caches the discretized matrices once per
//! session. Both are followed by a feedthrough `D u`, a linear map to
//! `2·H_out` features and a GLU.

use alloc::boxed::Box;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::f64::consts::PI;

use num_complex::{Complex, Complex64};
use num_traits::{Float, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Graph};
use crate::error::{Error, Result};
use crate::linalg::{CMat, Lu};
use crate::num::{sigmoid, standard_normal, Real};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::ssm::{self, ContinuousSsm, DiscreteSsm};
use crate::tensor::{self, Tensor};

/// Range of the log-uniform initial step size.
pub const DELTA_INIT_MIN: f64 = 1e-3;
pub const DELTA_INIT_MAX: f64 = 1e-1;

/// Parameters of one channel in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DplrParams {
    /// `r_n` with `Re λ_n = −exp(r_n)`.
    pub log_neg_lambda_re: Vec<f64>,
    pub lambda_im: Vec<f64>,
    pub p: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub log_delta: f64,
}

impl DplrParams {
    pub fn state_size(&self) -> usize {
        self.lambda_im.len()
    }

    pub fn lambda(&self) -> Vec<Complex64> {
        self.log_neg_lambda_re
            .iter()
            .zip(&self.lambda_im)
            .map(|(&r, &im)| Complex64::new(-Float::exp(r), im))
            .collect()
    }

    pub fn delta(&self) -> f64 {
        Float::exp(self.log_delta)
    }

    /// Dense `A = diag(λ) − p pᴴ`.
    pub fn state_matrix(&self) -> CMat {
        let lambda = self.lambda();
        let n = lambda.len();
        CMat::from_fn(n, n, |i, j| {
            let diag = if i == j { lambda[i] } else { Complex64::zero() };
            diag - self.p[i] * self.p[j].conj()
        })
    }

    fn sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n % 2 != 0 {
            return Err(Error::OddStateSize(n));
        }
        let scale = 1.0 / Float::sqrt(n as f64);
        let c = (0..n)
            .map(|_| {
                let re = standard_normal(rng) * scale;
                let im = standard_normal(rng) * scale;
                Complex64::new(re, im)
            })
            .collect();
        let (lo, hi) = (Float::ln(DELTA_INIT_MIN), Float::ln(DELTA_INIT_MAX));
        let log_delta = lo + (hi - lo) * rng.gen::<f64>();
        Ok(Self {
            log_neg_lambda_re: vec![0.5f64.ln(); n],
            lambda_im: (0..n).map(|i| PI * i as f64).collect(),
            p: vec![Complex64::zero(); n],
            b: vec![Complex64::new(1.0, 0.0); n],
            c,
            log_delta,
        })
    }
}

/// Deterministic initialization: `λ_n = −1/2 + iπn`, `p = 0`, `B = 1`,
/// `C ~ N(0, 1/N)` per component and `Δ` log-uniform in
/// `[DELTA_INIT_MIN, DELTA_INIT_MAX]`.
pub fn init_dplr(n: usize, seed: u64) -> Result<DplrParams> {
    DplrParams::sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Dense continuous system of one channel with real feedthrough `d`.
pub fn dplr_to_dense(params: &DplrParams, d: f64) -> ContinuousSsm {
    ContinuousSsm {
        a: params.state_matrix(),
        b: params.b.clone(),
        c: params.c.clone(),
        d: Complex64::new(d, 0.0),
    }
}

/// Intermediate values of one channel's kernel, kept for the backward pass.
struct ChannelTrace {
    a: CMat,
    lu: Lu,
    a_bar: CMat,
    b_bar: Vec<Complex64>,
    /// `Āᵏ B̄` for every emitted position.
    powers: Vec<Vec<Complex64>>,
}

fn channel_kernel(params: &DplrParams, len: usize) -> Result<(Vec<f64>, ChannelTrace)> {
    let n = params.state_size();
    let delta = params.delta();
    let a = params.state_matrix();
    let half = Complex64::new(delta / 2.0, 0.0);
    let eye = CMat::identity(n);
    let lu = Lu::factor(&eye.sub(&a.scale(half)))?;
    let a_bar = lu.solve_mat(&eye.add(&a.scale(half)));
    let db: Vec<Complex64> = params.b.iter().map(|b| b * delta).collect();
    let b_bar = lu.solve_vec(&db);
    let mut powers = Vec::with_capacity(len);
    let mut kernel = Vec::with_capacity(len);
    let mut v = b_bar.clone();
    for k in 0..len {
        if k > 0 {
            v = a_bar.matvec(&v);
        }
        let s = params
            .c
            .iter()
            .zip(&v)
            .fold(Complex64::zero(), |acc, (c, x)| acc + c * x);
        kernel.push(s.re);
        powers.push(v.clone());
    }
    Ok((
        kernel,
        ChannelTrace {
            a,
            lu,
            a_bar,
            b_bar,
            powers,
        },
    ))
}

/// Gradients of one channel; complex entries use the `∂/∂re + i ∂/∂im`
/// convention.
#[derive(Clone, Debug)]
struct ChannelGrad {
    log_neg_lambda_re: Vec<f64>,
    lambda_im: Vec<f64>,
    p: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    log_delta: f64,
}

fn channel_kernel_backward(params: &DplrParams, tr: &ChannelTrace, gk: &[f64]) -> ChannelGrad {
    let n = params.state_size();
    let len = gk.len();
    let delta = params.delta();

    // K_k = Re(c · v_k), v_{k+1} = Ā v_k, v_0 = B̄
    let mut gc = vec![Complex64::zero(); n];
    let mut g_abar = CMat::zeros(n, n);
    let mut gv = vec![Complex64::zero(); n];
    for k in (0..len).rev() {
        if k + 1 < len {
            // gv currently holds the adjoint of v_{k+1}
            let vk = &tr.powers[k];
            for i in 0..n {
                if gv[i].is_zero() {
                    continue;
                }
                for j in 0..n {
                    g_abar[(i, j)] += gv[i] * vk[j].conj();
                }
            }
            gv = tr.a_bar.matvec_adjoint(&gv);
        }
        let g = gk[k];
        for i in 0..n {
            gv[i] += params.c[i].conj() * g;
            gc[i] += tr.powers[k][i].conj() * g;
        }
    }
    let g_bbar = gv;

    // Ā = M⁻¹ P, B̄ = M⁻¹ (Δ B) with M = I − Δ/2·A, P = I + Δ/2·A
    let z_mat = tr.lu.solve_adjoint_mat(&g_abar);
    let z_vec = tr.lu.solve_adjoint_vec(&g_bbar);
    let g_p = &z_mat;
    let mut g_m = z_mat.matmul(&tr.a_bar.adjoint()).scale(Complex64::new(-1.0, 0.0));
    for i in 0..n {
        for j in 0..n {
            g_m[(i, j)] -= z_vec[i] * tr.b_bar[j].conj();
        }
    }
    let g_a = g_p.sub(&g_m).scale(Complex64::new(delta / 2.0, 0.0));
    let mut g_delta = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = tr.a[(i, j)];
            g_delta += (g_p[(i, j)].conj() * a).re * 0.5 - (g_m[(i, j)].conj() * a).re * 0.5;
        }
        g_delta += (z_vec[i].conj() * params.b[i]).re;
    }
    let gb: Vec<Complex64> = z_vec.iter().map(|z| z * delta).collect();

    // A = diag(λ) − p pᴴ
    let lambda = params.lambda();
    let gp_left = g_a.matvec(&params.p);
    let gp_right = g_a.matvec_adjoint(&params.p);
    let gp = gp_left.iter().zip(&gp_right).map(|(a, b)| -(a + b)).collect();
    ChannelGrad {
        log_neg_lambda_re: (0..n).map(|i| g_a[(i, i)].re * lambda[i].re).collect(),
        lambda_im: (0..n).map(|i| g_a[(i, i)].im).collect(),
        p: gp,
        b: gb,
        c: gc,
        log_delta: g_delta * delta,
    }
}

/// Number of kernel-parameter tensors consumed by [`S4KernelOp`].
const KERNEL_INPUTS: usize = 9;

/// Custom op mapping the nine `[H, N]`/`[H]` parameter tensors of a layer
/// to its `[H, len]` convolution kernel.
struct S4KernelOp {
    len: usize,
    traces: RefCell<Vec<(DplrParams, ChannelTrace)>>,
}

fn gather_channels<T: Real>(x: &[&Tensor<T>]) -> Result<Vec<DplrParams>> {
    if x.len() != KERNEL_INPUTS {
        return Err(Error::shape("s4_kernel", format!("expected {KERNEL_INPUTS} inputs")));
    }
    let (h, n) = x[0].dims2("s4_kernel")?;
    for t in &x[1..8] {
        if t.shape() != [h, n] {
            return Err(Error::shape("s4_kernel", format!("{:?} vs [{h}, {n}]", t.shape())));
        }
    }
    if x[8].numel() != h {
        return Err(Error::shape(
            "s4_kernel",
            format!("log_delta of {} for {h} channels", x[8].numel()),
        ));
    }
    Ok((0..h).map(|c| channel_from(x, c)).collect())
}

fn channel_from<T: Real>(x: &[&Tensor<T>], c: usize) -> DplrParams {
    let f = |t: &Tensor<T>| -> Vec<f64> { t.row(c).iter().map(|v| v.as_f64()).collect() };
    let cplx = |re: &Tensor<T>, im: &Tensor<T>| -> Vec<Complex64> {
        re.row(c)
            .iter()
            .zip(im.row(c))
            .map(|(a, b)| Complex64::new(a.as_f64(), b.as_f64()))
            .collect()
    };
    DplrParams {
        log_neg_lambda_re: f(x[0]),
        lambda_im: f(x[1]),
        p: cplx(x[2], x[3]),
        b: cplx(x[4], x[5]),
        c: cplx(x[6], x[7]),
        log_delta: x[8].data()[c].as_f64(),
    }
}

impl<T: Real> CustomOp<T> for S4KernelOp {
    fn name(&self) -> &'static str {
        "s4_kernel"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let channels = gather_channels(x)?;
        let h = channels.len();
        let mut out = Tensor::zeros(&[h, self.len]);
        let mut traces = Vec::with_capacity(h);
        for (c, params) in channels.into_iter().enumerate() {
            let (k, tr) = channel_kernel(&params, self.len)?;
            for (o, v) in out.data_mut()[c * self.len..(c + 1) * self.len].iter_mut().zip(k) {
                *o = T::of(v);
            }
            traces.push((params, tr));
        }
        *self.traces.borrow_mut() = traces;
        Ok(out)
    }

    fn backward(&self, x: &[&Tensor<T>], _y: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let traces = self.traces.borrow();
        let (h, n) = x[0].dims2("s4_kernel")?;
        let mut grads: Vec<Tensor<T>> = (0..8).map(|_| Tensor::zeros(&[h, n])).collect();
        let mut g_delta = Tensor::zeros(&[h]);
        for (c, (params, tr)) in traces.iter().enumerate() {
            let gk: Vec<f64> = g.row(c).iter().map(|v| v.as_f64()).collect();
            let cg = channel_kernel_backward(params, tr, &gk);
            for i in 0..n {
                let at = c * n + i;
                grads[0].data_mut()[at] = T::of(cg.log_neg_lambda_re[i]);
                grads[1].data_mut()[at] = T::of(cg.lambda_im[i]);
                grads[2].data_mut()[at] = T::of(cg.p[i].re);
                grads[3].data_mut()[at] = T::of(cg.p[i].im);
                grads[4].data_mut()[at] = T::of(cg.b[i].re);
                grads[5].data_mut()[at] = T::of(cg.b[i].im);
                grads[6].data_mut()[at] = T::of(cg.c[i].re);
                grads[7].data_mut()[at] = T::of(cg.c[i].im);
            }
            g_delta.data_mut()[c] = T::of(cg.log_delta);
        }
        grads.push(g_delta);
        Ok(grads)
    }
}

/// Checkpoint suffixes, in the order the parameters are registered.
pub const S4_PARAM_NAMES: [&str; 12] = [
    "lambda_re",
    "lambda_im",
    "p_re",
    "p_im",
    "B_re",
    "B_im",
    "C_re",
    "C_im",
    "log_delta",
    "D",
    "out_linear",
    "out_bias",
];

/// Parameter handles of one S4 layer (`H` channels, state size `N`,
/// `H_out` outputs after the GLU).
#[derive(Clone, Debug, PartialEq)]
pub struct S4Layer {
    pub hidden: usize,
    pub state: usize,
    pub out_dim: usize,
    ids: [ParamId; 12],
}

impl S4Layer {
    /// Registers `<prefix>.{lambda_re, …, out_bias}` in `store`.
    ///
    /// `lambda_re` holds `r` with `Re λ = −exp(r)`. `out_linear` is
    /// `[2·H_out, H]`; the first `H_out` rows feed the GLU value half.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        state: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if state % 2 != 0 {
            return Err(Error::OddStateSize(state));
        }
        let channels: Vec<DplrParams> = (0..hidden)
            .map(|_| DplrParams::sample(state, rng))
            .collect::<Result<_>>()?;
        let mat =
            |f: &dyn Fn(&DplrParams, usize) -> f64| Tensor::from_fn2(hidden, state, |c, i| T::of(f(&channels[c], i)));
        let tensors = [
            mat(&|p, i| p.log_neg_lambda_re[i]),
            mat(&|p, i| p.lambda_im[i]),
            mat(&|p, i| p.p[i].re),
            mat(&|p, i| p.p[i].im),
            mat(&|p, i| p.b[i].re),
            mat(&|p, i| p.b[i].im),
            mat(&|p, i| p.c[i].re),
            mat(&|p, i| p.c[i].im),
        ];
        let mut ids = Vec::with_capacity(12);
        for (name, t) in S4_PARAM_NAMES.iter().zip(tensors) {
            ids.push(store.add(format!("{prefix}.{name}"), ParamKind::S4, t));
        }
        let log_delta = Tensor::new(&[hidden], channels.iter().map(|p| T::of(p.log_delta)).collect())?;
        ids.push(store.add(format!("{prefix}.log_delta"), ParamKind::S4, log_delta));
        let d = Tensor::new(&[hidden], (0..hidden).map(|_| T::of(standard_normal(rng))).collect())?;
        ids.push(store.add(format!("{prefix}.D"), ParamKind::S4, d));
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = Tensor::from_fn2(2 * out_dim, hidden, |_, _| {
            T::of(bound * (2.0 * rng.gen::<f64>() - 1.0))
        });
        ids.push(store.add(format!("{prefix}.out_linear"), ParamKind::Weight, w));
        ids.push(store.add(
            format!("{prefix}.out_bias"),
            ParamKind::Bias,
            Tensor::zeros(&[2 * out_dim]),
        ));
        Ok(Self {
            hidden,
            state,
            out_dim,
            ids: ids.try_into().expect("twelve parameters"),
        })
    }

    pub fn param_ids(&self) -> &[ParamId; 12] {
        &self.ids
    }

    pub fn d_id(&self) -> ParamId {
        self.ids[9]
    }

    pub fn out_linear_id(&self) -> ParamId {
        self.ids[10]
    }

    pub fn out_bias_id(&self) -> ParamId {
        self.ids[11]
    }

    /// Channel `c` as `f64` parameters.
    pub fn channel<T: Real>(&self, store: &ParamStore<T>, c: usize) -> DplrParams {
        let x: Vec<&Tensor<T>> = self.ids[..KERNEL_INPUTS].iter().map(|&id| store.get(id)).collect();
        channel_from(&x, c)
    }

    pub fn channel_d<T: Real>(&self, store: &ParamStore<T>, c: usize) -> f64 {
        store.get(self.d_id()).data()[c].as_f64()
    }

    /// `[H, len]` convolution kernel at the current parameters.
    pub fn kernel<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, len: usize) -> Result<G::Node> {
        let inputs: Vec<G::Node> = self.ids[..KERNEL_INPUTS].iter().map(|&id| g.param(store, id)).collect();
        let refs: Vec<&G::Node> = inputs.iter().collect();
        let op = S4KernelOp {
            len,
            traces: RefCell::new(Vec::new()),
        };
        g.custom(Box::new(op), &refs)
    }

    /// State space part only: `[L, H]` in, `K̄ * u + D u` out (pre-GLU).
    pub fn forward_ssm<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, u: &G::Node) -> Result<G::Node> {
        let (len, h) = g.value(u).dims2("s4")?;
        if h != self.hidden {
            return Err(Error::DimensionMismatch {
                expected: self.hidden,
                got: h,
            });
        }
        let k = self.kernel(g, store, len)?;
        self.forward_ssm_with_kernel(g, store, u, &k)
    }

    /// [`S4Layer::forward_ssm`] with a precomputed kernel of length at least
    /// `L`, so sequences of one batch can share a single kernel.
    pub fn forward_ssm_with_kernel<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        u: &G::Node,
        kernel: &G::Node,
    ) -> Result<G::Node> {
        let conv = g.causal_conv(kernel, u)?;
        let d = g.param(store, self.d_id());
        let skip = g.mul_row(u, &d)?;
        g.add(&conv, &skip)
    }

    /// Full layer on `[L, H]` input: state space, linear, GLU → `[L, H_out]`.
    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, u: &G::Node) -> Result<G::Node> {
        let y = self.forward_ssm(g, store, u)?;
        self.output_stage(g, store, &y)
    }

    /// Full layer using a shared kernel (see [`S4Layer::forward_ssm_with_kernel`]).
    pub fn forward_with_kernel<T: Real, G: Graph<T>>(
        &self,
        g: &mut G,
        store: &ParamStore<T>,
        u: &G::Node,
        kernel: &G::Node,
    ) -> Result<G::Node> {
        let (_, h) = g.value(u).dims2("s4")?;
        if h != self.hidden {
            return Err(Error::DimensionMismatch {
                expected: self.hidden,
                got: h,
            });
        }
        let y = self.forward_ssm_with_kernel(g, store, u, kernel)?;
        self.output_stage(g, store, &y)
    }

    fn output_stage<T: Real, G: Graph<T>>(&self, g: &mut G, store: &ParamStore<T>, y: &G::Node) -> Result<G::Node> {
        let w = g.param(store, self.out_linear_id());
        let b = g.param(store, self.out_bias_id());
        let z = g.matmul_nt(y, &w)?;
        let z = g.add_row(&z, &b)?;
        g.glu(&z)
    }

    /// Discretizes every channel once for a decoding session.
    pub fn prepare<T: Real>(&self, store: &ParamStore<T>) -> Result<S4Stepper<T>> {
        let n = self.state;
        let mut a_bar = Vec::with_capacity(self.hidden * n * n);
        let mut b_bar = Vec::with_capacity(self.hidden * n);
        let mut c = Vec::with_capacity(self.hidden * n);
        let mut d = Vec::with_capacity(self.hidden);
        for ch in 0..self.hidden {
            let params = self.channel(store, ch);
            let dense = dplr_to_dense(&params, self.channel_d(store, ch));
            let disc = ssm::discretize_bilinear(&dense, params.delta())?;
            let cast = |z: &Complex64| Complex::new(T::of(z.re), T::of(z.im));
            a_bar.extend(disc.a_bar.as_slice().iter().map(cast));
            b_bar.extend(disc.b_bar.iter().map(cast));
            c.extend(disc.c_bar.iter().map(cast));
            d.push(T::of(disc.d_bar.re));
        }
        Ok(S4Stepper {
            hidden: self.hidden,
            state: n,
            out_dim: self.out_dim,
            a_bar,
            b_bar,
            c,
            d,
            out_linear: store.shared(self.out_linear_id()),
            out_bias: store.shared(self.out_bias_id()),
        })
    }
}

/// Per-channel recurrent states, `H × N` complex.
#[derive(Clone, Debug, PartialEq)]
pub struct S4State<T> {
    x: Vec<Complex<T>>,
    hidden: usize,
    state: usize,
}

impl<T: Real> S4State<T> {
    pub fn zeros(hidden: usize, state: usize) -> Self {
        Self {
            x: vec![Complex::new(T::zero(), T::zero()); hidden * state],
            hidden,
            state,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.hidden, self.state)
    }

    pub fn channel(&self, c: usize) -> &[Complex<T>] {
        &self.x[c * self.state..(c + 1) * self.state]
    }

    pub fn is_zero(&self) -> bool {
        self.x.iter().all(|z| z.re == T::zero() && z.im == T::zero())
    }
}

/// Discretized layer ready for step-by-step inference.
#[derive(Clone, Debug)]
pub struct S4Stepper<T> {
    hidden: usize,
    state: usize,
    out_dim: usize,
    a_bar: Vec<Complex<T>>,
    b_bar: Vec<Complex<T>>,
    c: Vec<Complex<T>>,
    d: Vec<T>,
    out_linear: Arc<Tensor<T>>,
    out_bias: Arc<Tensor<T>>,
}

impl<T: Real> S4Stepper<T> {
    pub fn zero_state(&self) -> S4State<T> {
        S4State::zeros(self.hidden, self.state)
    }

    fn check(&self, state: &S4State<T>, u: &[T]) -> Result<()> {
        if state.shape() != (self.hidden, self.state) {
            return Err(Error::DimensionMismatch {
                expected: self.hidden * self.state,
                got: state.hidden * state.state,
            });
        }
        if u.len() != self.hidden {
            return Err(Error::DimensionMismatch {
                expected: self.hidden,
                got: u.len(),
            });
        }
        Ok(())
    }

    /// One recurrence step of every channel, pre-GLU output.
    pub fn step_ssm(&self, state: &mut S4State<T>, u: &[T]) -> Result<Vec<T>> {
        self.check(state, u)?;
        let n = self.state;
        let mut next = vec![Complex::new(T::zero(), T::zero()); n];
        let mut y = Vec::with_capacity(self.hidden);
        for ch in 0..self.hidden {
            let a = &self.a_bar[ch * n * n..(ch + 1) * n * n];
            let x = &mut state.x[ch * n..(ch + 1) * n];
            for i in 0..n {
                let mut s = self.b_bar[ch * n + i] * u[ch];
                for (aij, xj) in a[i * n..(i + 1) * n].iter().zip(x.iter()) {
                    s = s + aij * xj;
                }
                next[i] = s;
            }
            x.copy_from_slice(&next);
            let mut out = T::zero();
            for (cj, xj) in self.c[ch * n..(ch + 1) * n].iter().zip(x.iter()) {
                out += cj.re * xj.re - cj.im * xj.im;
            }
            y.push(out + self.d[ch] * u[ch]);
        }
        Ok(y)
    }

    /// One full step: state space, linear and GLU.
    pub fn step(&self, state: &mut S4State<T>, u: &[T]) -> Result<Vec<T>> {
        let y = self.step_ssm(state, u)?;
        let yt = Tensor::new(&[1, self.hidden], y)?;
        let z = tensor::add_row(&tensor::matmul_nt(&yt, &self.out_linear)?, &self.out_bias)?;
        let (a, b) = z.data().split_at(self.out_dim);
        glu(a, b)
    }
}

/// `a ⊙ sigmoid(b)`.
pub fn glu<T: Real>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * sigmoid(y)).collect())
}

/// Convolutional forward of a standalone layer over `U` in `[H, L]`
/// layout, returning `[H_out, L]`.
pub fn s4_forward_conv<T: Real>(layer: &S4Layer, store: &ParamStore<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, _) = u.dims2("s4_forward_conv")?;
    if h != layer.hidden {
        return Err(Error::DimensionMismatch {
            expected: layer.hidden,
            got: h,
        });
    }
    let mut g = crate::autodiff::Eager;
    let x = Graph::<T>::constant(&mut g, u.transpose()?);
    let y = layer.forward(&mut g, store, &x)?;
    y.transpose()
}

/// One recurrent step of a standalone layer.
pub fn s4_forward_step<T: Real>(stepper: &S4Stepper<T>, state: &mut S4State<T>, u_t: &[T]) -> Result<Vec<T>> {
    stepper.step(state, u_t)
}

/// Discretized dense system of channel `c`, feedthrough included.
pub fn channel_discrete<T: Real>(layer: &S4Layer, store: &ParamStore<T>, c: usize) -> Result<DiscreteSsm> {
    let p = layer.channel(store, c);
    ssm::discretize_bilinear(&dplr_to_dense(&p, layer.channel_d(store, c)), p.delta())
}

//! Dense single-input single-output linear state space systems.
//!
//! The continuous system is `x'(t) = A x(t) + B u(t)`, `y(t) = C x(t) + D u(t)`
//! with complex `A` (N×N), `B` (N×1), `C` (1×N) and scalar `D`. Bilinear
//! discretization with step `Δ` gives
//!
//! ```text
//! Ā = (I − Δ/2·A)⁻¹ (I + Δ/2·A)
//! B̄ = (I − Δ/2·A)⁻¹ Δ B
//! C̄ = C,  D̄ = D
//! ```
//!
//! and the discrete system can be run either as a recurrence
//! `x_k = Ā x_{k−1} + B̄ u_k`, `y_k = Re(C̄ x_k + D̄ u_k)` from `x_{−1} = 0`,
//! or as a causal convolution with the kernel `K̄_k = Re(C̄ Āᵏ B̄)` plus the
//! feedthrough. Outputs are projected to the real part at the `C̄` output
//! only; the state stays complex.
//!
//! This is the unstructured reference every structured path is checked
//! against, so it stays in `f64` and favors clarity over speed.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::fft;
use crate::linalg::{CMat, Lu};

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    pub a: CMat,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub d: Complex64,
}

impl ContinuousSsm {
    pub fn new(a: CMat, b: Vec<Complex64>, c: Vec<Complex64>, d: Complex64) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.cols(),
            });
        }
        for len in [b.len(), c.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self { a, b, c, d })
    }

    /// Real-valued convenience constructor.
    pub fn from_real(a: &[f64], b: &[f64], c: &[f64], d: f64) -> Result<Self> {
        let n = b.len();
        let a = CMat::from_rows(n, n, a.iter().map(|&x| Complex64::new(x, 0.0)).collect())?;
        Self::new(
            a,
            b.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            c.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            Complex64::new(d, 0.0),
        )
    }

    pub fn state_size(&self) -> usize {
        self.b.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: CMat,
    pub b_bar: Vec<Complex64>,
    pub c_bar: Vec<Complex64>,
    pub d_bar: Complex64,
    pub delta: f64,
}

impl DiscreteSsm {
    pub fn state_size(&self) -> usize {
        self.b_bar.len()
    }

    /// One recurrence step; returns `(x_k, y_k)`.
    pub fn step(&self, x_prev: &[Complex64], u: f64) -> Result<(Vec<Complex64>, f64)> {
        let n = self.state_size();
        if x_prev.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x_prev.len(),
            });
        }
        let mut x = self.a_bar.matvec(x_prev);
        for (xi, bi) in x.iter_mut().zip(&self.b_bar) {
            *xi += bi * u;
        }
        let y = self.readout(&x, u);
        Ok((x, y))
    }

    #[inline]
    fn readout(&self, x: &[Complex64], u: f64) -> f64 {
        let cx = self
            .c_bar
            .iter()
            .zip(x)
            .fold(Complex64::zero(), |acc, (c, x)| acc + c * x);
        (cx + self.d_bar * u).re
    }

    /// Runs the recurrence over `u` from the zero state.
    pub fn run_recurrent(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = self.state_size();
        let mut x = vec![Complex64::zero(); n];
        let mut next = vec![Complex64::zero(); n];
        let mut y = Vec::with_capacity(u.len());
        for &uk in u {
            self.a_bar.matvec_into(&x, &mut next);
            for (xi, bi) in next.iter_mut().zip(&self.b_bar) {
                *xi += bi * uk;
            }
            core::mem::swap(&mut x, &mut next);
            y.push(self.readout(&x, uk));
        }
        Ok(y)
    }

    /// `K̄_k = Re(C̄ Āᵏ B̄)` for `k < len`, by repeated action `v ← Ā v`.
    pub fn materialize_kernel(&self, len: usize) -> Vec<f64> {
        let mut v = self.b_bar.clone();
        let mut next = vec![Complex64::zero(); v.len()];
        let mut k = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                self.a_bar.matvec_into(&v, &mut next);
                core::mem::swap(&mut v, &mut next);
            }
            let s = self
                .c_bar
                .iter()
                .zip(&v)
                .fold(Complex64::zero(), |acc, (c, x)| acc + c * x);
            k.push(s.re);
        }
        k
    }
}

/// Bilinear (Tustin) discretization with step `delta`.
pub fn discretize_bilinear(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    if !(delta > 0.0) {
        return Err(Error::NonPositiveDelta(delta));
    }
    let n = ssm.state_size();
    let half = Complex64::new(delta / 2.0, 0.0);
    let eye = CMat::identity(n);
    let scaled = ssm.a.scale(half);
    let backward = eye.sub(&scaled);
    let forward = eye.add(&scaled);
    let lu = Lu::factor(&backward)?;
    let a_bar = lu.solve_mat(&forward);
    let db: Vec<Complex64> = ssm.b.iter().map(|b| b * delta).collect();
    let b_bar = lu.solve_vec(&db);
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c_bar: ssm.c.clone(),
        d_bar: ssm.d,
        delta,
    })
}

pub fn step(dssm: &DiscreteSsm, x_prev: &[Complex64], u: f64) -> Result<(Vec<Complex64>, f64)> {
    dssm.step(x_prev, u)
}

pub fn run_recurrent(dssm: &DiscreteSsm, u: &[f64]) -> Result<Vec<f64>> {
    dssm.run_recurrent(u)
}

pub fn materialize_kernel(dssm: &DiscreteSsm, len: usize) -> Vec<f64> {
    dssm.materialize_kernel(len)
}

/// Direct O(L²) causal convolution: `y_k = Σ_{j≤k} K_j u_{k−j} + D u_k`.
pub fn causal_convolve(kernel: &[f64], d_bar: f64, u: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != u.len() {
        return Err(Error::LengthMismatch(kernel.len(), u.len()));
    }
    Ok((0..u.len())
        .map(|k| {
            let conv: f64 = (0..=k).map(|j| kernel[j] * u[k - j]).sum();
            conv + d_bar * u[k]
        })
        .collect())
}

/// Same contract as [`causal_convolve`], through a zero-padded FFT of
/// length ≥ 2L−1.
pub fn causal_convolve_fft(kernel: &[f64], d_bar: f64, u: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != u.len() {
        return Err(Error::LengthMismatch(kernel.len(), u.len()));
    }
    let mut y = fft::convolve_real(kernel, u, u.len());
    for (yk, uk) in y.iter_mut().zip(u) {
        *yk += d_bar * uk;
    }
    Ok(y)
}

//! Iterative radix-2 FFT, enough for zero-padded linear convolution.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

/// In-place transform; `buf.len()` must be a power of two. The inverse
/// includes the `1/n` normalization.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n == 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        // twiddles computed directly per index to avoid drift from repeated products
        let tw: Vec<Complex64> = (0..half).map(|k| Complex64::from_polar(1.0, ang * k as f64)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * tw[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

/// Full linear convolution of two real sequences, truncated to the first
/// `out_len` samples.
pub fn convolve_real(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![0.0; out_len];
    }
    let full = a.len() + b.len() - 1;
    let n = full.next_power_of_two();
    let mut fa = vec![Complex64::new(0.0, 0.0); n];
    let mut fb = fa.clone();
    for (d, &x) in fa.iter_mut().zip(a) {
        d.re = x;
    }
    for (d, &x) in fb.iter_mut().zip(b) {
        d.re = x;
    }
    fft_in_place(&mut fa, false);
    fft_in_place(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_in_place(&mut fa, true);
    (0..out_len).map(|i| if i < full { fa[i].re } else { 0.0 }).collect()
}

//! Dense row-major tensors and the forward kernels shared by eager
//! execution and the tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::{sigmoid, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn2(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {:?}", s))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Self::from_fn2(c, r, |i, j| self.data[j * c + i]))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// `self += other`, shapes must match.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn zip_with<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

fn row_vector<T: Real>(op: &'static str, a: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    let (r, c) = a.dims2(op)?;
    if v.numel() != c {
        return Err(Error::shape(
            op,
            format!("row vector of {} for {} columns", v.numel(), c),
        ));
    }
    Ok((r, c))
}

/// Broadcast `a[i, j] + v[j]`.
pub fn add_row<T: Real>(a: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = row_vector("add_row", a, v)?;
    let mut out = a.clone();
    for row in out.data.chunks_mut(c) {
        for (x, b) in row.iter_mut().zip(&v.data) {
            *x += *b;
        }
    }
    Ok(out)
}

/// Broadcast `a[i, j] * v[j]`.
pub fn mul_row<T: Real>(a: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = row_vector("mul_row", a, v)?;
    let mut out = a.clone();
    for row in out.data.chunks_mut(c) {
        for (x, b) in row.iter_mut().zip(&v.data) {
            *x *= *b;
        }
    }
    Ok(out)
}

/// `out[m, n] += a[m, k] · b[k, n]` on raw slices.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] · b[n, k]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Eight independent partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(&x, &y)| x * y)
        .fold(T::zero(), |s, v| s + v);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    s + tail
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(&a.data, &b.data, &mut out.data, m, k, n);
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]ᵀ")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nt(&a.data, &b.data, &mut out.data, m, k, n);
    Ok(out)
}

pub fn sigmoid_t<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(sigmoid)
}

pub fn relu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Row-wise softmax. `mask[i·n + j] == false` removes key `j` for query `i`;
/// masked entries come out exactly zero.
pub fn softmax_rows<T: Real>(a: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("softmax")?;
    if let Some(mk) = mask {
        if mk.len() != m * n {
            return Err(Error::shape("softmax", format!("mask of {} for [{m}, {n}]", mk.len())));
        }
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let keep = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
        let row = &a.data[i * n..(i + 1) * n];
        if !(0..n).any(keep) {
            return Err(Error::AllMaskedRow(i));
        }
        // A non-finite row yields NaN outputs rather than an error.
        let mut mx = T::neg_infinity();
        for (j, &x) in row.iter().enumerate() {
            if keep(j) && (x > mx || x.is_nan()) {
                mx = x;
            }
        }
        let orow = &mut out.data[i * n..(i + 1) * n];
        let mut s = T::zero();
        for (j, (o, &x)) in orow.iter_mut().zip(row).enumerate() {
            if keep(j) {
                *o = (x - mx).exp();
                s += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    Ok(out)
}

/// Per-row mean and reciprocal standard deviation.
pub(crate) fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub fn layer_norm<T: Real>(a: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, c) = row_vector("layer_norm", a, gamma)?;
    row_vector("layer_norm", a, beta)?;
    let mut out = a.clone();
    for row in out.data.chunks_mut(c) {
        let (mean, rstd) = row_stats(row, eps);
        for ((x, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *x = (*x - mean) * rstd * g + b;
        }
    }
    Ok(out)
}

pub fn gather_rows<T: Real>(table: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (v, d) = table.dims2("gather_rows")?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= v {
            return Err(Error::shape("gather_rows", format!("index {i} out of {v} rows")));
        }
        data.extend_from_slice(&table.data[i * d..(i + 1) * d]);
    }
    Ok(Tensor {
        shape: vec![idx.len(), d],
        data,
    })
}

pub fn slice_cols<T: Real>(a: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("slice_cols")?;
    if start > end || end > c {
        return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
    }
    let w = end - start;
    let mut data = Vec::with_capacity(r * w);
    for i in 0..r {
        data.extend_from_slice(&a.data[i * c + start..i * c + end]);
    }
    Ok(Tensor {
        shape: vec![r, w],
        data,
    })
}

pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let r = parts.first().map(|p| p.rows()).unwrap_or(0);
    let mut total = 0;
    for p in parts {
        let (pr, pc) = p.dims2("concat_cols")?;
        if pr != r {
            return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
        }
        total += pc;
    }
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor {
        shape: vec![r, total],
        data,
    })
}

/// Stacks matrices with equal column counts vertically.
pub fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let c = parts.first().map(|p| p.cols()).unwrap_or(0);
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pr, pc) = p.dims2("concat_rows")?;
        if pc != c {
            return Err(Error::shape("concat_rows", format!("column counts {c} vs {pc}")));
        }
        rows += pr;
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![rows, c],
        data,
    })
}

/// Gated linear unit over a `[m, 2n]` input: left half times sigmoid of
/// the right half.
pub fn glu_rows<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, c) = a.dims2("glu")?;
    if c % 2 != 0 {
        return Err(Error::shape("glu", format!("odd width {c}")));
    }
    let h = c / 2;
    Ok(Tensor::from_fn2(m, h, |i, j| {
        a.data[i * c + j] * sigmoid(a.data[i * c + h + j])
    }))
}

/// Per-channel causal convolution: `kernel` is `[H, K]` with `K ≥ L`, `u`
/// is `[L, H]`; `y[t, h] = Σ_{j≤t} kernel[h, j] · u[t − j, h]`.
pub fn causal_conv<T: Real>(kernel: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, klen) = kernel.dims2("causal_conv")?;
    let (l, h2) = u.dims2("causal_conv")?;
    if h != h2 || klen < l {
        return Err(Error::shape(
            "causal_conv",
            format!("kernel [{h}, {klen}] for input [{l}, {h2}]"),
        ));
    }
    let mut out = Tensor::zeros(&[l, h]);
    for t in 0..l {
        let orow = &mut out.data[t * h..(t + 1) * h];
        for j in 0..=t {
            let urow = &u.data[(t - j) * h..(t - j + 1) * h];
            for (c, (o, &x)) in orow.iter_mut().zip(urow).enumerate() {
                *o += kernel.data[c * klen + j] * x;
            }
        }
    }
    Ok(out)
}

/// Complex product of interleaved `[..., 2]` real/imaginary tensors.
pub fn cmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("cmul", a, b)?;
    if a.shape.last() != Some(&2) {
        return Err(Error::shape(
            "cmul",
            format!("trailing dim must be 2, got {:?}", a.shape),
        ));
    }
    let mut out = a.clone();
    for (o, (x, y)) in out.data.chunks_mut(2).zip(a.data.chunks(2).zip(b.data.chunks(2))) {
        o[0] = x[0] * y[0] - x[1] * y[1];
        o[1] = x[0] * y[1] + x[1] * y[0];
    }
    Ok(out)
}

/// Log-softmax of a single row.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
    row.iter().map(|&x| x - lse).collect()
}

/// Summed cross-entropy of `[m, C]` logits against class indices.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let (m, c) = logits.dims2("cross_entropy")?;
    if targets.len() != m {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {m} rows", targets.len()),
        ));
    }
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::shape("cross_entropy", format!("class {t} of {c}")));
        }
        total -= log_softmax(logits.row(i))[t];
    }
    Ok(Tensor::scalar(total))
}

/// Mean absolute error.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("l1_loss", pred, target)?;
    let n = T::of(pred.numel().max(1) as f64);
    let s: T = pred.data.iter().zip(&target.data).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(Tensor::scalar(s / n))
}

pub fn sum<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(a.data.iter().copied().sum())
}

pub fn mean<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let n = T::of(a.numel().max(1) as f64);
    Tensor::scalar(a.data.iter().copied().sum::<T>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_identity_is_input() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = Tensor::from_fn2(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        assert!(matmul(&eye, &a).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_is_exact_zero() {
        let a = t(&[2, 3], &[0.5, -2.0, 3.0, 1.0, 1.0, 100.0]);
        let mask = [true, true, true, true, true, false];
        let s = softmax_rows(&a, Some(&mask)).unwrap();
        for i in 0..2 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.at(1, 2), 0.0);
        assert_eq!(s.at(1, 0), 0.5);
        let err = softmax_rows(&a, Some(&[true, false, false, false, false, false]));
        assert_eq!(err, Err(Error::AllMaskedRow(1)));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let a = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&a, &g, &b, 0.0).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causal_conv_is_causal() {
        let k = t(&[1, 3], &[1.0, 0.5, 0.25]);
        let u = t(&[3, 1], &[2.0, 0.0, 0.0]);
        assert_eq!(causal_conv(&k, &u).unwrap().data(), &[2.0, 1.0, 0.5]);
        assert!(causal_conv(&k, &t(&[4, 1], &[0.0; 4])).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let l = Tensor::<f64>::zeros(&[2, 4]);
        let ce = cross_entropy(&l, &[0, 3]).unwrap();
        assert!((ce.item() - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cmul_matches_complex_product() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2], &[3.0, -1.0]);
        assert_eq!(cmul(&a, &b).unwrap().data(), &[5.0, 5.0]);
    }
}

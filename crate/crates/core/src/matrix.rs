use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::uniform_sample;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// A T×C sequence of context tokens, one token per row.
pub type TokenMatrix<T> = Matrix<T>;

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(
                "matrix",
                format!("{} values for {rows}×{cols}", data.len()),
            );
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(uniform_sample(rng, bound)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return shape_err(
                "matrix add",
                format!("{}×{} vs {}×{}", self.rows, self.cols, other.rows, other.cols),
            );
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return shape_err(
                "matrix add_assign",
                format!("{}×{} vs {}×{}", self.rows, self.cols, other.rows, other.cols),
            );
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b`. Every entry accumulates over the inner index in ascending order
/// starting from zero.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return shape_err(
            "matmul",
            format!("{}×{} · {}×{}", a.rows, a.cols, b.rows, b.cols),
        );
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            for (d, &bv) in dst.iter_mut().zip(b.row(k)) {
                *d += av * bv;
            }
        }
    }
    Ok(out)
}

/// Affine token map `y = x·W + b` with `W` stored as in × out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Matrix::zeros(in_features, out_features),
            bias: vec![T::zero(); out_features],
        }
    }

    /// Uniform in ±1/sqrt(in_features).
    pub fn uniform<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = Matrix::uniform(in_features, out_features, bound, rng);
        let bias = (0..out_features)
            .map(|_| T::from_f64(uniform_sample(rng, bound)))
            .collect();
        Self { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_features(), self.out_features())
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        vec![
            ("weight".into(), self.weight.data()),
            ("bias".into(), &self.bias[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("weight".into(), self.weight.data_mut()),
            ("bias".into(), &mut self.bias[..]),
        ]
    }
}

pub fn linear<T: Scalar>(x: &Matrix<T>, layer: &Linear<T>) -> Result<Matrix<T>> {
    if layer.bias.len() != layer.out_features() {
        return shape_err("linear", "bias length differs from output width");
    }
    let mut out = matmul(x, &layer.weight).map_err(|_| crate::Error::Shape {
        op: "linear",
        detail: format!(
            "token width {} vs layer input {}",
            x.cols,
            layer.in_features()
        ),
    })?;
    for r in 0..out.rows {
        for (v, &b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Returns the input gradient and accumulates parameter gradients into `grads`.
pub fn linear_backward<T: Scalar>(
    x: &Matrix<T>,
    layer: &Linear<T>,
    upstream: &Matrix<T>,
    grads: &mut Linear<T>,
) -> Result<Matrix<T>> {
    if upstream.rows != x.rows || upstream.cols != layer.out_features() {
        return shape_err(
            "linear_backward",
            format!(
                "upstream {}×{} for {} tokens → {}",
                upstream.rows,
                upstream.cols,
                x.rows,
                layer.out_features()
            ),
        );
    }
    grads.weight.add_assign(&matmul(&x.transpose(), upstream)?)?;
    for r in 0..upstream.rows {
        for (b, &g) in grads.bias.iter_mut().zip(upstream.row(r)) {
            *b += g;
        }
    }
    matmul(upstream, &layer.weight.transpose())
}

/// Per-token layer normalization with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize, eps: f64) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            eps,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: vec![T::zero(); self.gamma.len()],
            beta: vec![T::zero(); self.beta.len()],
            eps: self.eps,
        }
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        vec![
            ("gamma".into(), &self.gamma[..]),
            ("beta".into(), &self.beta[..]),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            ("gamma".into(), &mut self.gamma[..]),
            ("beta".into(), &mut self.beta[..]),
        ]
    }
}

/// Saved statistics for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &Matrix<T>, ln: &LayerNorm<T>) -> Result<Matrix<T>> {
    layer_norm_cached(x, ln).map(|(y, _)| y)
}

pub fn layer_norm_cached<T: Scalar>(
    x: &Matrix<T>,
    ln: &LayerNorm<T>,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let c = x.cols;
    if ln.gamma.len() != c || ln.beta.len() != c {
        return shape_err(
            "layer_norm",
            format!("token width {c} vs affine width {}", ln.gamma.len()),
        );
    }
    if ln.eps.is_nan() || ln.eps <= 0.0 {
        return Err(crate::Error::Config("layer_norm eps must be positive".into()));
    }
    let eps = T::from_f64(ln.eps);
    let width = T::from_f64(c as f64);
    let mut y = Matrix::zeros(x.rows, c);
    let mut normalized = Matrix::zeros(x.rows, c);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / width;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / width;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for i in 0..c {
            let xh = (row[i] - mean) * inv;
            *normalized.at_mut(r, i) = xh;
            *y.at_mut(r, i) = xh * ln.gamma[i] + ln.beta[i];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

pub fn layer_norm_backward<T: Scalar>(
    ln: &LayerNorm<T>,
    cache: &LayerNormCache<T>,
    upstream: &Matrix<T>,
    grads: &mut LayerNorm<T>,
) -> Result<Matrix<T>> {
    let xh = &cache.normalized;
    if (upstream.rows, upstream.cols) != (xh.rows, xh.cols) {
        return shape_err("layer_norm_backward", "upstream does not match forward output");
    }
    let c = xh.cols;
    let width = T::from_f64(c as f64);
    let mut dx = Matrix::zeros(xh.rows, c);
    for r in 0..xh.rows {
        let g = upstream.row(r);
        let xr = xh.row(r);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..c {
            grads.gamma[i] += g[i] * xr[i];
            grads.beta[i] += g[i];
            let d = g[i] * ln.gamma[i];
            mean_d += d;
            mean_dx += d * xr[i];
        }
        mean_d /= width;
        mean_dx /= width;
        let inv = cache.inv_std[r];
        for i in 0..c {
            let d = g[i] * ln.gamma[i];
            *dx.at_mut(r, i) = inv * (d - mean_d - xr[i] * mean_dx);
        }
    }
    Ok(dx)
}

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::{DType, Scalar};

/// Extents of a rank-4 feature map: (batch, channel, height, width).
pub type Dims = [usize; 4];

/// Dense rank-4 feature map stored row-major in (batch, channel, height, width) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

/// A location on a feature map. `x` indexes columns (width), `y` rows (height).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub x: usize,
    pub y: usize,
}

impl Position {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn chebyshev(self, other: Position) -> usize {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }
}

impl std::fmt::Display for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(dims) {
            return shape_err(
                "tensor",
                format!("{} values for dims {:?}", data.len(), dims),
            );
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; numel(dims)],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [b, c, h, w] = dims;
        let mut data = Vec::with_capacity(numel(dims));
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(n, ch, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Values drawn uniformly from `[-bound, bound)`. Samples are drawn in
    /// 64-bit and rounded, so f32 and f64 tensors from the same seed agree.
    pub fn uniform<R: Rng + ?Sized>(dims: Dims, bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(dims))
            .map(|_| T::from_f64(uniform_sample(rng, bound)))
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, ch, h, w] = self.dims;
        ((n * ch + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.offset(n, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous H×W plane for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return shape_err(op, format!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return shape_err("add_assign", format!("{:?} vs {:?}", self.dims, other.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn uniform_sample<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..bound)
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of `sigmoid` given its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_with(upstream, "sigmoid_backward", |s, g| g * s * (T::one() - s))
}

/// Per-pixel softmax across the channel axis.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims();
    if c == 0 {
        return shape_err("softmax_channels", "channel extent is zero");
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.dims());
    for n in 0..b {
        let base = n * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(x.data[base + ch * hw + p]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (x.data[base + ch * hw + p] - max).exp();
                out.data[base + ch * hw + p] = e;
                total += e;
            }
            for ch in 0..c {
                out.data[base + ch * hw + p] /= total;
            }
        }
    }
    Ok(out)
}

/// Gradient of `softmax_channels` given its output `y`.
pub fn softmax_channels_backward<T: Scalar>(
    y: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if y.dims() != upstream.dims() {
        return shape_err(
            "softmax_channels_backward",
            format!("{:?} vs {:?}", y.dims(), upstream.dims()),
        );
    }
    let [b, c, h, w] = y.dims();
    let hw = h * w;
    let mut out = Tensor::zeros(y.dims());
    for n in 0..b {
        let base = n * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dot += y.data[i] * upstream.data[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                out.data[i] = y.data[i] * (upstream.data[i] - dot);
            }
        }
    }
    Ok(out)
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = xs.first() else {
        return shape_err("concat_channels", "no tensors given");
    };
    let [b, _, h, w] = first.dims();
    for t in xs {
        let [tb, _, th, tw] = t.dims();
        if (tb, th, tw) != (b, h, w) {
            return shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", first.dims(), t.dims()),
            );
        }
    }
    let c_total: usize = xs.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(b * c_total * h * w);
    for n in 0..b {
        for t in xs {
            let block = t.channels() * h * w;
            data.extend_from_slice(&t.data[n * block..(n + 1) * block]);
        }
    }
    Tensor::new([b, c_total, h, w], data)
}

/// Splits the channel axis into `k` equal groups, in order.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    let [b, c, h, w] = x.dims();
    if k == 0 || c % k != 0 {
        return shape_err(
            "split_channels",
            format!("{c} channels cannot be split into {k} groups"),
        );
    }
    let group = c / k;
    let block = group * h * w;
    Ok((0..k)
        .map(|g| {
            let mut data = Vec::with_capacity(b * block);
            for n in 0..b {
                let start = n * c * h * w + g * block;
                data.extend_from_slice(&x.data[start..start + block]);
            }
            Tensor {
                dims: [b, group, h, w],
                data,
            }
        })
        .collect())
}

/// Multiplies every channel of `x` by the single-channel map `weight`.
pub fn mul_channel_broadcast<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims();
    if weight.dims() != [b, 1, h, w] {
        return shape_err(
            "mul_channel_broadcast",
            format!("weight {:?} for input {:?}", weight.dims(), x.dims()),
        );
    }
    let hw = h * w;
    let mut out = x.clone();
    for n in 0..b {
        let wp = &weight.data[n * hw..(n + 1) * hw];
        for ch in 0..c {
            let start = (n * c + ch) * hw;
            for (v, &s) in out.data[start..start + hw].iter_mut().zip(wp) {
                *v *= s;
            }
        }
    }
    Ok(out)
}

/// Per-(batch, channel) global maximum and its location.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool<T> {
    pub batch: usize,
    pub channels: usize,
    pub scores: Vec<T>,
    pub positions: Vec<Position>,
}

impl<T: Scalar> MaxPool<T> {
    pub fn score(&self, n: usize, c: usize) -> T {
        self.scores[n * self.channels + c]
    }

    pub fn position(&self, n: usize, c: usize) -> Position {
        self.positions[n * self.channels + c]
    }
}

/// Global max pooling that also reports the argmax. Ties resolve to the
/// smallest row-major index.
pub fn global_max_pool_argmax<T: Scalar>(x: &Tensor<T>) -> Result<MaxPool<T>> {
    let [b, c, h, w] = x.dims();
    if h == 0 || w == 0 {
        return shape_err("global_max_pool_argmax", "empty spatial extent");
    }
    let mut scores = Vec::with_capacity(b * c);
    let mut positions = Vec::with_capacity(b * c);
    for n in 0..b {
        for ch in 0..c {
            let plane = x.plane(n, ch);
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > plane[best] {
                    best = i;
                }
            }
            scores.push(plane[best]);
            positions.push(Position::new(best % w, best / w));
        }
    }
    Ok(MaxPool {
        batch: b,
        channels: c,
        scores,
        positions,
    })
}

/// Routes each score gradient to its argmax location; every other entry is zero.
pub fn global_max_pool_backward<T: Scalar>(
    dims: Dims,
    pool: &MaxPool<T>,
    grad_scores: &[T],
) -> Result<Tensor<T>> {
    let [b, c, _, _] = dims;
    if pool.batch != b || pool.channels != c || grad_scores.len() != b * c {
        return shape_err(
            "global_max_pool_backward",
            format!("{} score gradients for dims {:?}", grad_scores.len(), dims),
        );
    }
    let mut out = Tensor::zeros(dims);
    for n in 0..b {
        for ch in 0..c {
            let p = pool.position(n, ch);
            *out.at_mut(n, ch, p.y, p.x) += grad_scores[n * c + ch];
        }
    }
    Ok(out)
}

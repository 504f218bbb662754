use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

/// A 2-D convolution layer: hyperparameters plus its weights
/// (out × in × kh × kw) and bias (out).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvSpec<T> {
    /// Zero-initialized layer with a square kernel.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            dilation,
            weight: Tensor::zeros([out_channels, in_channels, kernel, kernel]),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    /// Uniform in ±1/sqrt(fan_in) for weights and bias.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        self.weight = Tensor::uniform(self.weight.dims(), bound, rng);
        let bias = Tensor::<T>::uniform([1, 1, 1, self.out_channels], bound, rng);
        self.bias = bias.into_data();
    }

    pub fn with_uniform<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        self.init_uniform(rng);
        self
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 || self.dilation == 0 || kh == 0 || kw == 0 {
            return shape_err(
                "conv2d",
                "kernel, stride and dilation must be positive",
            );
        }
        if self.weight.dims() != [self.out_channels, self.in_channels, kh, kw]
            || self.bias.len() != self.out_channels
        {
            return shape_err(
                "conv2d",
                format!(
                    "parameter tensors {:?}/{} do not match {}→{} {}×{}",
                    self.weight.dims(),
                    self.bias.len(),
                    self.in_channels,
                    self.out_channels,
                    kh,
                    kw
                ),
            );
        }
        Ok(())
    }

    /// Output spatial extents for an `h × w` input:
    /// `floor((H + 2·pad − dilation·(k−1) − 1)/stride) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |size: usize, k: usize| -> Option<usize> {
            let padded = size + 2 * self.padding;
            let span = self.dilation * (k - 1) + 1;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        match (extent(h, self.kernel.0), extent(w, self.kernel.1)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => shape_err(
                "conv2d",
                format!(
                    "zero-sized output for {h}×{w} input (kernel {:?}, pad {}, dilation {}, stride {})",
                    self.kernel, self.padding, self.dilation, self.stride
                ),
            ),
        }
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        self.validate()?;
        if input[1] != self.in_channels {
            return shape_err(
                "conv2d",
                format!(
                    "input has {} channels, layer expects {}",
                    input[1], self.in_channels
                ),
            );
        }
        let (oh, ow) = self.output_hw(input[2], input[3])?;
        Ok([input[0], self.out_channels, oh, ow])
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Multiply-accumulates for one forward pass over `input`.
    pub fn macs(&self, input: Dims) -> Result<usize> {
        let [b, _, oh, ow] = self.output_dims(input)?;
        Ok(b * oh * ow * self.out_channels * self.fan_in())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.dims()),
            bias: vec![T::zero(); self.out_channels],
            ..self.clone()
        }
    }
}

impl<T: Scalar> Parameters<T> for ConvSpec<T> {
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

/// Unrolls one batch element into a (in·kh·kw) × (oh·ow) column matrix.
/// Out-of-bounds taps read as zero.
fn im2col<T: Scalar>(x: &Tensor<T>, n: usize, spec: &ConvSpec<T>, oh: usize, ow: usize) -> Vec<T> {
    let [_, c, h, w] = x.dims();
    let (kh, kw) = spec.kernel;
    let cols_per_row = oh * ow;
    let mut cols = vec![T::zero(); c * kh * kw * cols_per_row];
    for ch in 0..c {
        let plane = x.plane(n, ch);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto an input-shaped gradient plane set.
fn col2im<T: Scalar>(
    cols: &[T],
    grad: &mut Tensor<T>,
    n: usize,
    spec: &ConvSpec<T>,
    oh: usize,
    ow: usize,
) {
    let [_, c, h, w] = grad.dims();
    let (kh, kw) = spec.kernel;
    let cols_per_row = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *grad.at_mut(n, ch, iy as usize, ix as usize) += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution via im2col and a row-major matrix product.
///
/// Each output accumulates taps in (in_channel, ky, kx) order starting from
/// zero and adds the bias last, the same order as [`conv2d_direct`], so the
/// two paths agree bit-for-bit.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let out_dims = spec.output_dims(x.dims())?;
    let [b, oc, oh, ow] = out_dims;
    let k = spec.fan_in();
    let p = oh * ow;
    let weights = spec.weight.data();
    let mut out = Tensor::zeros(out_dims);
    for n in 0..b {
        let cols = im2col(x, n, spec, oh, ow);
        let dst = &mut out.data_mut()[n * oc * p..(n + 1) * oc * p];
        for o in 0..oc {
            let acc = &mut dst[o * p..(o + 1) * p];
            let wrow = &weights[o * k..(o + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                let col = &cols[kk * p..(kk + 1) * p];
                for (a, &cv) in acc.iter_mut().zip(col) {
                    *a += wv * cv;
                }
            }
            let bias = spec.bias[o];
            for a in acc.iter_mut() {
                *a += bias;
            }
        }
    }
    Ok(out)
}

/// Reference convolution: a direct loop over the dilated receptive field.
pub fn conv2d_direct<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let out_dims = spec.output_dims(x.dims())?;
    let [b, oc, oh, ow] = out_dims;
    let [_, c, h, w] = x.dims();
    let (kh, kw) = spec.kernel;
    Ok(Tensor::from_fn(out_dims, |n, o, oy, ox| {
        debug_assert!(n < b && o < oc && oy < oh && ox < ow);
        let mut acc = T::zero();
        for ch in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        acc += spec.weight.at(o, ch, ky, kx) * x.at(n, ch, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc + spec.bias[o]
    }))
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let out_dims = spec.output_dims(x.dims())?;
    if upstream.dims() != out_dims {
        return shape_err(
            "conv2d_backward",
            format!(
                "upstream gradient {:?}, forward output {:?}",
                upstream.dims(),
                out_dims
            ),
        );
    }
    let [b, oc, oh, ow] = out_dims;
    let k = spec.fan_in();
    let p = oh * ow;
    let weights = spec.weight.data();
    let mut grad_input = Tensor::zeros(x.dims());
    let mut grad_weight = Tensor::zeros(spec.weight.dims());
    let mut grad_bias = vec![T::zero(); oc];
    for n in 0..b {
        let cols = im2col(x, n, spec, oh, ow);
        let up = &upstream.data()[n * oc * p..(n + 1) * oc * p];
        let mut grad_cols = vec![T::zero(); k * p];
        for o in 0..oc {
            let g = &up[o * p..(o + 1) * p];
            grad_bias[o] += g.iter().copied().sum::<T>();
            let gw = &mut grad_weight.data_mut()[o * k..(o + 1) * k];
            for kk in 0..k {
                let col = &cols[kk * p..(kk + 1) * p];
                let mut acc = T::zero();
                for (&gv, &cv) in g.iter().zip(col) {
                    acc += gv * cv;
                }
                gw[kk] += acc;
                let wv = weights[o * k + kk];
                for (gc, &gv) in grad_cols[kk * p..(kk + 1) * p].iter_mut().zip(g) {
                    *gc += wv * gv;
                }
            }
        }
        col2im(&grad_cols, &mut grad_input, n, spec, oh, ow);
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

impl<T: Scalar> ConvGrads<T> {
    /// Adds the parameter part of these gradients into a gradient accumulator
    /// shaped like the layer.
    pub fn accumulate_into(&self, acc: &mut ConvSpec<T>) -> Result<()> {
        acc.weight.add_assign(&self.weight)?;
        for (a, &g) in acc.bias.iter_mut().zip(&self.bias) {
            *a += g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent seven-deep loop oracle.
    fn oracle(x: &Tensor<f64>, s: &ConvSpec<f64>) -> Vec<f64> {
        let [b, c, h, w] = x.dims();
        let (kh, kw) = s.kernel;
        let oh = (h + 2 * s.padding - s.dilation * (kh - 1) - 1) / s.stride + 1;
        let ow = (w + 2 * s.padding - s.dilation * (kw - 1) - 1) / s.stride + 1;
        let mut out = Vec::new();
        for n in 0..b {
            for o in 0..s.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s.stride + ky * s.dilation) as i64 - s.padding as i64;
                                    let ix = (ox * s.stride + kx * s.dilation) as i64 - s.padding as i64;
                                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                        continue;
                                    }
                                    let wi = ((o * c + ci) * kh + ky) * kw + kx;
                                    let xi = ((n * c + ci) * h + iy as usize) * w + ix as usize;
                                    acc += s.weight.data()[wi] * x.data()[xi];
                                }
                            }
                        }
                        out.push(acc + s.bias[o]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as f64 * 1.5 - 2.0);
        let mut spec = ConvSpec::new(1, 1, 3, 1, 1, 1);
        *spec.weight.at_mut(0, 0, 1, 1) = 1.0;
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut spec = ConvSpec::<f64>::new(2, 3, 3, 2, 1, 2).with_uniform(&mut ChaCha8Rng::seed_from_u64(0));
        spec.bias = vec![0.25, -1.0, 3.0];
        let y = conv2d(&Tensor::zeros([2, 2, 7, 6]), &spec).unwrap();
        for n in 0..2 {
            for o in 0..3 {
                assert!(y.plane(n, o).iter().all(|&v| v == spec.bias[o]));
            }
        }
    }

    #[test]
    fn dilated_matches_loop_oracle_exactly() {
        let x = Tensor::<f64>::from_fn([1, 2, 5, 5], |_, c, y, x| ((c * 25 + y * 5 + x) as f64) / 10.0);
        let spec = ConvSpec::new(2, 3, 3, 1, 2, 2).with_uniform(&mut ChaCha8Rng::seed_from_u64(7));
        let fast = conv2d(&x, &spec).unwrap();
        assert_eq!(fast.dims(), [1, 3, 5, 5]);
        assert_eq!(fast.data(), &oracle(&x, &spec)[..]);
        assert_eq!(conv2d_direct(&x, &spec).unwrap(), fast);
    }

    #[test]
    fn same_padding_preserves_extent() {
        for r in 1..=4 {
            let spec = ConvSpec::<f32>::new(1, 1, 3, 1, r, r);
            assert_eq!(spec.output_hw(9, 5).unwrap(), (9, 5));
        }
    }

    #[test]
    fn shape_errors() {
        let spec = ConvSpec::<f64>::new(3, 1, 3, 1, 0, 3);
        assert!(conv2d(&Tensor::zeros([1, 2, 9, 9]), &spec).is_err());
        // 3x3 at dilation 3 spans 7 pixels
        assert!(conv2d(&Tensor::zeros([1, 3, 6, 6]), &spec).is_err());
        assert_eq!(conv2d(&Tensor::zeros([1, 3, 7, 7]), &spec).unwrap().dims(), [1, 1, 1, 1]);
        let x = Tensor::zeros([1, 3, 7, 7]);
        assert!(conv2d_backward(&x, &spec, &Tensor::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn backward_scalar_chain_rule() {
        let x = Tensor::<f64>::new([1, 1, 1, 1], vec![1.75]).unwrap();
        let mut spec = ConvSpec::new(1, 1, 1, 1, 0, 1);
        spec.weight.data_mut()[0] = -0.5;
        let g = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
        let grads = conv2d_backward(&x, &spec, &g).unwrap();
        assert_eq!(grads.input.data(), &[-1.5]);
        assert_eq!(grads.weight.data(), &[1.75 * 3.0]);
        assert_eq!(grads.bias, vec![3.0]);
    }

    #[test]
    fn backward_of_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::<f64>::new(2, 2, 3, 1, 2, 2).with_uniform(&mut rng);
        let x = Tensor::uniform([1, 2, 4, 4], 1.0, &mut rng);
        let grads = conv2d_backward(&x, &spec, &Tensor::zeros([1, 2, 4, 4])).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }
}

//! Brute-force reference implementations and a seeded equivalence driver.
//!
//! Each oracle is a direct scalar loop over the defining formula, written
//! independently of the production kernels but with the same summation
//! order, so 64-bit results must agree bit for bit. 32-bit kernels are
//! compared against the 64-bit oracle evaluated on the same (exactly
//! representable) inputs.

#![allow(dead_code)]

use cca_core::conv::{conv2d, ConvSpec};
use cca_core::matrix::{layer_norm, linear, matmul, LayerNorm, Linear, Matrix};
use cca_core::tensor::{global_max_pool_argmax, sigmoid, softmax_channels, Position, Tensor};
use cca_core::transformer::{multi_head_attention, Attention};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- oracles

pub fn conv_oracle(x: &Tensor<f64>, spec: &ConvSpec<f64>) -> Tensor<f64> {
    let [b, ci, h, w] = x.dims();
    let (kh, kw) = spec.kernel;
    let (s, p, d) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize);
    let oh = ((h as isize + 2 * p - d * (kh as isize - 1) - 1) / s + 1) as usize;
    let ow = ((w as isize + 2 * p - d * (kw as isize - 1) - 1) / s + 1) as usize;
    Tensor::from_fn([b, spec.out_channels, oh, ow], |n, oc, oy, ox| {
        let mut acc = 0.0;
        for ic in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = oy as isize * s + ky as isize * d - p;
                    let ix = ox as isize * s + kx as isize * d - p;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += x.at(n, ic, iy as usize, ix as usize) * spec.weight.at(oc, ic, ky, kx);
                    }
                }
            }
        }
        acc + spec.bias[oc]
    })
}

pub fn sigmoid_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let [b, c, h, w] = x.dims();
    Tensor::from_fn([b, c, h, w], |n, ch, y, xx| 1.0 / (1.0 + (-x.at(n, ch, y, xx)).exp()))
}

pub fn softmax_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let [_, c, _, _] = x.dims();
    Tensor::from_fn(x.dims(), |n, ch, y, xx| {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            max = max.max(x.at(n, k, y, xx));
        }
        let mut total = 0.0;
        for k in 0..c {
            total += (x.at(n, k, y, xx) - max).exp();
        }
        (x.at(n, ch, y, xx) - max).exp() / total
    })
}

/// Scan for the maximum value, then return the first row-major index
/// holding it.
pub fn argmax_oracle(plane: &[f64], width: usize) -> (Position, f64) {
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let i = plane.iter().position(|&v| v == max).expect("non-empty");
    (Position::new(i % width, i / width), max)
}

pub fn matmul_oracle(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        let mut acc = 0.0;
        for k in 0..a.cols() {
            acc += a.at(i, k) * b.at(k, j);
        }
        acc
    })
}

pub fn linear_oracle(x: &Matrix<f64>, l: &Linear<f64>) -> Matrix<f64> {
    let m = matmul_oracle(x, &l.weight);
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.at(i, j) + l.bias[j])
}

pub fn layer_norm_oracle(x: &Matrix<f64>, ln: &LayerNorm<f64>) -> Matrix<f64> {
    let c = x.cols();
    Matrix::from_fn(x.rows(), c, |r, i| {
        let mut sum = 0.0;
        for k in 0..c {
            sum += x.at(r, k);
        }
        let mean = sum / c as f64;
        let mut sq = 0.0;
        for k in 0..c {
            sq += (x.at(r, k) - mean) * (x.at(r, k) - mean);
        }
        let var = sq / c as f64;
        (x.at(r, i) - mean) * (1.0 / (var + ln.eps).sqrt()) * ln.gamma[i] + ln.beta[i]
    })
}

pub fn attention_oracle(x: &Matrix<f64>, a: &Attention<f64>, heads: usize) -> Matrix<f64> {
    let (t, c) = (x.rows(), x.cols());
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_oracle(x, &a.query);
    let k = linear_oracle(x, &a.key);
    let v = linear_oracle(x, &a.value);
    let mut context = Matrix::zeros(t, c);
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q.at(i, off + d) * k.at(j, off + d);
                    }
                    dot * scale
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let mut total = 0.0;
            for e in &exps {
                total += e;
            }
            for (j, e) in exps.iter().enumerate() {
                let p = e / total;
                for d in 0..dh {
                    *context.at_mut(i, off + d) += p * v.at(j, off + d);
                }
            }
        }
    }
    linear_oracle(&context, &a.output)
}

// ------------------------------------------------------- case generation

pub fn random_conv(r: &mut ChaCha8Rng) -> (Tensor<f64>, ConvSpec<f64>) {
    let ci: usize = r.gen_range(1..=4);
    let co = r.gen_range(1..=4);
    let k: usize = if r.gen_bool(0.8) { 3 } else { 1 };
    let dilation: usize = r.gen_range(1..=3);
    let stride = r.gen_range(1..=2);
    let padding = r.gen_range(0..=dilation);
    let extent = dilation * (k - 1) + 1;
    let min = extent.saturating_sub(2 * padding).max(1);
    let h = r.gen_range(min..=min + 8);
    let w = r.gen_range(min..=min + 8);
    let b = r.gen_range(1..=2);
    let spec = ConvSpec::new(ci, co, k, stride, padding, dilation).with_uniform(r);
    let mut spec = spec;
    spec.bias = (0..co).map(|_| r.gen_range(-1.0..1.0)).collect();
    (Tensor::uniform([b, ci, h, w], 2.0, r), spec)
}

fn random_dims(r: &mut ChaCha8Rng) -> [usize; 4] {
    [r.gen_range(1..=2), r.gen_range(1..=5), r.gen_range(1..=6), r.gen_range(1..=6)]
}

pub fn random_attention(r: &mut ChaCha8Rng) -> (Matrix<f64>, Attention<f64>, usize) {
    let heads = r.gen_range(1..=3);
    let c = heads * r.gen_range(1..=4);
    let t = r.gen_range(1..=9);
    let a = Attention {
        query: Linear::uniform(c, c, r),
        key: Linear::uniform(c, c, r),
        value: Linear::uniform(c, c, r),
        output: Linear::uniform(c, c, r),
    };
    (Matrix::uniform(t, c, 2.0, r), a, heads)
}

pub fn random_layer_norm(r: &mut ChaCha8Rng) -> (Matrix<f64>, LayerNorm<f64>) {
    let c = r.gen_range(1..=12);
    let mut ln = LayerNorm::new(c, 1e-5);
    ln.gamma = (0..c).map(|_| r.gen_range(0.5..1.5)).collect();
    ln.beta = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    (Matrix::uniform(r.gen_range(1..=6), c, 3.0, r), ln)
}

// ---------------------------------------------------------- comparisons

/// Rounds every value to the nearest `f32`, so the 32-bit kernel and the
/// 64-bit oracle see identical inputs.
pub fn f32_exact_t(t: &Tensor<f64>) -> Tensor<f64> {
    t.cast::<f32>().cast()
}

pub fn f32_exact_m(m: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.at(i, j) as f32 as f64)
}

pub fn to_f32_m(m: &Matrix<f64>) -> Matrix<f32> {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.at(i, j) as f32)
}

fn linear_f32(l: &Linear<f64>) -> Linear<f32> {
    Linear {
        weight: to_f32_m(&l.weight),
        bias: l.bias.iter().map(|&b| b as f32).collect(),
    }
}

fn linear_exact(l: &Linear<f64>) -> Linear<f64> {
    Linear {
        weight: f32_exact_m(&l.weight),
        bias: l.bias.iter().map(|&b| b as f32 as f64).collect(),
    }
}

fn conv_f32(s: &ConvSpec<f64>) -> ConvSpec<f32> {
    let mut out = ConvSpec::new(s.in_channels, s.out_channels, s.kernel.0, s.stride, s.padding, s.dilation);
    out.weight = s.weight.cast();
    out.bias = s.bias.iter().map(|&b| b as f32).collect();
    out
}

fn conv_exact(s: &ConvSpec<f64>) -> ConvSpec<f64> {
    let mut out = s.clone();
    out.weight = f32_exact_t(&s.weight);
    out.bias = s.bias.iter().map(|&b| b as f32 as f64).collect();
    out
}

/// `max |a − b| / max(max |b|, 1e-30)`.
pub fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-30);
    diff / scale
}

/// Outcome of one kernel-vs-oracle case.
#[derive(Debug, Clone, Copy)]
pub struct CaseResult {
    pub exact_f64: bool,
    pub rel_f32: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.exact_f64 && self.rel_f32 <= 1e-5
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn t_f32_vals(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn m_f32_vals(m: &Matrix<f32>) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

pub fn conv_case(seed: u64) -> CaseResult {
    let (x, spec) = random_conv(&mut rng(seed));
    let exact = bits_equal(conv2d(&x, &spec).unwrap().data(), conv_oracle(&x, &spec).data());
    let (xe, se) = (f32_exact_t(&x), conv_exact(&spec));
    let y32 = conv2d(&x.cast::<f32>(), &conv_f32(&spec)).unwrap();
    CaseResult {
        exact_f64: exact,
        rel_f32: norm_rel(&t_f32_vals(&y32), conv_oracle(&xe, &se).data()),
    }
}

pub fn sigmoid_case(seed: u64) -> CaseResult {
    let mut r = rng(seed);
    let x = Tensor::<f64>::uniform(random_dims(&mut r), 8.0, &mut r);
    let exact = bits_equal(sigmoid(&x).data(), sigmoid_oracle(&x).data());
    let y32 = sigmoid(&x.cast::<f32>());
    CaseResult {
        exact_f64: exact,
        rel_f32: norm_rel(&t_f32_vals(&y32), sigmoid_oracle(&f32_exact_t(&x)).data()),
    }
}

pub fn softmax_case(seed: u64) -> CaseResult {
    let mut r = rng(seed);
    let x = Tensor::<f64>::uniform(random_dims(&mut r), 6.0, &mut r);
    let exact = bits_equal(softmax_channels(&x).unwrap().data(), softmax_oracle(&x).data());
    let y32 = softmax_channels(&x.cast::<f32>()).unwrap();
    CaseResult {
        exact_f64: exact,
        rel_f32: norm_rel(&t_f32_vals(&y32), softmax_oracle(&f32_exact_t(&x)).data()),
    }
}

/// Pooling is exact in both precisions: it only compares values. Half the
/// cases draw small integers to force ties.
pub fn pool_case(seed: u64) -> CaseResult {
    let mut r = rng(seed);
    let dims = random_dims(&mut r);
    let ties = seed.is_multiple_of(2);
    let x = Tensor::<f64>::from_fn(dims, |_, _, _, _| {
        if ties {
            r.gen_range(0..3) as f64
        } else {
            r.gen_range(-1.0..1.0)
        }
    });
    let pool = global_max_pool_argmax(&x).unwrap();
    let pool32 = global_max_pool_argmax(&x.cast::<f32>()).unwrap();
    let mut exact = true;
    let mut rel = 0.0f64;
    let xe = f32_exact_t(&x);
    for n in 0..dims[0] {
        for c in 0..dims[1] {
            let (p, v) = argmax_oracle(x.plane(n, c), dims[3]);
            exact &= pool.position(n, c) == p && pool.score(n, c).to_bits() == v.to_bits();
            let (p32, v32) = argmax_oracle(xe.plane(n, c), dims[3]);
            if pool32.position(n, c) != p32 || pool32.score(n, c) as f64 != v32 {
                rel = f64::INFINITY;
            }
        }
    }
    CaseResult {
        exact_f64: exact,
        rel_f32: rel,
    }
}

pub fn matmul_case(seed: u64) -> CaseResult {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8));
    let a = Matrix::<f64>::uniform(m, k, 2.0, &mut r);
    let b = Matrix::<f64>::uniform(k, n, 2.0, &mut r);
    let exact = bits_equal(matmul(&a, &b).unwrap().data(), matmul_oracle(&a, &b).data());
    let y32 = matmul(&to_f32_m(&a), &to_f32_m(&b)).unwrap();
    CaseResult {
        exact_f64: exact,
        rel_f32: norm_rel(&m_f32_vals(&y32), matmul_oracle(&f32_exact_m(&a), &f32_exact_m(&b)).data()),
    }
}

pub fn linear_case(seed: u64) -> CaseResult {
    let mut r = rng(seed);
    let (i, o) = (r.gen_range(1..=8), r.gen_range(1..=8));
    let l = Linear::<f64>::uniform(i, o, &mut r);
    let x = Matrix::<f64>::uniform(r.gen_range(1..=6), i, 2.0, &mut r);
    let exact = bits_equal(linear(&x, &l).unwrap().data(), linear_oracle(&x, &l).data());
    let y32 = linear(&to_f32_m(&x), &linear_f32(&l)).unwrap();
    CaseResult {
        exact_f64: exact,
        rel_f32: norm_rel(&m_f32_vals(&y32), linear_oracle(&f32_exact_m(&x), &linear_exact(&l)).data()),
    }
}

pub fn layer_norm_case(seed: u64) -> CaseResult {
    let (x, ln) = random_layer_norm(&mut rng(seed));
    let exact = bits_equal(layer_norm(&x, &ln).unwrap().data(), layer_norm_oracle(&x, &ln).data());
    let ln32 = LayerNorm::<f32> {
        gamma: ln.gamma.iter().map(|&v| v as f32).collect(),
        beta: ln.beta.iter().map(|&v| v as f32).collect(),
        eps: ln.eps,
    };
    let lne = LayerNorm::<f64> {
        gamma: ln.gamma.iter().map(|&v| v as f32 as f64).collect(),
        beta: ln.beta.iter().map(|&v| v as f32 as f64).collect(),
        eps: ln.eps,
    };
    let y32 = layer_norm(&to_f32_m(&x), &ln32).unwrap();
    CaseResult {
        exact_f64: exact,
        rel_f32: norm_rel(&m_f32_vals(&y32), layer_norm_oracle(&f32_exact_m(&x), &lne).data()),
    }
}

pub fn attention_case(seed: u64) -> CaseResult {
    let (x, a, heads) = random_attention(&mut rng(seed));
    let exact = bits_equal(
        multi_head_attention(&x, &a, heads).unwrap().data(),
        attention_oracle(&x, &a, heads).data(),
    );
    let a32 = Attention {
        query: linear_f32(&a.query),
        key: linear_f32(&a.key),
        value: linear_f32(&a.value),
        output: linear_f32(&a.output),
    };
    let ae = Attention {
        query: linear_exact(&a.query),
        key: linear_exact(&a.key),
        value: linear_exact(&a.value),
        output: linear_exact(&a.output),
    };
    let y32 = multi_head_attention(&to_f32_m(&x), &a32, heads).unwrap();
    CaseResult {
        exact_f64: exact,
        rel_f32: norm_rel(&m_f32_vals(&y32), attention_oracle(&f32_exact_m(&x), &ae, heads).data()),
    }
}

pub type Case = fn(u64) -> CaseResult;

pub const KERNELS: &[(&str, Case)] = &[
    ("conv2d", conv_case),
    ("sigmoid", sigmoid_case),
    ("softmax_channels", softmax_case),
    ("global_max_pool", pool_case),
    ("matmul", matmul_case),
    ("linear", linear_case),
    ("layer_norm", layer_norm_case),
    ("multi_head_attention", attention_case),
];

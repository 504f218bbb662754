//! Encoder-only transformer used to refine the synthesized context tokens.
//!
//! Pre-norm residual blocks: `h = x + MHA(LN1(x))`, `y = h + FFN(LN2(h))`,
//! with a GELU feed-forward of width `ffn_mult · C`. No dropout, no masking.
//! Sinusoidal positional encoding is available but off by default.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::matrix::{
    layer_norm_backward, layer_norm_cached, linear, linear_backward, LayerNorm, LayerNormCache,
    Linear, Matrix, TokenMatrix,
};
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attention: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub heads: usize,
    pub positional_encoding: bool,
    pub blocks: Vec<EncoderBlock<T>>,
}

/// Shape hyperparameters for building an encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderShape {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub positional_encoding: bool,
    pub ln_eps: f64,
}

impl EncoderShape {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

impl<T: Scalar> Attention<T> {
    fn zeros(c: usize) -> Self {
        Self {
            query: Linear::zeros(c, c),
            key: Linear::zeros(c, c),
            value: Linear::zeros(c, c),
            output: Linear::zeros(c, c),
        }
    }

    fn uniform<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::uniform(c, c, rng),
            key: Linear::uniform(c, c, rng),
            value: Linear::uniform(c, c, rng),
            output: Linear::uniform(c, c, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Attention<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        out.extend(prefixed("query", self.query.tensors()));
        out.extend(prefixed("key", self.key.tensors()));
        out.extend(prefixed("value", self.value.tensors()));
        out.extend(prefixed("output", self.output.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        out.extend(prefixed_mut("query", self.query.tensors_mut()));
        out.extend(prefixed_mut("key", self.key.tensors_mut()));
        out.extend(prefixed_mut("value", self.value.tensors_mut()));
        out.extend(prefixed_mut("output", self.output.tensors_mut()));
        out
    }
}

impl<T: Scalar> EncoderBlock<T> {
    /// All projections zero, layer norms at identity affine.
    pub fn zeros(shape: &EncoderShape) -> Self {
        let c = shape.width;
        let hidden = c * shape.ffn_mult;
        Self {
            norm1: LayerNorm::new(c, shape.ln_eps),
            attention: Attention::zeros(c),
            norm2: LayerNorm::new(c, shape.ln_eps),
            ffn_in: Linear::zeros(c, hidden),
            ffn_out: Linear::zeros(hidden, c),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &EncoderShape, rng: &mut R) -> Self {
        let c = shape.width;
        let hidden = c * shape.ffn_mult;
        Self {
            norm1: LayerNorm::new(c, shape.ln_eps),
            attention: Attention::uniform(c, rng),
            norm2: LayerNorm::new(c, shape.ln_eps),
            ffn_in: Linear::uniform(c, hidden, rng),
            ffn_out: Linear::uniform(hidden, c, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.norm1.gamma.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm1: self.norm1.zeros_like(),
            attention: self.attention.zeros_like(),
            norm2: self.norm2.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
        }
    }
}

impl<T: Scalar> Parameters<T> for EncoderBlock<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        out.extend(prefixed("norm1", self.norm1.tensors()));
        out.extend(prefixed("attention", self.attention.tensors()));
        out.extend(prefixed("norm2", self.norm2.tensors()));
        out.extend(prefixed("ffn_in", self.ffn_in.tensors()));
        out.extend(prefixed("ffn_out", self.ffn_out.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        out.extend(prefixed_mut("norm1", self.norm1.tensors_mut()));
        out.extend(prefixed_mut("attention", self.attention.tensors_mut()));
        out.extend(prefixed_mut("norm2", self.norm2.tensors_mut()));
        out.extend(prefixed_mut("ffn_in", self.ffn_in.tensors_mut()));
        out.extend(prefixed_mut("ffn_out", self.ffn_out.tensors_mut()));
        out
    }
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(shape: &EncoderShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            heads: shape.heads,
            positional_encoding: shape.positional_encoding,
            blocks: (0..shape.layers).map(|_| EncoderBlock::zeros(shape)).collect(),
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &EncoderShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            heads: shape.heads,
            positional_encoding: shape.positional_encoding,
            blocks: (0..shape.layers)
                .map(|_| EncoderBlock::uniform(shape, rng))
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            positional_encoding: self.positional_encoding,
            blocks: self.blocks.iter().map(EncoderBlock::zeros_like).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("block{i}"), b.tensors_mut()));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub input: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// One T×T row-stochastic matrix per head.
    pub probs: Vec<Matrix<T>>,
    pub context: Matrix<T>,
}

fn check_heads(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return shape_err(
            "multi_head_attention",
            format!("width {width} not divisible into {heads} heads"),
        );
    }
    Ok(width / heads)
}

pub fn multi_head_attention<T: Scalar>(
    x: &TokenMatrix<T>,
    attn: &Attention<T>,
    heads: usize,
) -> Result<TokenMatrix<T>> {
    multi_head_attention_cached(x, attn, heads).map(|(y, _)| y)
}

/// Scaled dot-product self-attention, `softmax(QKᵀ/√d_h)·V` per head, heads
/// concatenated in order and projected by the output layer.
pub fn multi_head_attention_cached<T: Scalar>(
    x: &TokenMatrix<T>,
    attn: &Attention<T>,
    heads: usize,
) -> Result<(TokenMatrix<T>, AttentionCache<T>)> {
    let c = attn.query.in_features();
    if x.cols() != c {
        return shape_err(
            "multi_head_attention",
            format!("token width {} vs model width {c}", x.cols()),
        );
    }
    if x.rows() == 0 {
        return shape_err("multi_head_attention", "empty token sequence");
    }
    let dh = check_heads(c, heads)?;
    let t = x.rows();
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let q = linear(x, &attn.query)?;
    let k = linear(x, &attn.key)?;
    let v = linear(x, &attn.value)?;
    let mut context = Matrix::zeros(t, c);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[off..off + dh];
            let row = p.row_mut(i);
            let mut max = T::neg_infinity();
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + dh];
                let mut dot = T::zero();
                for d in 0..dh {
                    dot += qi[d] * kj[d];
                }
                *r = dot * scale;
                max = max.max(*r);
            }
            let mut total = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
        }
        for i in 0..t {
            for j in 0..t {
                let pij = p.at(i, j);
                let vj = &v.row(j)[off..off + dh];
                let ci = &mut context.row_mut(i)[off..off + dh];
                for d in 0..dh {
                    ci[d] += pij * vj[d];
                }
            }
        }
        probs.push(p);
    }
    let out = linear(&context, &attn.output)?;
    Ok((
        out,
        AttentionCache {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            context,
        },
    ))
}

pub fn multi_head_attention_backward<T: Scalar>(
    attn: &Attention<T>,
    heads: usize,
    cache: &AttentionCache<T>,
    upstream: &TokenMatrix<T>,
    grads: &mut Attention<T>,
) -> Result<TokenMatrix<T>> {
    let c = attn.query.in_features();
    let dh = check_heads(c, heads)?;
    let t = cache.input.rows();
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let grad_context = linear_backward(&cache.context, &attn.output, upstream, &mut grads.output)?;
    let mut gq = Matrix::zeros(t, c);
    let mut gk = Matrix::zeros(t, c);
    let mut gv = Matrix::zeros(t, c);
    for h in 0..heads {
        let off = h * dh;
        let p = &cache.probs[h];
        // dP = dO · Vᵀ, dV = Pᵀ · dO
        let mut gp = Matrix::<T>::zeros(t, t);
        for i in 0..t {
            let go = &grad_context.row(i)[off..off + dh];
            for j in 0..t {
                let vj = &cache.v.row(j)[off..off + dh];
                let mut dot = T::zero();
                for d in 0..dh {
                    dot += go[d] * vj[d];
                }
                *gp.at_mut(i, j) = dot;
                let pij = p.at(i, j);
                let gvj = &mut gv.row_mut(j)[off..off + dh];
                for d in 0..dh {
                    gvj[d] += pij * go[d];
                }
            }
        }
        for i in 0..t {
            let mut dot = T::zero();
            for j in 0..t {
                dot += gp.at(i, j) * p.at(i, j);
            }
            for j in 0..t {
                let gs = p.at(i, j) * (gp.at(i, j) - dot) * scale;
                for d in 0..dh {
                    let qd = cache.q.at(i, off + d);
                    let kd = cache.k.at(j, off + d);
                    *gq.at_mut(i, off + d) += gs * kd;
                    *gk.at_mut(j, off + d) += gs * qd;
                }
            }
        }
    }
    let mut gx = linear_backward(&cache.input, &attn.query, &gq, &mut grads.query)?;
    gx.add_assign(&linear_backward(&cache.input, &attn.key, &gk, &mut grads.key)?)?;
    gx.add_assign(&linear_backward(&cache.input, &attn.value, &gv, &mut grads.value)?)?;
    Ok(gx)
}

const GELU_COEF: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let inner = k * (x + T::from_f64(GELU_COEF) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_COEF);
    let th = (k * (x + c * x * x * x)).tanh();
    let three = T::from_f64(3.0);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + three * c * x * x)
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    norm1: LayerNormCache<T>,
    attention: AttentionCache<T>,
    norm2_out: Matrix<T>,
    norm2: LayerNormCache<T>,
    hidden_pre: Matrix<T>,
    hidden: Matrix<T>,
}

impl<T: Scalar> BlockCache<T> {
    pub fn attention(&self) -> &AttentionCache<T> {
        &self.attention
    }
}

pub fn encoder_block<T: Scalar>(
    x: &TokenMatrix<T>,
    block: &EncoderBlock<T>,
    heads: usize,
) -> Result<TokenMatrix<T>> {
    encoder_block_cached(x, block, heads).map(|(y, _)| y)
}

pub fn encoder_block_cached<T: Scalar>(
    x: &TokenMatrix<T>,
    block: &EncoderBlock<T>,
    heads: usize,
) -> Result<(TokenMatrix<T>, BlockCache<T>)> {
    let (a, norm1) = layer_norm_cached(x, &block.norm1)?;
    let (m, attention) = multi_head_attention_cached(&a, &block.attention, heads)?;
    let residual = x.add(&m)?;
    let (b, norm2) = layer_norm_cached(&residual, &block.norm2)?;
    let hidden_pre = linear(&b, &block.ffn_in)?;
    let mut hidden = hidden_pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let f = linear(&hidden, &block.ffn_out)?;
    let y = residual.add(&f)?;
    Ok((
        y,
        BlockCache {
            norm1,
            attention,
            norm2_out: b,
            norm2,
            hidden_pre,
            hidden,
        },
    ))
}

pub fn encoder_block_backward<T: Scalar>(
    block: &EncoderBlock<T>,
    heads: usize,
    cache: &BlockCache<T>,
    upstream: &TokenMatrix<T>,
    grads: &mut EncoderBlock<T>,
) -> Result<TokenMatrix<T>> {
    let g_hidden = linear_backward(&cache.hidden, &block.ffn_out, upstream, &mut grads.ffn_out)?;
    let mut g_pre = g_hidden;
    for (g, &x) in g_pre.data_mut().iter_mut().zip(cache.hidden_pre.data()) {
        *g *= gelu_derivative(x);
    }
    let g_b = linear_backward(&cache.norm2_out, &block.ffn_in, &g_pre, &mut grads.ffn_in)?;
    let mut g_res = layer_norm_backward(&block.norm2, &cache.norm2, &g_b, &mut grads.norm2)?;
    g_res.add_assign(upstream)?;
    let g_a = multi_head_attention_backward(
        &block.attention,
        heads,
        &cache.attention,
        &g_res,
        &mut grads.attention,
    )?;
    let mut g_x = layer_norm_backward(&block.norm1, &cache.norm1, &g_a, &mut grads.norm1)?;
    g_x.add_assign(&g_res)?;
    Ok(g_x)
}

/// Fixed sinusoidal encoding: `sin(t/10000^(2i/C))` on even columns,
/// `cos` on odd columns.
pub fn sinusoidal_encoding<T: Scalar>(tokens: usize, width: usize) -> Matrix<T> {
    Matrix::from_fn(tokens, width, |t, c| {
        let i = (c / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * i / width as f64);
        T::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    pub blocks: Vec<BlockCache<T>>,
}

pub fn encoder_forward<T: Scalar>(x: &TokenMatrix<T>, params: &EncoderParams<T>) -> Result<TokenMatrix<T>> {
    encoder_forward_cached(x, params).map(|(y, _)| y)
}

pub fn encoder_forward_cached<T: Scalar>(
    x: &TokenMatrix<T>,
    params: &EncoderParams<T>,
) -> Result<(TokenMatrix<T>, EncoderCache<T>)> {
    let mut h = if params.positional_encoding {
        x.add(&sinusoidal_encoding(x.rows(), x.cols()))?
    } else {
        x.clone()
    };
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        if block.width() != x.cols() {
            return shape_err(
                "encoder",
                format!("token width {} vs block width {}", x.cols(), block.width()),
            );
        }
        let (y, cache) = encoder_block_cached(&h, block, params.heads)?;
        caches.push(cache);
        h = y;
    }
    Ok((h, EncoderCache { blocks: caches }))
}

pub fn encoder_backward<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &EncoderCache<T>,
    upstream: &TokenMatrix<T>,
    grads: &mut EncoderParams<T>,
) -> Result<TokenMatrix<T>> {
    let mut g = upstream.clone();
    for i in (0..params.blocks.len()).rev() {
        g = encoder_block_backward(
            &params.blocks[i],
            params.heads,
            &cache.blocks[i],
            &g,
            &mut grads.blocks[i],
        )?;
    }
    Ok(g)
}

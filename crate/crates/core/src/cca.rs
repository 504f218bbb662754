//! The full context-collection-augmentation block.
//!
//! ```text
//! f ──Conv1──▶ f1 ──LCFE──▶ f_lc ─┐
//!   │             └─GCFC──▶ keys ─┴─▶ tokens ──encoder──▶ f_t ──▶ map ─┐
//!   └─Conv2──▶ f2 ─────────────────────────────────────────────────────┴─concat─▶ Conv3 ─▶ F
//! ```
//!
//! The local map and the key features are spliced into one token sequence:
//! the `H'·W'` pixels of `f_lc` in row-major order followed by the `n`
//! gated key features. After refinement the first `H'·W'` tokens are folded
//! back into a map and each refined key token is merged at its source
//! location. That map is channel-concatenated with `f2` and fused by Conv3.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{shape_err, Error, Result};
use crate::gcfc::{gcfc_backward, gcfc_forward_cached, GcfcCache, GcfcParams, KeyFeatureSet};
use crate::lcfe::{lcfe_backward, lcfe_forward_cached, LcfeCache, LcfeParams};
use crate::matrix::{Matrix, TokenMatrix};
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, split_channels, Dims, Position, Tensor};
use crate::transformer::{
    encoder_backward, encoder_forward_cached, EncoderCache, EncoderParams, EncoderShape,
};

/// How a refined key token is put back onto the spatial map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyMerge {
    /// Added onto the local token at the key's source position.
    #[default]
    Add,
    /// Replaces the local token at that position; with repeated positions the
    /// later key wins.
    Overwrite,
}

impl std::str::FromStr for KeyMerge {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "add" => Ok(KeyMerge::Add),
            "overwrite" => Ok(KeyMerge::Overwrite),
            other => Err(format!("unknown key merge `{other}` (expected add or overwrite)")),
        }
    }
}

impl std::fmt::Display for KeyMerge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KeyMerge::Add => "add",
            KeyMerge::Overwrite => "overwrite",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcaConfig {
    pub c_in: usize,
    /// Width after Conv1/Conv2; also the token width.
    pub c_mid: usize,
    pub c_out: usize,
    pub n_keys: usize,
    pub dilation_rates: [usize; 3],
    /// Stride of Conv1/Conv2, 1 or 2.
    pub stride: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub positional_encoding: bool,
    pub ln_eps: f64,
    pub key_merge: KeyMerge,
    /// Initialize every bias to zero.
    pub zero_bias: bool,
}

impl Default for CcaConfig {
    fn default() -> Self {
        Self {
            c_in: 16,
            c_mid: 8,
            c_out: 16,
            n_keys: crate::gcfc::DEFAULT_KEYS,
            dilation_rates: [1, 2, 3],
            stride: 2,
            heads: 4,
            layers: 1,
            ffn_mult: 4,
            positional_encoding: false,
            ln_eps: 1e-5,
            key_merge: KeyMerge::Add,
            zero_bias: false,
        }
    }
}

impl CcaConfig {
    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            width: self.c_mid,
            heads: self.heads,
            layers: self.layers,
            ffn_mult: self.ffn_mult,
            positional_encoding: self.positional_encoding,
            ln_eps: self.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_mid == 0 || self.c_out == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be positive".into()));
        }
        self.encoder_shape().validate()
    }

    /// Spatial extent after Conv1/Conv2 (3×3, padding 1).
    pub fn reduced_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        ConvSpec::<f64>::new(self.c_in, self.c_mid, 3, self.stride, 1, 1).output_hw(h, w)
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let (h, w) = self.reduced_hw(input[2], input[3])?;
        Ok([input[0], self.c_out, h, w])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcaParams<T> {
    pub conv1: ConvSpec<T>,
    pub conv2: ConvSpec<T>,
    pub lcfe: LcfeParams<T>,
    pub gcfc: GcfcParams<T>,
    pub encoder: EncoderParams<T>,
    pub conv3: ConvSpec<T>,
    pub key_merge: KeyMerge,
}

impl<T: Scalar> CcaParams<T> {
    /// Seeded uniform ±1/sqrt(fan_in) initialization; layer norms start at
    /// the identity affine.
    pub fn init(config: &CcaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |c_in, c_out, stride| ConvSpec::new(c_in, c_out, 3, stride, 1, 1);
        let conv1 = conv(config.c_in, config.c_mid, config.stride).with_uniform(&mut rng);
        let conv2 = conv(config.c_in, config.c_mid, config.stride).with_uniform(&mut rng);
        let lcfe = LcfeParams::uniform(config.c_mid, config.dilation_rates, &mut rng);
        let gcfc = GcfcParams::uniform(config.c_mid, config.n_keys, &mut rng);
        let encoder = EncoderParams::uniform(&config.encoder_shape(), &mut rng)?;
        let conv3 = conv(2 * config.c_mid, config.c_out, 1).with_uniform(&mut rng);
        let mut params = Self {
            conv1,
            conv2,
            lcfe,
            gcfc,
            encoder,
            conv3,
            key_merge: config.key_merge,
        };
        if config.zero_bias {
            params.zero_biases();
        }
        Ok(params)
    }

    pub fn zero_biases(&mut self) {
        for (name, t) in self.tensors_mut() {
            if name.ends_with(".bias") {
                t.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Zeroes every convolution and projection weight, keeping biases and
    /// layer-norm affines.
    pub fn zero_weights(&mut self) {
        for (name, t) in self.tensors_mut() {
            if name.ends_with(".weight") {
                t.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            lcfe: self.lcfe.zeros_like(),
            gcfc: self.gcfc.zeros_like(),
            encoder: self.encoder.zeros_like(),
            conv3: self.conv3.zeros_like(),
            key_merge: self.key_merge,
        }
    }

    pub fn cast<U: Scalar>(&self) -> CcaParams<U> {
        let mut out = CcaParams::<U> {
            conv1: cast_conv(&self.conv1),
            conv2: cast_conv(&self.conv2),
            lcfe: LcfeParams::zeros(self.lcfe.channels(), self.lcfe.rates()),
            gcfc: GcfcParams::zeros(self.gcfc.score.in_channels, self.gcfc.n_keys()),
            encoder: cast_encoder_shape(&self.encoder),
            conv3: cast_conv(&self.conv3),
            key_merge: self.key_merge,
        };
        let flat: Vec<U> = self.flatten().into_iter().map(|v| U::from_f64(v.as_f64())).collect();
        out.load_flat(&flat);
        out
    }
}

fn cast_conv<T: Scalar, U: Scalar>(c: &ConvSpec<T>) -> ConvSpec<U> {
    ConvSpec {
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        kernel: c.kernel,
        stride: c.stride,
        padding: c.padding,
        dilation: c.dilation,
        weight: c.weight.cast(),
        bias: c.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
    }
}

fn cast_encoder_shape<T: Scalar, U: Scalar>(e: &EncoderParams<T>) -> EncoderParams<U> {
    use crate::transformer::EncoderBlock;
    let blocks = e
        .blocks
        .iter()
        .map(|b| {
            let shape = EncoderShape {
                width: b.width(),
                heads: e.heads,
                layers: 1,
                ffn_mult: b.ffn_in.out_features() / b.width(),
                positional_encoding: e.positional_encoding,
                ln_eps: b.norm1.eps,
            };
            EncoderBlock::zeros(&shape)
        })
        .collect();
    EncoderParams {
        heads: e.heads,
        positional_encoding: e.positional_encoding,
        blocks,
    }
}

impl<T: Scalar> Parameters<T> for CcaParams<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        out.extend(prefixed("conv1", self.conv1.tensors()));
        out.extend(prefixed("conv2", self.conv2.tensors()));
        out.extend(prefixed("lcfe", self.lcfe.tensors()));
        out.extend(prefixed("gcfc", self.gcfc.tensors()));
        out.extend(prefixed("encoder", self.encoder.tensors()));
        out.extend(prefixed("conv3", self.conv3.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        out.extend(prefixed_mut("conv1", self.conv1.tensors_mut()));
        out.extend(prefixed_mut("conv2", self.conv2.tensors_mut()));
        out.extend(prefixed_mut("lcfe", self.lcfe.tensors_mut()));
        out.extend(prefixed_mut("gcfc", self.gcfc.tensors_mut()));
        out.extend(prefixed_mut("encoder", self.encoder.tensors_mut()));
        out.extend(prefixed_mut("conv3", self.conv3.tensors_mut()));
        out
    }
}

/// Records how a token sequence maps back onto the spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub positions: Vec<Position>,
}

impl TokenLayout {
    pub fn local_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn n_keys(&self) -> usize {
        self.positions.len()
    }

    pub fn token_count(&self) -> usize {
        self.local_tokens() + self.n_keys()
    }
}

/// Splices the local map and the key features of each batch element into a
/// token sequence: `H'·W'` pixel tokens (row-major), then the `n` key tokens.
pub fn assemble_tokens<T: Scalar>(
    f_lc: &Tensor<T>,
    keys: &[KeyFeatureSet<T>],
) -> Result<Vec<(TokenMatrix<T>, TokenLayout)>> {
    let [b, c, h, w] = f_lc.dims();
    if keys.len() != b {
        return shape_err(
            "assemble_tokens",
            format!("{} key sets for batch of {b}", keys.len()),
        );
    }
    let hw = h * w;
    keys.iter()
        .enumerate()
        .map(|(n, set)| {
            if set.features.cols() != c && !set.is_empty() {
                return shape_err(
                    "assemble_tokens",
                    format!("key width {} vs local width {c}", set.features.cols()),
                );
            }
            if set.positions.iter().any(|p| p.x >= w || p.y >= h) {
                return shape_err("assemble_tokens", "key position outside the map");
            }
            let k = set.len();
            let mut tokens = Matrix::zeros(hw + k, c);
            for ch in 0..c {
                for (p, &v) in f_lc.plane(n, ch).iter().enumerate() {
                    *tokens.at_mut(p, ch) = v;
                }
            }
            for i in 0..k {
                tokens.row_mut(hw + i).copy_from_slice(set.features.row(i));
            }
            let layout = TokenLayout {
                height: h,
                width: w,
                channels: c,
                positions: set.positions.clone(),
            };
            Ok((tokens, layout))
        })
        .collect()
}

/// Inverse of [`assemble_tokens`] for one batch element: the `1×C×H'×W'`
/// local map and the `n×C` key rows.
pub fn disassemble_tokens<T: Scalar>(
    tokens: &TokenMatrix<T>,
    layout: &TokenLayout,
) -> Result<(Tensor<T>, Matrix<T>)> {
    check_layout(tokens, layout)?;
    let hw = layout.local_tokens();
    let map = Tensor::from_fn([1, layout.channels, layout.height, layout.width], |_, c, y, x| {
        tokens.at(y * layout.width + x, c)
    });
    let order: Vec<usize> = (hw..layout.token_count()).collect();
    Ok((map, tokens.select_rows(&order)))
}

fn check_layout<T: Scalar>(tokens: &TokenMatrix<T>, layout: &TokenLayout) -> Result<()> {
    if tokens.rows() != layout.token_count() || tokens.cols() != layout.channels {
        return shape_err(
            "reassemble_spatial",
            format!(
                "{}×{} tokens for layout of {} tokens × {} channels",
                tokens.rows(),
                tokens.cols(),
                layout.token_count(),
                layout.channels
            ),
        );
    }
    Ok(())
}

/// Folds refined tokens back into a `B×C×H'×W'` map, merging every key token
/// at its recorded source position.
pub fn reassemble_spatial<T: Scalar>(
    tokens: &[TokenMatrix<T>],
    layouts: &[TokenLayout],
    merge: KeyMerge,
) -> Result<Tensor<T>> {
    let Some(first) = layouts.first() else {
        return shape_err("reassemble_spatial", "empty batch");
    };
    if tokens.len() != layouts.len() {
        return shape_err("reassemble_spatial", "token/layout count mismatch");
    }
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut out = Tensor::zeros([layouts.len(), c, h, w]);
    for (n, (t, layout)) in tokens.iter().zip(layouts).enumerate() {
        check_layout(t, layout)?;
        if (layout.channels, layout.height, layout.width) != (c, h, w) {
            return shape_err("reassemble_spatial", "layouts disagree across the batch");
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    *out.at_mut(n, ch, y, x) = t.at(y * w + x, ch);
                }
            }
        }
        let hw = h * w;
        for (i, p) in layout.positions.iter().enumerate() {
            for ch in 0..c {
                let v = t.at(hw + i, ch);
                let dst = out.at_mut(n, ch, p.y, p.x);
                match merge {
                    KeyMerge::Add => *dst += v,
                    KeyMerge::Overwrite => *dst = v,
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`reassemble_spatial`] with respect to each token matrix.
pub fn reassemble_spatial_backward<T: Scalar>(
    grad_map: &Tensor<T>,
    layouts: &[TokenLayout],
    merge: KeyMerge,
) -> Result<Vec<TokenMatrix<T>>> {
    let [b, c, h, w] = grad_map.dims();
    if layouts.len() != b {
        return shape_err("reassemble_spatial_backward", "layout count differs from batch");
    }
    let hw = h * w;
    Ok(layouts
        .iter()
        .enumerate()
        .map(|(n, layout)| {
            let mut g = Matrix::zeros(layout.token_count(), c);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        *g.at_mut(y * w + x, ch) = grad_map.at(n, ch, y, x);
                    }
                }
            }
            match merge {
                KeyMerge::Add => {
                    for (i, p) in layout.positions.iter().enumerate() {
                        for ch in 0..c {
                            *g.at_mut(hw + i, ch) = grad_map.at(n, ch, p.y, p.x);
                        }
                    }
                }
                KeyMerge::Overwrite => {
                    // Only the last key written to a position reaches the output.
                    for (i, p) in layout.positions.iter().enumerate() {
                        let last = layout.positions.iter().rposition(|q| q == p) == Some(i);
                        for ch in 0..c {
                            if last {
                                *g.at_mut(hw + i, ch) = grad_map.at(n, ch, p.y, p.x);
                            }
                            *g.at_mut(p.y * w + p.x, ch) = T::zero();
                        }
                    }
                }
            }
            g
        })
        .collect())
}

/// Gradient of [`assemble_tokens`]: `(grad_f_lc, grad_key_features)`.
pub fn assemble_tokens_backward<T: Scalar>(
    grad_tokens: &[TokenMatrix<T>],
    layouts: &[TokenLayout],
) -> Result<(Tensor<T>, Vec<Matrix<T>>)> {
    let Some(first) = layouts.first() else {
        return shape_err("assemble_tokens_backward", "empty batch");
    };
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut grad_map = Tensor::zeros([layouts.len(), c, h, w]);
    let mut grad_keys = Vec::with_capacity(layouts.len());
    for (n, (g, layout)) in grad_tokens.iter().zip(layouts).enumerate() {
        let (map, keys) = disassemble_tokens(g, layout)?;
        let hw = h * w;
        grad_map.data_mut()[n * c * hw..(n + 1) * c * hw].copy_from_slice(map.data());
        grad_keys.push(keys);
    }
    Ok((grad_map, grad_keys))
}

/// Every forward intermediate of [`cca_forward`].
#[derive(Debug, Clone)]
pub struct CcaCache<T> {
    pub input_dims: Dims,
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub lcfe: LcfeCache<T>,
    pub f_lc: Tensor<T>,
    pub gcfc: GcfcCache<T>,
    pub keys: Vec<KeyFeatureSet<T>>,
    pub tokens: Vec<TokenMatrix<T>>,
    pub layouts: Vec<TokenLayout>,
    pub encoder: Vec<EncoderCache<T>>,
    pub refined: Vec<TokenMatrix<T>>,
    pub context_map: Tensor<T>,
    pub fused_input: Tensor<T>,
}

impl<T: Scalar> CcaCache<T> {
    /// `(stage, dims)` rows describing the dataflow.
    pub fn stage_shapes(&self, output: Dims) -> Vec<(&'static str, String)> {
        let fmt = |d: Dims| format!("{}×{}×{}×{}", d[0], d[1], d[2], d[3]);
        let tokens = self
            .tokens
            .first()
            .map(|t| format!("{} × {}×{}", self.tokens.len(), t.rows(), t.cols()))
            .unwrap_or_default();
        vec![
            ("input", fmt(self.input_dims)),
            ("conv1 (f1)", fmt(self.f1.dims())),
            ("conv2 (f2)", fmt(self.f2.dims())),
            ("lcfe (f_lc)", fmt(self.f_lc.dims())),
            ("gcfc scores", fmt(self.gcfc.scores.dims())),
            ("tokens", tokens.clone()),
            ("encoder (f_t)", tokens),
            ("context map", fmt(self.context_map.dims())),
            ("concat", fmt(self.fused_input.dims())),
            ("conv3 (F)", fmt(output)),
        ]
    }
}

pub fn cca_forward<T: Scalar>(f: &Tensor<T>, params: &CcaParams<T>) -> Result<Tensor<T>> {
    cca_forward_cached(f, params).map(|(y, _)| y)
}

pub fn cca_forward_cached<T: Scalar>(
    f: &Tensor<T>,
    params: &CcaParams<T>,
) -> Result<(Tensor<T>, CcaCache<T>)> {
    let stage = |name: &'static str| {
        move |e: Error| match e {
            Error::Shape { detail, op } => Error::Shape {
                op: name,
                detail: format!("{op}: {detail}"),
            },
            other => other,
        }
    };
    let f1 = conv2d(f, &params.conv1).map_err(stage("conv1"))?;
    let f2 = conv2d(f, &params.conv2).map_err(stage("conv2"))?;
    let (f_lc, lcfe) = lcfe_forward_cached(&f1, &params.lcfe).map_err(stage("lcfe"))?;
    let (keys, gcfc) = gcfc_forward_cached(&f1, &params.gcfc).map_err(stage("gcfc"))?;
    let assembled = assemble_tokens(&f_lc, &keys).map_err(stage("assemble_tokens"))?;
    let mut tokens = Vec::with_capacity(assembled.len());
    let mut layouts = Vec::with_capacity(assembled.len());
    let mut encoder = Vec::with_capacity(assembled.len());
    let mut refined = Vec::with_capacity(assembled.len());
    for (t, layout) in assembled {
        let (y, cache) = encoder_forward_cached(&t, &params.encoder).map_err(stage("encoder"))?;
        tokens.push(t);
        layouts.push(layout);
        encoder.push(cache);
        refined.push(y);
    }
    let context_map =
        reassemble_spatial(&refined, &layouts, params.key_merge).map_err(stage("reassemble_spatial"))?;
    let fused_input = concat_channels(&[&context_map, &f2]).map_err(stage("concat"))?;
    let out = conv2d(&fused_input, &params.conv3).map_err(stage("conv3"))?;
    Ok((
        out,
        CcaCache {
            input_dims: f.dims(),
            f1,
            f2,
            lcfe,
            f_lc,
            gcfc,
            keys,
            tokens,
            layouts,
            encoder,
            refined,
            context_map,
            fused_input,
        },
    ))
}

/// Back-propagates `upstream` (shaped like the output) to the input and to
/// every parameter. Returns `(grad_f, grad_params)`.
pub fn cca_backward<T: Scalar>(
    f: &Tensor<T>,
    params: &CcaParams<T>,
    cache: &CcaCache<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, CcaParams<T>)> {
    let mut grads = params.zeros_like();

    let g3 = conv2d_backward(&cache.fused_input, &params.conv3, upstream)?;
    g3.accumulate_into(&mut grads.conv3)?;
    let mut halves = split_channels(&g3.input, 2)?.into_iter();
    let grad_context = halves.next().expect("two halves");
    let grad_f2 = halves.next().expect("two halves");

    let grad_refined = reassemble_spatial_backward(&grad_context, &cache.layouts, params.key_merge)?;
    let mut grad_tokens = Vec::with_capacity(grad_refined.len());
    for (n, g) in grad_refined.iter().enumerate() {
        grad_tokens.push(encoder_backward(
            &params.encoder,
            &cache.encoder[n],
            g,
            &mut grads.encoder,
        )?);
    }
    let (grad_f_lc, grad_keys) = assemble_tokens_backward(&grad_tokens, &cache.layouts)?;

    let mut grad_f1 = lcfe_backward(&cache.f1, &params.lcfe, &cache.lcfe, &grad_f_lc, &mut grads.lcfe)?;
    grad_f1.add_assign(&gcfc_backward(
        &cache.f1,
        &params.gcfc,
        &cache.gcfc,
        &cache.keys,
        &grad_keys,
        &mut grads.gcfc,
    )?)?;

    let g1 = conv2d_backward(f, &params.conv1, &grad_f1)?;
    g1.accumulate_into(&mut grads.conv1)?;
    let g2 = conv2d_backward(f, &params.conv2, &grad_f2)?;
    g2.accumulate_into(&mut grads.conv2)?;
    let mut grad_f = g1.input;
    grad_f.add_assign(&g2.input)?;
    Ok((grad_f, grads))
}

/// One row of an accounting table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCount {
    pub stage: &'static str,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accounting {
    pub stages: Vec<StageCount>,
}

impl Accounting {
    pub fn total(&self) -> usize {
        self.stages.iter().map(|s| s.value).sum()
    }

    pub fn get(&self, stage: &str) -> Option<usize> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.value)
    }
}

fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

fn linear_params(c_in: usize, c_out: usize) -> usize {
    c_in * c_out + c_out
}

/// Closed-form parameter counts (weights + biases) per stage.
pub fn param_count(config: &CcaConfig) -> Accounting {
    let c = config.c_mid;
    let hidden = c * config.ffn_mult;
    let lcfe = 3 * conv_params(c, c, 3) + conv_params(3 * c, 3, 1) + conv_params(3, 3, 3);
    let block = 4 * linear_params(c, c) + linear_params(c, hidden) + linear_params(hidden, c) + 2 * 2 * c;
    Accounting {
        stages: vec![
            StageCount { stage: "conv1", value: conv_params(config.c_in, c, 3) },
            StageCount { stage: "conv2", value: conv_params(config.c_in, c, 3) },
            StageCount { stage: "lcfe", value: lcfe },
            StageCount { stage: "gcfc", value: conv_params(c, config.n_keys, 1) },
            StageCount { stage: "encoder", value: config.layers * block },
            StageCount { stage: "conv3", value: conv_params(2 * c, config.c_out, 3) },
        ],
    }
}

/// Closed-form FLOPs per stage for an input of `dims`, counted as
/// 2 × multiply-accumulates. Convolutions, projections, both attention
/// products (QKᵀ and AV), the LCFE weighted sum and the GCFC gating are
/// counted; softmax, normalization and activations are not.
pub fn flop_count(config: &CcaConfig, dims: Dims) -> Result<Accounting> {
    config.validate()?;
    let [b, _, h, w] = dims;
    let (rh, rw) = config.reduced_hw(h, w)?;
    let px = b * rh * rw;
    let c = config.c_mid;
    let n = config.n_keys;
    let hidden = c * config.ffn_mult;
    let tokens = rh * rw + n;

    let conv12 = px * c * config.c_in * 9;
    let lcfe = 3 * px * c * c * 9 + px * 3 * 3 * c + px * 3 * 3 * 9 + 3 * px * c;
    let gcfc = px * n * c + b * n * c;
    let block = 4 * tokens * c * c + 2 * tokens * tokens * c + 2 * tokens * c * hidden;
    let encoder = b * config.layers * block;
    let conv3 = px * config.c_out * 2 * c * 9;
    let macs = [conv12, conv12, lcfe, gcfc, encoder, conv3];
    let names = ["conv1", "conv2", "lcfe", "gcfc", "encoder", "conv3"];
    Ok(Accounting {
        stages: names
            .iter()
            .zip(macs)
            .map(|(&stage, m)| StageCount { stage, value: 2 * m })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> CcaConfig {
        CcaConfig {
            c_in: 4,
            c_mid: 4,
            c_out: 4,
            heads: 2,
            ..CcaConfig::default()
        }
    }

    #[test]
    fn shapes_for_both_strides() {
        let mut cfg = CcaConfig::default();
        let p = CcaParams::<f32>::init(&cfg, 0).unwrap();
        let x = Tensor::zeros([1, 16, 32, 32]);
        assert_eq!(cca_forward(&x, &p).unwrap().dims(), [1, 16, 16, 16]);
        cfg.stride = 1;
        let p = CcaParams::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(cca_forward(&x, &p).unwrap().dims(), [1, 16, 32, 32]);
    }

    #[test]
    fn layout_puts_pixels_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f_lc = Tensor::<f64>::uniform([1, 8, 2, 2], 1.0, &mut rng);
        let keys = vec![KeyFeatureSet {
            positions: vec![Position::new(0, 0), Position::new(1, 1), Position::new(0, 1), Position::new(1, 1)],
            raw_scores: vec![0.0; 4],
            features: Matrix::uniform(4, 8, 1.0, &mut rng),
        }];
        let (tokens, layout) = assemble_tokens(&f_lc, &keys).unwrap().remove(0);
        assert_eq!(tokens.rows(), 8);
        for p in 0..4 {
            for c in 0..8 {
                assert_eq!(tokens.at(p, c), f_lc.at(0, c, p / 2, p % 2));
            }
        }
        let (map, k) = disassemble_tokens(&tokens, &layout).unwrap();
        assert_eq!(map, f_lc);
        assert_eq!(k, keys[0].features);
    }

    #[test]
    fn no_keys_roundtrip() {
        let f_lc = Tensor::<f64>::uniform([2, 3, 3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let keys = vec![
            KeyFeatureSet { positions: vec![], raw_scores: vec![], features: Matrix::zeros(0, 3) };
            2
        ];
        let assembled = assemble_tokens(&f_lc, &keys).unwrap();
        assert!(assembled.iter().all(|(t, _)| t.rows() == 6));
        let (tokens, layouts): (Vec<_>, Vec<_>) = assembled.into_iter().unzip();
        assert_eq!(reassemble_spatial(&tokens, &layouts, KeyMerge::Add).unwrap(), f_lc);
    }

    #[test]
    fn key_token_is_added_at_its_position() {
        let layout = TokenLayout { height: 3, width: 3, channels: 2, positions: vec![Position::new(1, 1)] };
        let mut t = Matrix::<f64>::zeros(10, 2);
        t.row_mut(9).copy_from_slice(&[2.0, -1.0]);
        let map = reassemble_spatial(&[t.clone()], std::slice::from_ref(&layout), KeyMerge::Add).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let expected = if (x, y) == (1, 1) { [2.0, -1.0] } else { [0.0, 0.0] };
                assert_eq!([map.at(0, 0, y, x), map.at(0, 1, y, x)], expected);
            }
        }
        t.row_mut(4).copy_from_slice(&[5.0, 5.0]);
        let over = reassemble_spatial(&[t], &[layout], KeyMerge::Overwrite).unwrap();
        assert_eq!(over.at(0, 0, 1, 1), 2.0);
    }

    #[test]
    fn reassemble_rejects_wrong_token_count() {
        let layout = TokenLayout { height: 2, width: 2, channels: 2, positions: vec![Position::new(0, 0)] };
        assert!(reassemble_spatial(&[Matrix::<f64>::zeros(4, 2)], &[layout], KeyMerge::Add).is_err());
    }

    #[test]
    fn lcfe_closed_form_at_64() {
        let cfg = CcaConfig { c_mid: 64, ..CcaConfig::default() };
        let lcfe = param_count(&cfg).get("lcfe").unwrap();
        assert_eq!(lcfe, 3 * (64 * 64 * 9 + 64) + (192 * 3 + 3) + (3 * 3 * 9 + 3));
        assert_eq!(lcfe, 111_447);
        assert_eq!(conv_params(64, 3, 1), 195);
    }

    #[test]
    fn param_count_matches_enumeration() {
        let cfg = small();
        let p = CcaParams::<f64>::init(&cfg, 3).unwrap();
        assert_eq!(param_count(&cfg).total(), p.enumerate_count());
    }

    #[test]
    fn doubling_extent_quadruples_conv_flops() {
        let cfg = CcaConfig::default();
        let a = flop_count(&cfg, [1, 16, 16, 16]).unwrap();
        let b = flop_count(&cfg, [1, 16, 32, 32]).unwrap();
        for s in ["conv1", "conv2", "lcfe", "conv3"] {
            assert_eq!(b.get(s).unwrap(), 4 * a.get(s).unwrap(), "{s}");
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(CcaConfig { stride: 3, ..small() }.validate().is_err());
        assert!(CcaConfig { heads: 3, ..small() }.validate().is_err());
        assert!(CcaConfig { c_mid: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn zero_bias_config() {
        let cfg = CcaConfig { zero_bias: true, ..small() };
        let p = CcaParams::<f64>::init(&cfg, 0).unwrap();
        for (name, t) in p.tensors() {
            if name.ends_with(".bias") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn cast_roundtrip_preserves_values() {
        let p = CcaParams::<f64>::init(&small(), 9).unwrap();
        let q: CcaParams<f32> = p.cast();
        let back: CcaParams<f64> = q.cast();
        assert_eq!(p.enumerate_count(), back.enumerate_count());
        for (a, b) in p.flatten().iter().zip(back.flatten()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

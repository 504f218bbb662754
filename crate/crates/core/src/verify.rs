//! Stage-by-stage gradient verification for every differentiable kernel and
//! for the full block. All checks run in 64-bit with central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cca::{
    assemble_tokens, assemble_tokens_backward, cca_backward, cca_forward, cca_forward_cached,
    reassemble_spatial, reassemble_spatial_backward, CcaConfig, CcaParams, KeyMerge, TokenLayout,
};
use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{Error, Result};
use crate::gcfc::{gcfc_backward, gcfc_forward_cached, min_score_margin, score_maps, GcfcParams, KeyFeatureSet};
use crate::gradcheck::{grad_check, GradReport};
use crate::lcfe::{lcfe_backward, lcfe_forward, lcfe_forward_cached, LcfeParams};
use crate::matrix::{
    layer_norm, layer_norm_backward, layer_norm_cached, linear, linear_backward, LayerNorm, Linear,
    Matrix,
};
use crate::params::Parameters;
use crate::tensor::{sigmoid, sigmoid_backward, softmax_channels, softmax_channels_backward, Position, Tensor};
use crate::transformer::{
    encoder_block, encoder_block_backward, encoder_block_cached, multi_head_attention,
    multi_head_attention_backward, multi_head_attention_cached, Attention, EncoderBlock,
};

/// Default tolerance for every stage.
pub const TOLERANCE: f64 = 1e-5;

/// Minimum top-1/top-2 gap required of every score map before the argmax
/// path is differentiated numerically.
pub const MIN_SCORE_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub report: GradReport,
}

impl StageReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Values that can be flattened for finite differencing and rebuilt with
/// the same shape.
pub trait Flat: Clone {
    fn values(&self) -> Vec<f64>;
    fn with_values(&self, values: &[f64]) -> Self;
}

impl Flat for Tensor<f64> {
    fn values(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    fn with_values(&self, values: &[f64]) -> Self {
        Tensor::new(self.dims(), values.to_vec()).expect("same length")
    }
}

impl Flat for Matrix<f64> {
    fn values(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    fn with_values(&self, values: &[f64]) -> Self {
        Matrix::new(self.rows(), self.cols(), values.to_vec()).expect("same length")
    }
}

/// Placeholder for parameter-free stages.
#[derive(Debug, Clone, Default)]
pub struct NoParams;

impl Parameters<f64> for NoParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        Vec::new()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        Vec::new()
    }
}

fn loss_weights<Y: Flat>(y: &Y, seed: u64) -> Y {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = y.values().len();
    let w = Matrix::<f64>::uniform(1, n, 1.0, &mut rng);
    y.with_values(w.data())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks one stage `y = forward(x, params)` under the loss `Σ y ⊙ R` for a
/// fixed random `R`. `backward(x, params, R)` returns `(grad_x, grad_params)`.
pub fn check_stage<X, Y, P, F, B>(
    stage: &str,
    x: &X,
    params: &P,
    seed: u64,
    tolerance: f64,
    forward: F,
    backward: B,
) -> Result<StageReport>
where
    X: Flat,
    Y: Flat,
    P: Parameters<f64> + Clone,
    F: Fn(&X, &P) -> Result<Y>,
    B: Fn(&X, &P, &Y) -> Result<(X, P)>,
{
    let weights = loss_weights(&forward(x, params)?, seed);
    let w = weights.values();
    let mut inputs = vec![("input".to_string(), x.values())];
    inputs.extend(params.tensors().into_iter().map(|(n, t)| (n, t.to_vec())));

    let rebuild = |values: &[Vec<f64>]| -> (X, P) {
        let xi = x.with_values(&values[0]);
        let mut p = params.clone();
        let flat: Vec<f64> = values[1..].iter().flatten().copied().collect();
        p.load_flat(&flat);
        (xi, p)
    };
    let report = grad_check(
        |values, want| {
            let (xi, p) = rebuild(values);
            let loss = dot(&forward(&xi, &p)?.values(), &w);
            if !want {
                return Ok((loss, vec![]));
            }
            let (gx, gp) = backward(&xi, &p, &weights)?;
            let mut grads = vec![gx.values()];
            grads.extend(gp.tensors().into_iter().map(|(_, t)| t.to_vec()));
            Ok((loss, grads))
        },
        &inputs,
        tolerance,
    )?;
    Ok(StageReport {
        stage: stage.to_string(),
        report,
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn check_conv(rate: usize, stride: usize, seed: u64) -> Result<StageReport> {
    let mut r = rng(seed);
    let spec = ConvSpec::<f64>::new(2, 3, 3, stride, rate, rate).with_uniform(&mut r);
    let x = Tensor::uniform([1, 2, 6, 6], 1.0, &mut r);
    check_stage(
        &format!("conv2d r={rate} s={stride}"),
        &x,
        &spec,
        seed,
        TOLERANCE,
        conv2d,
        |x, p, g| {
            let grads = conv2d_backward(x, p, g)?;
            let mut gp = p.zeros_like();
            grads.accumulate_into(&mut gp)?;
            Ok((grads.input, gp))
        },
    )
}

pub fn check_sigmoid(seed: u64) -> Result<StageReport> {
    let x = Tensor::<f64>::uniform([1, 2, 4, 4], 4.0, &mut rng(seed));
    check_stage(
        "sigmoid",
        &x,
        &NoParams,
        seed,
        TOLERANCE,
        |x, _| Ok(sigmoid(x)),
        |x, _, g| Ok((sigmoid_backward(&sigmoid(x), g)?, NoParams)),
    )
}

pub fn check_softmax(seed: u64) -> Result<StageReport> {
    let x = Tensor::<f64>::uniform([2, 3, 3, 3], 3.0, &mut rng(seed));
    check_stage(
        "softmax_channels",
        &x,
        &NoParams,
        seed,
        TOLERANCE,
        |x, _| softmax_channels(x),
        |x, _, g| Ok((softmax_channels_backward(&softmax_channels(x)?, g)?, NoParams)),
    )
}

pub fn check_linear(width: usize, seed: u64) -> Result<StageReport> {
    let mut r = rng(seed);
    let layer = Linear::<f64>::uniform(width, width + 2, &mut r);
    let x = Matrix::uniform(5, width, 1.0, &mut r);
    check_stage(
        "linear",
        &x,
        &layer,
        seed,
        TOLERANCE,
        linear,
        |x, p, g| {
            let mut gp = p.zeros_like();
            let gx = linear_backward(x, p, g, &mut gp)?;
            Ok((gx, gp))
        },
    )
}

pub fn check_layer_norm(width: usize, eps: f64, seed: u64) -> Result<StageReport> {
    let mut r = rng(seed);
    let mut ln = LayerNorm::<f64>::new(width, eps);
    ln.gamma = Matrix::<f64>::uniform(1, width, 1.0, &mut r).data().iter().map(|v| v + 1.0).collect();
    ln.beta = Matrix::<f64>::uniform(1, width, 1.0, &mut r).data().to_vec();
    let x = Matrix::uniform(4, width, 2.0, &mut r);
    check_stage(
        "layer_norm",
        &x,
        &ln,
        seed,
        TOLERANCE,
        layer_norm,
        |x, p, g| {
            let (_, cache) = layer_norm_cached(x, p)?;
            let mut gp = p.zeros_like();
            let gx = layer_norm_backward(p, &cache, g, &mut gp)?;
            Ok((gx, gp))
        },
    )
}

pub fn check_attention(width: usize, heads: usize, tokens: usize, seed: u64) -> Result<StageReport> {
    let mut r = rng(seed);
    let shape = crate::transformer::EncoderShape {
        width,
        heads,
        layers: 1,
        ffn_mult: 1,
        positional_encoding: false,
        ln_eps: 1e-5,
    };
    let attn = EncoderBlock::<f64>::uniform(&shape, &mut r).attention;
    let x = Matrix::uniform(tokens, width, 1.0, &mut r);
    check_stage(
        "multi_head_attention",
        &x,
        &attn,
        seed,
        TOLERANCE,
        |x, p| multi_head_attention(x, p, heads),
        |x, p: &Attention<f64>, g| {
            let (_, cache) = multi_head_attention_cached(x, p, heads)?;
            let mut gp = p.zeros_like();
            let gx = multi_head_attention_backward(p, heads, &cache, g, &mut gp)?;
            Ok((gx, gp))
        },
    )
}

pub fn check_encoder_block(config: &CcaConfig, tokens: usize, seed: u64) -> Result<StageReport> {
    let mut r = rng(seed);
    let block = EncoderBlock::<f64>::uniform(&config.encoder_shape(), &mut r);
    let x = Matrix::uniform(tokens, config.c_mid, 1.0, &mut r);
    let heads = config.heads;
    check_stage(
        "encoder_block",
        &x,
        &block,
        seed,
        TOLERANCE,
        |x, p| encoder_block(x, p, heads),
        |x, p: &EncoderBlock<f64>, g| {
            let (_, cache) = encoder_block_cached(x, p, heads)?;
            let mut gp = p.zeros_like();
            let gx = encoder_block_backward(p, heads, &cache, g, &mut gp)?;
            Ok((gx, gp))
        },
    )
}

pub fn check_lcfe(config: &CcaConfig, size: usize, seed: u64) -> Result<StageReport> {
    let mut r = rng(seed);
    let params = LcfeParams::<f64>::uniform(config.c_mid, config.dilation_rates, &mut r);
    let x = Tensor::uniform([1, config.c_mid, size, size], 1.0, &mut r);
    check_stage(
        "lcfe",
        &x,
        &params,
        seed,
        TOLERANCE,
        lcfe_forward,
        |x, p, g| {
            let (_, cache) = lcfe_forward_cached(x, p)?;
            let mut gp = p.zeros_like();
            let gx = lcfe_backward(x, p, &cache, g, &mut gp)?;
            Ok((gx, gp))
        },
    )
}

fn stack_features(keys: &[KeyFeatureSet<f64>]) -> Result<Matrix<f64>> {
    let c = keys.first().map_or(0, |k| k.features.cols());
    let rows: usize = keys.iter().map(|k| k.len()).sum();
    let data = keys.iter().flat_map(|k| k.features.data().iter().copied()).collect();
    Matrix::new(rows, c, data)
}

fn unstack_features(m: &Matrix<f64>, batch: usize) -> Vec<Matrix<f64>> {
    let n = m.rows() / batch.max(1);
    (0..batch)
        .map(|b| m.select_rows(&(b * n..(b + 1) * n).collect::<Vec<_>>()))
        .collect()
}

/// Draws `(input, params)` from successive seeds until every score map has a
/// top-1/top-2 gap of at least [`MIN_SCORE_MARGIN`].
fn gcfc_instance(
    channels: usize,
    n_keys: usize,
    size: usize,
    seed: u64,
) -> Result<(Tensor<f64>, GcfcParams<f64>)> {
    for attempt in 0..1000 {
        let mut r = rng(seed.wrapping_add(attempt));
        let params = GcfcParams::<f64>::uniform(channels, n_keys, &mut r);
        let x = Tensor::uniform([2, channels, size, size], 1.0, &mut r);
        if min_score_margin(&score_maps(&x, &params)?) >= MIN_SCORE_MARGIN {
            return Ok((x, params));
        }
    }
    Err(Error::Config("no unique-maxima GCFC instance found".into()))
}

pub fn check_gcfc(config: &CcaConfig, size: usize, seed: u64) -> Result<StageReport> {
    let (x, params) = gcfc_instance(config.c_mid, config.n_keys, size, seed)?;
    let batch = x.batch();
    check_stage(
        "gcfc",
        &x,
        &params,
        seed,
        TOLERANCE,
        |x, p| {
            let (keys, _) = gcfc_forward_cached(x, p)?;
            stack_features(&keys)
        },
        |x, p, g| {
            let (keys, cache) = gcfc_forward_cached(x, p)?;
            let mut gp = p.zeros_like();
            let gx = gcfc_backward(x, p, &cache, &keys, &unstack_features(g, batch), &mut gp)?;
            Ok((gx, gp))
        },
    )
}

/// Key features treated as a differentiable input of the token plumbing.
#[derive(Debug, Clone)]
struct KeyRows(Vec<Matrix<f64>>);

impl Parameters<f64> for KeyRows {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("keys[{i}]"), m.data()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0
            .iter_mut()
            .enumerate()
            .map(|(i, m)| (format!("keys[{i}]"), m.data_mut()))
            .collect()
    }
}

/// Assemble → scale tokens → reassemble, with repeated key positions so the
/// merge rule is exercised.
pub fn check_token_plumbing(merge: KeyMerge, seed: u64) -> Result<StageReport> {
    let mut r = rng(seed);
    let c = 3;
    let f_lc = Tensor::<f64>::uniform([2, c, 3, 4], 1.0, &mut r);
    let positions = vec![Position::new(1, 2), Position::new(3, 0), Position::new(1, 2)];
    let keys = KeyRows((0..2).map(|_| Matrix::uniform(3, c, 1.0, &mut r)).collect());
    let token_scale = Matrix::<f64>::uniform(15, c, 2.0, &mut r);
    let sets = |k: &KeyRows| -> Vec<KeyFeatureSet<f64>> {
        k.0.iter()
            .map(|m| KeyFeatureSet {
                positions: positions.clone(),
                raw_scores: vec![0.0; positions.len()],
                features: m.clone(),
            })
            .collect()
    };
    let scale = |t: &Matrix<f64>| -> Matrix<f64> {
        Matrix::from_fn(t.rows(), t.cols(), |i, j| t.at(i, j) * token_scale.at(i, j))
    };
    check_stage(
        &format!("token assembly ({merge})"),
        &f_lc,
        &keys,
        seed,
        TOLERANCE,
        |x, k| {
            let (tokens, layouts): (Vec<Matrix<f64>>, Vec<TokenLayout>) =
                assemble_tokens(x, &sets(k))?.into_iter().unzip();
            let scaled: Vec<Matrix<f64>> = tokens.iter().map(scale).collect();
            reassemble_spatial(&scaled, &layouts, merge)
        },
        |x, k, g| {
            let layouts: Vec<TokenLayout> = assemble_tokens(x, &sets(k))?.into_iter().map(|(_, l)| l).collect();
            let g_tokens: Vec<Matrix<f64>> = reassemble_spatial_backward(g, &layouts, merge)?
                .iter()
                .map(scale)
                .collect();
            let (gx, gk) = assemble_tokens_backward(&g_tokens, &layouts)?;
            Ok((gx, KeyRows(gk)))
        },
    )
}

/// Draws `(input, params)` for the full block until the score maps have
/// unique maxima with margin.
pub fn cca_instance(
    config: &CcaConfig,
    dims: [usize; 4],
    seed: u64,
) -> Result<(Tensor<f64>, CcaParams<f64>)> {
    for attempt in 0..1000 {
        let s = seed.wrapping_add(attempt);
        let params = CcaParams::<f64>::init(config, s)?;
        let x = Tensor::uniform(dims, 1.0, &mut rng(s ^ 0xf00d));
        let (_, cache) = cca_forward_cached(&x, &params)?;
        if config.n_keys == 0 || min_score_margin(&cache.gcfc.scores) >= MIN_SCORE_MARGIN {
            return Ok((x, params));
        }
    }
    Err(Error::Config("no unique-maxima CCA instance found".into()))
}

pub fn check_cca(config: &CcaConfig, dims: [usize; 4], seed: u64) -> Result<StageReport> {
    let (x, params) = cca_instance(config, dims, seed)?;
    check_stage(
        "cca_forward",
        &x,
        &params,
        seed,
        TOLERANCE,
        cca_forward,
        |x, p, g| {
            let (_, cache) = cca_forward_cached(x, p)?;
            cca_backward(x, p, &cache, g)
        },
    )
}

/// Names of every stage [`gradient_suite`] must report.
pub const SUITE_STAGES: &[&str] = &[
    "conv2d r=1 s=1",
    "conv2d r=2 s=1",
    "conv2d r=3 s=1",
    "conv2d r=1 s=2",
    "sigmoid",
    "softmax_channels",
    "linear",
    "layer_norm",
    "multi_head_attention",
    "encoder_block",
    "lcfe",
    "gcfc",
    "token assembly (add)",
    "token assembly (overwrite)",
    "cca_forward",
];

/// Runs every stage check for `config` with the full block on an input of
/// `1 × c_in × size × size`.
pub fn gradient_suite(config: &CcaConfig, size: usize, seed: u64) -> Result<Vec<StageReport>> {
    config.validate()?;
    let mut out = Vec::new();
    for rate in 1..=3 {
        out.push(check_conv(rate, 1, seed)?);
    }
    out.push(check_conv(1, 2, seed)?);
    out.push(check_sigmoid(seed)?);
    out.push(check_softmax(seed)?);
    out.push(check_linear(config.c_mid, seed)?);
    out.push(check_layer_norm(config.c_mid, config.ln_eps, seed)?);
    out.push(check_attention(config.c_mid, config.heads, 5, seed)?);
    out.push(check_encoder_block(config, 4, seed)?);
    let (rh, _) = config.reduced_hw(size, size)?;
    out.push(check_lcfe(config, rh.max(3), seed)?);
    out.push(check_gcfc(config, rh.max(2), seed)?);
    out.push(check_token_plumbing(KeyMerge::Add, seed)?);
    out.push(check_token_plumbing(KeyMerge::Overwrite, seed)?);
    out.push(check_cca(config, [1, config.c_in, size, size], seed)?);
    Ok(out)
}

/// Stage names expected by [`SUITE_STAGES`] that `reports` does not cover.
pub fn missing_stages(reports: &[StageReport]) -> Vec<&'static str> {
    SUITE_STAGES
        .iter()
        .copied()
        .filter(|s| !reports.iter().any(|r| r.stage == *s))
        .collect()
}

//! Global context feature collection.
//!
//! A 1×1 convolution predicts `n` importance-score maps. The global maximum
//! of each map gives a key location and a raw score; the feature vector of
//! `f1` at that location is gated by `sigmoid(score)`. Key sets are computed
//! independently per batch element, and distinct maps may select the same
//! location.

use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{shape_err, Result};
use crate::matrix::Matrix;
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{global_max_pool_argmax, sigmoid_scalar, MaxPool, Position, Tensor};

pub const DEFAULT_KEYS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GcfcParams<T> {
    /// 1×1, C → n.
    pub score: ConvSpec<T>,
}

impl<T: Scalar> GcfcParams<T> {
    pub fn zeros(channels: usize, n_keys: usize) -> Self {
        Self {
            score: ConvSpec::new(channels, n_keys, 1, 1, 0, 1),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(channels: usize, n_keys: usize, rng: &mut R) -> Self {
        Self {
            score: ConvSpec::new(channels, n_keys, 1, 1, 0, 1).with_uniform(rng),
        }
    }

    pub fn n_keys(&self) -> usize {
        self.score.out_channels
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            score: self.score.zeros_like(),
        }
    }
}

impl<T: Scalar> Parameters<T> for GcfcParams<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        prefixed("score", self.score.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        prefixed_mut("score", self.score.tensors_mut()).collect()
    }
}

/// Key features collected for one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyFeatureSet<T> {
    pub positions: Vec<Position>,
    pub raw_scores: Vec<T>,
    /// n × C; row `i` is `f1[:, y_i, x_i] · sigmoid(score_i)`.
    pub features: Matrix<T>,
}

impl<T: Scalar> KeyFeatureSet<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// The `n` importance maps `S_1..S_n` stacked on the channel axis.
pub fn score_maps<T: Scalar>(f1: &Tensor<T>, params: &GcfcParams<T>) -> Result<Tensor<T>> {
    conv2d(f1, &params.score)
}

pub fn collect_keys<T: Scalar>(f1: &Tensor<T>, scores: &Tensor<T>) -> Result<Vec<KeyFeatureSet<T>>> {
    collect_keys_pooled(f1, scores).map(|(keys, _)| keys)
}

fn collect_keys_pooled<T: Scalar>(
    f1: &Tensor<T>,
    scores: &Tensor<T>,
) -> Result<(Vec<KeyFeatureSet<T>>, MaxPool<T>)> {
    let [b, c, h, w] = f1.dims();
    let [sb, n, sh, sw] = scores.dims();
    if (sb, sh, sw) != (b, h, w) {
        return shape_err(
            "collect_keys",
            format!("score maps {:?} for features {:?}", scores.dims(), f1.dims()),
        );
    }
    let pool = global_max_pool_argmax(scores)?;
    let keys = (0..b)
        .map(|batch| {
            let positions: Vec<Position> = (0..n).map(|i| pool.position(batch, i)).collect();
            let raw_scores: Vec<T> = (0..n).map(|i| pool.score(batch, i)).collect();
            let features = Matrix::from_fn(n, c, |i, ch| {
                let p = positions[i];
                f1.at(batch, ch, p.y, p.x) * sigmoid_scalar(raw_scores[i])
            });
            KeyFeatureSet {
                positions,
                raw_scores,
                features,
            }
        })
        .collect();
    Ok((keys, pool))
}

#[derive(Debug, Clone)]
pub struct GcfcCache<T> {
    pub scores: Tensor<T>,
    pub pool: MaxPool<T>,
}

pub fn gcfc_forward<T: Scalar>(f1: &Tensor<T>, params: &GcfcParams<T>) -> Result<Vec<KeyFeatureSet<T>>> {
    gcfc_forward_cached(f1, params).map(|(k, _)| k)
}

pub fn gcfc_forward_cached<T: Scalar>(
    f1: &Tensor<T>,
    params: &GcfcParams<T>,
) -> Result<(Vec<KeyFeatureSet<T>>, GcfcCache<T>)> {
    let scores = score_maps(f1, params)?;
    let (keys, pool) = collect_keys_pooled(f1, &scores)?;
    Ok((keys, GcfcCache { scores, pool }))
}

/// Backward through the gather-and-gate step.
///
/// Returns `(grad_f1, grad_scores)`. The score gradient is non-zero only at
/// each map's argmax; positions carry no gradient.
pub fn collect_keys_backward<T: Scalar>(
    f1: &Tensor<T>,
    scores: &Tensor<T>,
    keys: &[KeyFeatureSet<T>],
    grad_features: &[Matrix<T>],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, _, _] = f1.dims();
    let n = scores.channels();
    if keys.len() != b || grad_features.len() != b {
        return shape_err("collect_keys_backward", "one key set per batch element required");
    }
    let mut grad_f1 = Tensor::zeros(f1.dims());
    let mut grad_scores = Tensor::zeros(scores.dims());
    for batch in 0..b {
        let g = &grad_features[batch];
        if (g.rows(), g.cols()) != (n, c) {
            return shape_err(
                "collect_keys_backward",
                format!("feature gradient {}×{} for {n} keys of width {c}", g.rows(), g.cols()),
            );
        }
        let set = &keys[batch];
        for i in 0..n {
            let p = set.positions[i];
            let s = sigmoid_scalar(set.raw_scores[i]);
            let mut dot = T::zero();
            for ch in 0..c {
                let gv = g.at(i, ch);
                dot += gv * f1.at(batch, ch, p.y, p.x);
                *grad_f1.at_mut(batch, ch, p.y, p.x) += gv * s;
            }
            *grad_scores.at_mut(batch, i, p.y, p.x) += dot * s * (T::one() - s);
        }
    }
    Ok((grad_f1, grad_scores))
}

/// Returns the gradient for `f1` and accumulates parameter gradients into `grads`.
pub fn gcfc_backward<T: Scalar>(
    f1: &Tensor<T>,
    params: &GcfcParams<T>,
    cache: &GcfcCache<T>,
    keys: &[KeyFeatureSet<T>],
    grad_features: &[Matrix<T>],
    grads: &mut GcfcParams<T>,
) -> Result<Tensor<T>> {
    let (mut grad_f1, grad_scores) = collect_keys_backward(f1, &cache.scores, keys, grad_features)?;
    let conv = conv2d_backward(f1, &params.score, &grad_scores)?;
    conv.accumulate_into(&mut grads.score)?;
    grad_f1.add_assign(&conv.input)?;
    Ok(grad_f1)
}

/// Gap between the largest and second-largest value of every score map,
/// minimized over maps and batch elements. Gradient checks need this to be
/// well above the finite-difference step so the argmax cannot move.
pub fn min_score_margin<T: Scalar>(scores: &Tensor<T>) -> f64 {
    let [b, n, _, _] = scores.dims();
    let mut margin = f64::INFINITY;
    for batch in 0..b {
        for i in 0..n {
            let mut first = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &v in scores.plane(batch, i) {
                let v = v.as_f64();
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            margin = margin.min(first - second);
        }
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_scores_from_bias() {
        let mut p = GcfcParams::<f64>::zeros(3, 2);
        p.score.bias = vec![1.5, -2.0];
        let f1 = Tensor::uniform([1, 3, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let s = score_maps(&f1, &p).unwrap();
        assert!(s.plane(0, 0).iter().all(|&v| v == 1.5));
        assert!(s.plane(0, 1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn selector_kernel_copies_channel() {
        let mut p = GcfcParams::<f64>::zeros(3, 1);
        p.score.weight.data_mut()[0] = 1.0;
        let f1 = Tensor::uniform([2, 3, 4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let s = score_maps(&f1, &p).unwrap();
        for n in 0..2 {
            assert_eq!(s.plane(n, 0), f1.plane(n, 0));
        }
    }

    #[test]
    fn single_spike_gates_with_sigmoid() {
        let f1 = Tensor::<f64>::full([1, 3, 5, 5], 1.0);
        let mut s = Tensor::zeros([1, 1, 5, 5]);
        *s.at_mut(0, 0, 3, 2) = 5.0;
        let keys = collect_keys(&f1, &s).unwrap();
        assert_eq!(keys[0].positions, vec![Position::new(2, 3)]);
        assert_eq!(keys[0].raw_scores, vec![5.0]);
        for &v in keys[0].features.row(0) {
            assert!((v - 0.993_307).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_spikes_in_channel_order() {
        let f1 = Tensor::<f64>::full([1, 2, 6, 6], 1.0);
        let corners = [(0, 0), (5, 0), (0, 5), (5, 5)];
        let mut s = Tensor::zeros([1, 4, 6, 6]);
        for (i, &(x, y)) in corners.iter().enumerate() {
            *s.at_mut(0, i, y, x) = 2.0;
        }
        let keys = collect_keys(&f1, &s).unwrap();
        let expected: Vec<Position> = corners.iter().map(|&(x, y)| Position::new(x, y)).collect();
        assert_eq!(keys[0].positions, expected);
    }

    #[test]
    fn score_gradient_vanishes_off_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = Tensor::<f64>::uniform([2, 3, 5, 5], 1.0, &mut rng);
        let s = Tensor::<f64>::uniform([2, 4, 5, 5], 1.0, &mut rng);
        let keys = collect_keys(&f1, &s).unwrap();
        let g: Vec<Matrix<f64>> = (0..2).map(|_| Matrix::uniform(4, 3, 1.0, &mut rng)).collect();
        let (_, gs) = collect_keys_backward(&f1, &s, &keys, &g).unwrap();
        for n in 0..2 {
            for i in 0..4 {
                let p = keys[n].positions[i];
                for y in 0..5 {
                    for x in 0..5 {
                        if (x, y) != (p.x, p.y) {
                            assert_eq!(gs.at(n, i, y, x), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let f1 = Tensor::<f64>::zeros([1, 2, 4, 4]);
        assert!(collect_keys(&f1, &Tensor::zeros([1, 1, 4, 5])).is_err());
        assert!(score_maps(&f1, &GcfcParams::zeros(3, 2)).is_err());
    }
}

//! Local context feature enhancement.
//!
//! Three 3×3 dilated convolutions (rates 1, 2, 3 by default, padding equal to
//! the rate so all branches keep the input extent) produce `F1..F3`. The
//! branches are concatenated, reduced to three channels by a 1×1
//! convolution, mixed by a 3×3 convolution and turned into per-pixel fusion
//! weights by a channel softmax. The output is `w1⊙F1 + w2⊙F2 + w3⊙F3`,
//! each single-channel weight map broadcast across channels.

use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{shape_err, Result};
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{
    concat_channels, mul_channel_broadcast, softmax_channels, softmax_channels_backward,
    split_channels, Tensor,
};

pub const BRANCHES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LcfeParams<T> {
    pub branches: [ConvSpec<T>; BRANCHES],
    /// 1×1, 3C → 3.
    pub reduce: ConvSpec<T>,
    /// 3×3, 3 → 3, padding 1.
    pub mix: ConvSpec<T>,
}

impl<T: Scalar> LcfeParams<T> {
    /// Zero-initialized parameters for `channels` wide features.
    pub fn zeros(channels: usize, rates: [usize; BRANCHES]) -> Self {
        Self {
            branches: rates.map(|r| ConvSpec::new(channels, channels, 3, 1, r, r)),
            reduce: ConvSpec::new(BRANCHES * channels, BRANCHES, 1, 1, 0, 1),
            mix: ConvSpec::new(BRANCHES, BRANCHES, 3, 1, 1, 1),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(channels: usize, rates: [usize; BRANCHES], rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, rates);
        for b in &mut p.branches {
            b.init_uniform(rng);
        }
        p.reduce.init_uniform(rng);
        p.mix.init_uniform(rng);
        p
    }

    pub fn channels(&self) -> usize {
        self.branches[0].in_channels
    }

    pub fn rates(&self) -> [usize; BRANCHES] {
        [0, 1, 2].map(|i| self.branches[i].dilation)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for b in &self.branches {
            if b.in_channels != c || b.out_channels != c || b.kernel != (3, 3) || b.stride != 1 {
                return shape_err("lcfe", "branches must be 3×3, stride 1, C→C");
            }
            if b.padding != b.dilation {
                return shape_err("lcfe", "branch padding must equal its dilation rate");
            }
        }
        if self.reduce.in_channels != BRANCHES * c || self.reduce.out_channels != BRANCHES {
            return shape_err("lcfe", "reduce conv must map 3C → 3 channels");
        }
        if self.mix.in_channels != BRANCHES || self.mix.out_channels != BRANCHES {
            return shape_err("lcfe", "mix conv must map 3 → 3 channels");
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            branches: self.branches.clone().map(|b| b.zeros_like()),
            reduce: self.reduce.zeros_like(),
            mix: self.mix.zeros_like(),
        }
    }
}

impl<T: Scalar> Parameters<T> for LcfeParams<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            out.extend(prefixed(&format!("branch{}", i + 1), b.tensors()));
        }
        out.extend(prefixed("reduce", self.reduce.tensors()));
        out.extend(prefixed("mix", self.mix.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("branch{}", i + 1), b.tensors_mut()));
        }
        out.extend(prefixed_mut("reduce", self.reduce.tensors_mut()));
        out.extend(prefixed_mut("mix", self.mix.tensors_mut()));
        out
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LcfeCache<T> {
    pub branch_outputs: [Tensor<T>; BRANCHES],
    pub concat: Tensor<T>,
    pub reduced: Tensor<T>,
    pub softmax: Tensor<T>,
    pub weights: [Tensor<T>; BRANCHES],
}

fn fusion_weights_cached<T: Scalar>(
    f: &[Tensor<T>; BRANCHES],
    params: &LcfeParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, [Tensor<T>; BRANCHES])> {
    if f[0].dims() != f[1].dims() || f[0].dims() != f[2].dims() {
        return shape_err(
            "fusion_weights",
            format!(
                "branch maps {:?}, {:?}, {:?}",
                f[0].dims(),
                f[1].dims(),
                f[2].dims()
            ),
        );
    }
    let concat = concat_channels(&[&f[0], &f[1], &f[2]])?;
    let reduced = conv2d(&concat, &params.reduce)?;
    let mixed = conv2d(&reduced, &params.mix)?;
    let softmax = softmax_channels(&mixed)?;
    let mut parts = split_channels(&softmax, BRANCHES)?.into_iter();
    let weights = [0; BRANCHES].map(|_| parts.next().expect("three groups"));
    Ok((concat, reduced, softmax, weights))
}

/// Per-pixel fusion weights `(w1, w2, w3)`, each a single-channel map.
pub fn fusion_weights<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    f3: &Tensor<T>,
    params: &LcfeParams<T>,
) -> Result<[Tensor<T>; BRANCHES]> {
    let branches = [f1.clone(), f2.clone(), f3.clone()];
    fusion_weights_cached(&branches, params).map(|(_, _, _, w)| w)
}

pub fn branch_outputs<T: Scalar>(
    f1: &Tensor<T>,
    params: &LcfeParams<T>,
) -> Result<[Tensor<T>; BRANCHES]> {
    params.validate()?;
    let a = conv2d(f1, &params.branches[0])?;
    let b = conv2d(f1, &params.branches[1])?;
    let c = conv2d(f1, &params.branches[2])?;
    Ok([a, b, c])
}

pub fn lcfe_forward<T: Scalar>(f1: &Tensor<T>, params: &LcfeParams<T>) -> Result<Tensor<T>> {
    lcfe_forward_cached(f1, params).map(|(y, _)| y)
}

pub fn lcfe_forward_cached<T: Scalar>(
    f1: &Tensor<T>,
    params: &LcfeParams<T>,
) -> Result<(Tensor<T>, LcfeCache<T>)> {
    let branch_outputs = branch_outputs(f1, params)?;
    let (concat, reduced, softmax, weights) = fusion_weights_cached(&branch_outputs, params)?;
    let mut out = Tensor::zeros(f1.dims());
    for (f, w) in branch_outputs.iter().zip(&weights) {
        out.add_assign(&mul_channel_broadcast(f, w)?)?;
    }
    Ok((
        out,
        LcfeCache {
            branch_outputs,
            concat,
            reduced,
            softmax,
            weights,
        },
    ))
}

/// Returns the gradient for `f1` and accumulates parameter gradients into `grads`.
pub fn lcfe_backward<T: Scalar>(
    f1: &Tensor<T>,
    params: &LcfeParams<T>,
    cache: &LcfeCache<T>,
    upstream: &Tensor<T>,
    grads: &mut LcfeParams<T>,
) -> Result<Tensor<T>> {
    if upstream.dims() != f1.dims() {
        return shape_err("lcfe_backward", "upstream does not match input dims");
    }
    let [b, c, h, w] = f1.dims();
    let hw = h * w;

    // Direct path through the weighting, and the gradient of each weight map.
    let mut grad_branches = [0; BRANCHES].map(|_| Tensor::zeros(f1.dims()));
    let mut grad_weights = [0; BRANCHES].map(|_| Tensor::zeros([b, 1, h, w]));
    for i in 0..BRANCHES {
        grad_branches[i] = mul_channel_broadcast(upstream, &cache.weights[i])?;
        let f = &cache.branch_outputs[i];
        let gw = grad_weights[i].data_mut();
        for n in 0..b {
            for ch in 0..c {
                let start = (n * c + ch) * hw;
                let fp = &f.data()[start..start + hw];
                let gp = &upstream.data()[start..start + hw];
                for p in 0..hw {
                    gw[n * hw + p] += fp[p] * gp[p];
                }
            }
        }
    }

    let grad_softmax = concat_channels(&[&grad_weights[0], &grad_weights[1], &grad_weights[2]])?;
    let grad_mixed = softmax_channels_backward(&cache.softmax, &grad_softmax)?;
    let mix = conv2d_backward(&cache.reduced, &params.mix, &grad_mixed)?;
    mix.accumulate_into(&mut grads.mix)?;
    let reduce = conv2d_backward(&cache.concat, &params.reduce, &mix.input)?;
    reduce.accumulate_into(&mut grads.reduce)?;
    for (gb, part) in grad_branches
        .iter_mut()
        .zip(split_channels(&reduce.input, BRANCHES)?)
    {
        gb.add_assign(&part)?;
    }

    let mut grad_input = Tensor::zeros(f1.dims());
    for i in 0..BRANCHES {
        let g = conv2d_backward(f1, &params.branches[i], &grad_branches[i])?;
        g.accumulate_into(&mut grads.branches[i])?;
        grad_input.add_assign(&g.input)?;
    }
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_fusion_convs_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = LcfeParams::<f64>::uniform(4, [1, 2, 3], &mut rng);
        p.reduce = p.reduce.zeros_like();
        p.mix = p.mix.zeros_like();
        let x = Tensor::uniform([1, 4, 6, 6], 1.0, &mut rng);
        let [a, b, c] = branch_outputs(&x, &p).unwrap();
        for w in fusion_weights(&a, &b, &c, &p).unwrap() {
            assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let y = lcfe_forward(&x, &p).unwrap();
        let mean = a.add(&b).unwrap().add(&c).unwrap().scale(1.0 / 3.0);
        assert!(y.max_abs_diff(&mean) < 1e-14);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LcfeParams::<f64>::uniform(3, [1, 2, 3], &mut rng);
        for b in &mut p.branches {
            b.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let y = lcfe_forward(&Tensor::zeros([2, 3, 5, 5]), &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_sum_to_one_and_shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LcfeParams::<f32>::uniform(4, [1, 2, 3], &mut rng);
        let x = Tensor::uniform([2, 4, 7, 5], 3.0, &mut rng);
        let (y, cache) = lcfe_forward_cached(&x, &p).unwrap();
        assert_eq!(y.dims(), x.dims());
        for i in 0..y.len() / 4 {
            let n = i / 35;
            let p = i % 35;
            let s: f32 = cache.weights.iter().map(|w| w.data()[n * 35 + p]).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn mismatched_branches_are_rejected() {
        let p = LcfeParams::<f64>::zeros(2, [1, 2, 3]);
        let a = Tensor::zeros([1, 2, 4, 4]);
        let b = Tensor::zeros([1, 2, 4, 5]);
        assert!(fusion_weights(&a, &a, &b, &p).is_err());
        assert!(lcfe_forward(&Tensor::zeros([1, 3, 4, 4]), &p).is_err());
    }

    #[test]
    fn rate_three_branch_sees_seven_by_seven() {
        let mut p = LcfeParams::<f64>::zeros(1, [1, 2, 3]);
        p.branches[2].weight.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut x = Tensor::zeros([1, 1, 15, 15]);
        *x.at_mut(0, 0, 7, 7) = 1.0;
        let [_, _, f3] = branch_outputs(&x, &p).unwrap();
        let support: Vec<(usize, usize)> = (0..15)
            .flat_map(|y| (0..15).map(move |x| (y, x)))
            .filter(|&(y, xx)| f3.at(0, 0, y, xx) != 0.0)
            .collect();
        let ys: Vec<usize> = support.iter().map(|s| s.0).collect();
        let xs: Vec<usize> = support.iter().map(|s| s.1).collect();
        assert_eq!(support.len(), 9);
        assert_eq!(ys.iter().max().unwrap() - ys.iter().min().unwrap() + 1, 7);
        assert_eq!(xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1, 7);
    }
}

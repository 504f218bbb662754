//! Toy training demo on synthetic scenes.
//!
//! Each scene is a noise feature map with a few planted high-energy square
//! patches. A 1×1 objectness head on the block output is trained with
//! binary cross-entropy against the patch mask by plain gradient descent,
//! and the key locations chosen by the global-context stage are traced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cca::{cca_backward, cca_forward_cached, CcaConfig, CcaParams};
use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::{Position, Tensor};

/// A square patch with top-left corner `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl Patch {
    pub fn center(&self) -> Position {
        Position::new(self.x + (self.side - 1) / 2, self.y + (self.side - 1) / 2)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.side).contains(&x) && (self.y..self.y + self.side).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene<T> {
    /// 1 × C × H × W.
    pub features: Tensor<T>,
    pub patches: Vec<Patch>,
    /// 1 × 1 × H × W; 1 exactly on patch pixels.
    pub mask: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patches: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Half-width of the uniform background noise.
    pub noise: f64,
    /// Magnitude of the random-sign patch texture.
    pub amplitude: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            channels: 16,
            height: 16,
            width: 16,
            patches: 2,
            min_side: 3,
            max_side: 4,
            noise: 0.1,
            amplitude: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_side == 0 || self.min_side > self.max_side {
            return Err(Error::Config(format!(
                "patch side range {}..={} is empty",
                self.min_side, self.max_side
            )));
        }
        if self.max_side > self.height || self.max_side > self.width {
            return Err(Error::Config(format!(
                "patch side {} does not fit a {}×{} map",
                self.max_side, self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("scenes need at least one channel".into()));
        }
        Ok(())
    }
}

/// Places patches so they do not overlap when possible, then draws the
/// background noise and the patch texture.
pub fn generate_scene<T: Scalar, R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<SyntheticScene<T>> {
    spec.validate()?;
    let mut patches: Vec<Patch> = Vec::with_capacity(spec.patches);
    for _ in 0..spec.patches {
        let mut candidate = None;
        for _ in 0..100 {
            let side = rng.gen_range(spec.min_side..=spec.max_side);
            let p = Patch {
                x: rng.gen_range(0..=spec.width - side),
                y: rng.gen_range(0..=spec.height - side),
                side,
            };
            let separated = patches.iter().all(|q| {
                p.x > q.x + q.side
                    || q.x > p.x + p.side
                    || p.y > q.y + q.side
                    || q.y > p.y + p.side
            });
            candidate = Some(p);
            if separated {
                break;
            }
        }
        patches.extend(candidate);
    }
    let dims = [1, spec.channels, spec.height, spec.width];
    let mut features = Tensor::zeros(dims);
    for v in features.data_mut() {
        *v = T::from_f64(rng.gen_range(-spec.noise..=spec.noise));
    }
    let mut mask = Tensor::zeros([1, 1, spec.height, spec.width]);
    for p in &patches {
        for y in p.y..p.y + p.side {
            for x in p.x..p.x + p.side {
                *mask.at_mut(0, 0, y, x) = T::one();
                for c in 0..spec.channels {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    *features.at_mut(0, c, y, x) = T::from_f64(sign * spec.amplitude);
                }
            }
        }
    }
    Ok(SyntheticScene {
        features,
        patches,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub block: CcaConfig,
    pub scene: SceneSpec,
    pub scenes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Chebyshev radius (input pixels) for a key to count as on a patch.
    pub hit_radius: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            block: CcaConfig::default(),
            scene: SceneSpec::default(),
            scenes: 8,
            epochs: 200,
            learning_rate: 0.1,
            hit_radius: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoResult {
    /// Mean BCE per epoch, evaluated before that epoch's update.
    pub losses: Vec<f64>,
    /// `keys[epoch][scene]` in input-pixel coordinates.
    pub keys: Vec<Vec<Vec<Position>>>,
    pub patches: Vec<Vec<Patch>>,
}

impl DemoResult {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Fraction of final-epoch keys within `radius` of a patch center of
    /// their scene.
    pub fn final_hit_fraction(&self, radius: usize) -> f64 {
        let Some(last) = self.keys.last() else {
            return 0.0;
        };
        let (mut hits, mut total) = (0usize, 0usize);
        for (keys, patches) in last.iter().zip(&self.patches) {
            for k in keys {
                total += 1;
                if patches.iter().any(|p| p.center().chebyshev(*k) <= radius) {
                    hits += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

/// Averages the mask over each `s × s` cell so targets align with the
/// block's output grid.
fn target_at_output<T: Scalar>(mask: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [_, _, h, w] = mask.dims();
    let sy = h.div_ceil(out_h);
    let sx = w.div_ceil(out_w);
    Tensor::from_fn([1, 1, out_h, out_w], |_, _, oy, ox| {
        let (mut sum, mut count) = (0.0, 0usize);
        for y in oy * sy..((oy + 1) * sy).min(h) {
            for x in ox * sx..((ox + 1) * sx).min(w) {
                sum += mask.at(0, 0, y, x).as_f64();
                count += 1;
            }
        }
        T::from_f64(if count == 0 { 0.0 } else { sum / count as f64 })
    })
}

/// Mean binary cross-entropy with logits and its gradient w.r.t. the logits.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits.zip_with(target, "bce_with_logits", |z, t| {
        let zf = z.as_f64();
        let tf = t.as_f64();
        let p = 1.0 / (1.0 + (-zf).exp());
        T::from_f64((p - tf) / n)
    })?;
    for (&z, &t) in logits.data().iter().zip(target.data()) {
        let z = z.as_f64();
        loss += z.max(0.0) - z * t.as_f64() + (-z.abs()).exp().ln_1p();
    }
    Ok((loss / n, grad))
}

/// Trains the block plus a 1×1 objectness head on `config.scenes` scenes
/// drawn from `seed`, full batch.
pub fn demo_train<T: Scalar>(config: &DemoConfig, seed: u64) -> Result<DemoResult> {
    config.block.validate()?;
    if config.scene.channels != config.block.c_in {
        return Err(Error::Config(format!(
            "scene channels {} differ from block input channels {}",
            config.scene.channels, config.block.c_in
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<SyntheticScene<T>> = (0..config.scenes)
        .map(|_| generate_scene(&config.scene, &mut rng))
        .collect::<Result<_>>()?;
    let mut params = CcaParams::<T>::init(&config.block, seed)?;
    let mut head = ConvSpec::<T>::new(config.block.c_out, 1, 1, 1, 0, 1).with_uniform(&mut rng);

    let b = scenes.len();
    let [_, c, h, w] = [1, config.scene.channels, config.scene.height, config.scene.width];
    let mut input = Tensor::zeros([b, c, h, w]);
    let plane = c * h * w;
    for (i, s) in scenes.iter().enumerate() {
        input.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(s.features.data());
    }
    let out_dims = config.block.output_dims(input.dims())?;
    let (oh, ow) = (out_dims[2], out_dims[3]);
    let mut target = Tensor::zeros([b, 1, oh, ow]);
    for (i, s) in scenes.iter().enumerate() {
        let t = target_at_output(&s.mask, oh, ow);
        target.data_mut()[i * oh * ow..(i + 1) * oh * ow].copy_from_slice(t.data());
    }
    let stride = config.block.stride;
    let lr = T::from_f64(config.learning_rate);

    let mut losses = Vec::with_capacity(config.epochs);
    let mut keys = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (features, cache) = cca_forward_cached(&input, &params)?;
        let logits = conv2d(&features, &head)?;
        let (loss, grad_logits) = bce_with_logits(&logits, &target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        losses.push(loss);
        keys.push(
            cache
                .keys
                .iter()
                .map(|set| {
                    set.positions
                        .iter()
                        .map(|p| Position::new(p.x * stride, p.y * stride))
                        .collect()
                })
                .collect(),
        );
        let head_grads = conv2d_backward(&features, &head, &grad_logits)?;
        let (_, block_grads) = cca_backward(&input, &params, &cache, &head_grads.input)?;
        let mut hg = head.zeros_like();
        head_grads.accumulate_into(&mut hg)?;
        head.sgd_step(&hg, lr);
        params.sgd_step(&block_grads, lr);
    }
    Ok(DemoResult {
        losses,
        keys,
        patches: scenes.into_iter().map(|s| s.patches).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DemoConfig {
        DemoConfig {
            scenes: 2,
            epochs: 5,
            ..DemoConfig::default()
        }
    }

    #[test]
    fn scene_mask_marks_exactly_patch_pixels() {
        let spec = SceneSpec::default();
        let s: SyntheticScene<f64> = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.patches.len(), 2);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let inside = s.patches.iter().any(|p| p.contains(x, y));
                assert_eq!(s.mask.at(0, 0, y, x) == 1.0, inside);
                assert!(s.mask.at(0, 0, y, x) == 0.0 || inside);
            }
        }
        for p in &s.patches {
            assert!(p.x + p.side <= spec.width && p.y + p.side <= spec.height);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let cfg = DemoConfig {
            learning_rate: 0.0,
            ..small()
        };
        let r = demo_train::<f64>(&cfg, 3).unwrap();
        assert!(r.losses.windows(2).all(|w| w[0] == w[1]), "{:?}", r.losses);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let cfg = DemoConfig {
            learning_rate: 1e300,
            ..small()
        };
        match demo_train::<f64>(&cfg, 1) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        let z = Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let t = Tensor::new([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let (loss, g) = bce_with_logits::<f64>(&z, &t).unwrap();
        let expected = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((g.data()[0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn mismatched_channels_are_rejected() {
        let mut cfg = small();
        cfg.scene.channels = 3;
        assert!(matches!(demo_train::<f32>(&cfg, 0), Err(Error::Config(_))));
    }
}

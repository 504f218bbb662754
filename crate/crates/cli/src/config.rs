//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to the default listed in [`KEYS`]; unknown keys
//! are rejected.

use std::path::Path;
use std::str::FromStr;

use cca_core::{CcaConfig, DType, DemoConfig, Interpolation, KeyMerge, SceneSpec};

use crate::error::{CliError, Result};

/// How block parameters are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Seeded uniform `±1/sqrt(fan_in)`.
    Uniform,
    /// Seeded draw, then every weight buffer zeroed (biases kept).
    ZeroWeights,
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "zero-weights" => Ok(Self::ZeroWeights),
            other => Err(format!("unknown init `{other}` (expected uniform or zero-weights)")),
        }
    }
}

/// IoU thresholds for `eval-map`.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(pub Vec<f64>);

impl FromStr for Thresholds {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "coco" {
            return Ok(Self(cca_core::metrics::coco_thresholds()));
        }
        let values = s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("threshold `{v}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if values.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err("thresholds must lie in [0, 1]".into());
        }
        Ok(Self(values))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub block: CcaConfig,
    pub init: InitMode,
    pub seed: u64,
    pub dtype: DType,
    pub interpolation: Interpolation,
    pub thresholds: Thresholds,
    pub gradcheck_size: usize,
    pub demo: DemoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            block: CcaConfig::default(),
            init: InitMode::Uniform,
            seed: 0,
            dtype: DType::F32,
            interpolation: Interpolation::AllPoints,
            thresholds: Thresholds(cca_core::metrics::coco_thresholds()),
            gradcheck_size: 8,
            demo: DemoConfig::default(),
        }
    }
}

/// Every accepted key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("c_in", "16"),
    ("c_mid", "8"),
    ("c_out", "16"),
    ("n_keys", "4"),
    ("dilation_rates", "1,2,3"),
    ("stride", "2"),
    ("heads", "4"),
    ("layers", "1"),
    ("ffn_mult", "4"),
    ("positional_encoding", "false"),
    ("ln_eps", "1e-5"),
    ("key_merge", "add"),
    ("zero_bias", "false"),
    ("init", "uniform"),
    ("seed", "0"),
    ("dtype", "f32"),
    ("interpolation", "all-points"),
    ("thresholds", "coco"),
    ("gradcheck_size", "8"),
    ("demo_epochs", "200"),
    ("demo_scenes", "8"),
    ("demo_learning_rate", "0.1"),
    ("demo_size", "16"),
    ("demo_patches", "2"),
    ("demo_min_side", "3"),
    ("demo_max_side", "4"),
    ("demo_noise", "0.1"),
    ("demo_amplitude", "1.0"),
    ("demo_hit_radius", "2"),
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String>
where
    V::Err: std::fmt::Display,
{
    value
        .parse::<V>()
        .map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_rates(value: &str) -> std::result::Result<[usize; 3], String> {
    let rates = value
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("dilation rate `{v}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    rates
        .try_into()
        .map_err(|r: Vec<usize>| format!("expected 3 dilation rates, got {}", r.len()))
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let b = &mut self.block;
        let d = &mut self.demo;
        match key {
            "c_in" => {
                b.c_in = parse_value(key, value)?;
                d.scene.channels = b.c_in;
            }
            "c_mid" => b.c_mid = parse_value(key, value)?,
            "c_out" => b.c_out = parse_value(key, value)?,
            "n_keys" => b.n_keys = parse_value(key, value)?,
            "dilation_rates" => b.dilation_rates = parse_rates(value)?,
            "stride" => b.stride = parse_value(key, value)?,
            "heads" => b.heads = parse_value(key, value)?,
            "layers" => b.layers = parse_value(key, value)?,
            "ffn_mult" => b.ffn_mult = parse_value(key, value)?,
            "positional_encoding" => b.positional_encoding = parse_value(key, value)?,
            "ln_eps" => b.ln_eps = parse_value(key, value)?,
            "key_merge" => b.key_merge = parse_value::<KeyMerge>(key, value)?,
            "zero_bias" => b.zero_bias = parse_value(key, value)?,
            "init" => self.init = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "dtype" => self.dtype = parse_value(key, value)?,
            "interpolation" => self.interpolation = parse_value(key, value)?,
            "thresholds" => self.thresholds = parse_value(key, value)?,
            "gradcheck_size" => self.gradcheck_size = parse_value(key, value)?,
            "demo_epochs" => d.epochs = parse_value(key, value)?,
            "demo_scenes" => d.scenes = parse_value(key, value)?,
            "demo_learning_rate" => d.learning_rate = parse_value(key, value)?,
            "demo_size" => {
                let s: usize = parse_value(key, value)?;
                d.scene.height = s;
                d.scene.width = s;
            }
            "demo_patches" => d.scene.patches = parse_value(key, value)?,
            "demo_min_side" => d.scene.min_side = parse_value(key, value)?,
            "demo_max_side" => d.scene.max_side = parse_value(key, value)?,
            "demo_noise" => d.scene.noise = parse_value(key, value)?,
            "demo_amplitude" => d.scene.amplitude = parse_value(key, value)?,
            "demo_hit_radius" => d.hit_radius = parse_value(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| CliError::Parse {
                context: context.to_string(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.demo.block = cfg.block.clone();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Semantic checks beyond parsing.
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.gradcheck_size == 0 {
            return Err(CliError::Validation("gradcheck_size must be positive".into()));
        }
        Ok(())
    }

    /// The scene spec used by `gen-synthetic` and `demo-train`.
    pub fn scene(&self) -> &SceneSpec {
        &self.demo.scene
    }

    /// Renders every key with its current value; parsing the result yields
    /// an equal configuration.
    pub fn render(&self) -> String {
        let b = &self.block;
        let d = &self.demo;
        let r = b.dilation_rates;
        let thresholds: Vec<String> = self.thresholds.0.iter().map(|t| t.to_string()).collect();
        let init = match self.init {
            InitMode::Uniform => "uniform",
            InitMode::ZeroWeights => "zero-weights",
        };
        [
            format!("c_in = {}", b.c_in),
            format!("c_mid = {}", b.c_mid),
            format!("c_out = {}", b.c_out),
            format!("n_keys = {}", b.n_keys),
            format!("dilation_rates = {},{},{}", r[0], r[1], r[2]),
            format!("stride = {}", b.stride),
            format!("heads = {}", b.heads),
            format!("layers = {}", b.layers),
            format!("ffn_mult = {}", b.ffn_mult),
            format!("positional_encoding = {}", b.positional_encoding),
            format!("ln_eps = {:e}", b.ln_eps),
            format!("key_merge = {}", b.key_merge),
            format!("zero_bias = {}", b.zero_bias),
            format!("init = {init}"),
            format!("seed = {}", self.seed),
            format!("dtype = {}", self.dtype.name()),
            format!("interpolation = {}", self.interpolation),
            format!("thresholds = {}", thresholds.join(",")),
            format!("gradcheck_size = {}", self.gradcheck_size),
            format!("demo_epochs = {}", d.epochs),
            format!("demo_scenes = {}", d.scenes),
            format!("demo_learning_rate = {:e}", d.learning_rate),
            format!("demo_size = {}", d.scene.height),
            format!("demo_patches = {}", d.scene.patches),
            format!("demo_min_side = {}", d.scene.min_side),
            format!("demo_max_side = {}", d.scene.max_side),
            format!("demo_noise = {:e}", d.scene.noise),
            format!("demo_amplitude = {:e}", d.scene.amplitude),
            format!("demo_hit_radius = {}", d.hit_radius),
        ]
        .join("\n")
            + "\n"
    }
}

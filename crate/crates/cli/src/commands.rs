//! Subcommand implementations. Every command writes its report to the
//! supplied writer so it can be driven in-process.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use cca_core::cca::{cca_forward_cached, flop_count, param_count, Accounting, CcaParams};
use cca_core::demo::{demo_train, generate_scene};
use cca_core::metrics::{evaluate, map_at};
use cca_core::verify::{gradient_suite, missing_stages};
use cca_core::{DType, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{load_detections, load_ground_truth};
use crate::config::{InitMode, RunConfig, Thresholds};
use crate::error::{CliError, Result};
use crate::tensor_file::{self, AnyTensor};

#[derive(Debug, Parser)]
#[command(name = "cca", version, about = "Cross-scale context aggregation block: kernels, checks and metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured numeric mode.
    #[arg(long, global = true)]
    pub dtype: Option<DType>,
    /// Output file (forward, gen-synthetic) or directory (demo-train).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the block on a tensor file and write the output tensor.
    Forward { input: PathBuf },
    /// Gradient-check every stage and the full block in 64-bit.
    Gradcheck,
    /// Per-stage parameter counts.
    Params,
    /// Per-stage FLOPs for an input of the given extent.
    Flops {
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Per-class AP and mAP from detection and ground-truth text files.
    EvalMap {
        detections: PathBuf,
        ground_truth: PathBuf,
        /// `coco` or a comma-separated list; overrides the configuration.
        #[arg(long)]
        thresholds: Option<Thresholds>,
    },
    /// Train the toy objectness demo and write loss and key traces.
    DemoTrain {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Write one synthetic scene as a tensor file.
    GenSynthetic {
        /// Also write the objectness mask here.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::io("<output>", e)
}

macro_rules! outln {
    ($out:expr) => {
        writeln!($out).map_err(stdout_err)?
    };
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(stdout_err)?
    };
}

/// Loads the configuration and applies the global flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dtype) = cli.dtype {
        cfg.dtype = dtype;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_out(cli: &Cli, what: &str) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{what} requires --out")))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Forward { input } => forward(&cfg, input, &required_out(cli, "forward")?, out),
        Command::Gradcheck => gradcheck(&cfg, out),
        Command::Params => {
            let acc = param_count(&cfg.block);
            accounting_table("parameters", &acc, out)
        }
        Command::Flops { batch, height, width } => {
            let acc = flop_count(&cfg.block, [*batch, cfg.block.c_in, *height, *width])?;
            accounting_table("FLOPs", &acc, out)
        }
        Command::EvalMap {
            detections,
            ground_truth,
            thresholds,
        } => eval_map(&cfg, detections, ground_truth, thresholds.as_ref().unwrap_or(&cfg.thresholds), out),
        Command::DemoTrain { epochs, learning_rate } => {
            let mut cfg = cfg.clone();
            if let Some(e) = epochs {
                cfg.demo.epochs = *e;
            }
            if let Some(lr) = learning_rate {
                cfg.demo.learning_rate = *lr;
            }
            match cfg.dtype {
                DType::F32 => demo::<f32>(&cfg, cli.out.as_deref(), out),
                DType::F64 => demo::<f64>(&cfg, cli.out.as_deref(), out),
            }
        }
        Command::GenSynthetic { mask } => {
            let path = required_out(cli, "gen-synthetic")?;
            match cfg.dtype {
                DType::F32 => synthetic::<f32>(&cfg, &path, mask.as_deref(), out),
                DType::F64 => synthetic::<f64>(&cfg, &path, mask.as_deref(), out),
            }
        }
    }
}

/// Block parameters for `cfg` in the requested element type.
pub fn build_params<T: Scalar>(cfg: &RunConfig) -> Result<CcaParams<T>> {
    let mut params = CcaParams::<T>::init(&cfg.block, cfg.seed)?;
    if cfg.init == InitMode::ZeroWeights {
        params.zero_weights();
    }
    Ok(params)
}

fn forward(cfg: &RunConfig, input: &Path, output: &Path, out: &mut dyn Write) -> Result<()> {
    let x = tensor_file::load(input)?;
    if x.dims()[1] != cfg.block.c_in {
        return Err(CliError::Validation(format!(
            "input has {} channels, configuration expects c_in = {}",
            x.dims()[1],
            cfg.block.c_in
        )));
    }
    let dtype = x.dtype();
    let y = match dtype {
        DType::F32 => AnyTensor::F32(forward_typed(cfg, &x.to_f32(), out)?),
        DType::F64 => AnyTensor::F64(forward_typed(cfg, &x.to_f64(), out)?),
    };
    tensor_file::save(output, &y)?;
    let [n, c, h, w] = y.dims();
    outln!(out, "wrote {} ({n}×{c}×{h}×{w}, {})", output.display(), dtype.name());
    Ok(())
}

fn forward_typed<T: Scalar>(cfg: &RunConfig, x: &Tensor<T>, out: &mut dyn Write) -> Result<Tensor<T>> {
    let params = build_params::<T>(cfg)?;
    let (y, cache) = cca_forward_cached(x, &params)?;
    outln!(out, "{:<16} {}", "stage", "shape");
    for (stage, shape) in cache.stage_shapes(y.dims()) {
        outln!(out, "{stage:<16} {shape}");
    }
    outln!(out);
    outln!(out, "{:<6} {:<4} {:<10} {:>14}", "batch", "key", "position", "score");
    for (b, set) in cache.keys.iter().enumerate() {
        for (i, (p, s)) in set.positions.iter().zip(&set.raw_scores).enumerate() {
            outln!(out, "{b:<6} {i:<4} {:<10} {:>14.6e}", p.to_string(), s.as_f64());
        }
    }
    Ok(y)
}

fn accounting_table(what: &str, acc: &Accounting, out: &mut dyn Write) -> Result<()> {
    outln!(out, "{:<10} {:>14}", "stage", what);
    for s in &acc.stages {
        outln!(out, "{:<10} {:>14}", s.stage, s.value);
    }
    outln!(out, "{:<10} {:>14}", "total", acc.total());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let reports = gradient_suite(&cfg.block, cfg.gradcheck_size, cfg.seed)?;
    outln!(out, "{:<28} {:>8} {:>14} {:>8}", "stage", "inputs", "max rel err", "result");
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed();
        failed += usize::from(!ok);
        outln!(
            out,
            "{:<28} {:>8} {:>14.3e} {:>8}",
            r.stage,
            r.report.inputs.len(),
            r.report.max_rel_error(),
            if ok { "pass" } else { "FAIL" }
        );
    }
    let missing = missing_stages(&reports);
    for m in &missing {
        outln!(out, "{m:<28} {:>8} {:>14} {:>8}", "-", "-", "MISSING");
    }
    let tolerance = reports.first().map_or(0.0, |r| r.report.tolerance);
    outln!(out, "tolerance {tolerance:e}; {} of {} stages passed", reports.len() - failed, reports.len());
    if failed > 0 || !missing.is_empty() {
        return Err(CliError::Validation(format!(
            "{failed} stage(s) failed, {} missing",
            missing.len()
        )));
    }
    Ok(())
}

fn eval_map(
    cfg: &RunConfig,
    det_path: &Path,
    gt_path: &Path,
    thresholds: &Thresholds,
    out: &mut dyn Write,
) -> Result<()> {
    let dets = load_detections(det_path)?;
    let gts = load_ground_truth(gt_path)?;
    let thresholds = &thresholds.0;
    if thresholds.is_empty() {
        return Err(CliError::Validation("no IoU thresholds given".into()));
    }
    let first = thresholds[0];
    outln!(out, "IoU threshold {first:.2}, {} interpolation", cfg.interpolation);
    outln!(
        out,
        "{:>6} {:>6} {:>6} {:>5} {:>5} {:>5} {:>10} {:>10} {:>10}",
        "class", "n_gt", "n_det", "tp", "fp", "fn", "precision", "recall", "AP"
    );
    for c in evaluate(&dets, &gts, first, cfg.interpolation) {
        outln!(
            out,
            "{:>6} {:>6} {:>6} {:>5} {:>5} {:>5} {:>10.6} {:>10.6} {:>10.6}",
            c.class_id,
            c.n_gt,
            c.n_det,
            c.true_positives,
            c.false_positives,
            c.false_negatives,
            c.precision(),
            c.recall(),
            c.ap
        );
    }
    let mut total = 0.0;
    for &t in thresholds {
        let m = map_at(&dets, &gts, t, cfg.interpolation)?;
        total += m;
        outln!(out, "mAP@{t:.2} = {m:.6}");
    }
    if thresholds.len() > 1 {
        outln!(
            out,
            "mAP@[{:.2}:{:.2}] = {:.6}",
            thresholds[0],
            thresholds[thresholds.len() - 1],
            total / thresholds.len() as f64
        );
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn demo<T: Scalar>(cfg: &RunConfig, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let result = demo_train::<T>(&cfg.demo, cfg.seed)?;
    let mut losses = String::from("# epoch loss\n");
    for (e, l) in result.losses.iter().enumerate() {
        losses += &format!("{e} {l:.9e}\n");
    }
    let mut keys = String::from("# epoch scene key x y\n");
    for (e, scenes) in result.keys.iter().enumerate() {
        for (s, ks) in scenes.iter().enumerate() {
            for (i, p) in ks.iter().enumerate() {
                keys += &format!("{e} {s} {i} {} {}\n", p.x, p.y);
            }
        }
    }
    let mut patches = String::from("# scene x y side center_x center_y\n");
    for (s, ps) in result.patches.iter().enumerate() {
        for p in ps {
            let c = p.center();
            patches += &format!("{s} {} {} {} {} {}\n", p.x, p.y, p.side, c.x, c.y);
        }
    }
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_text(&dir.join("loss_trace.txt"), &losses)?;
        write_text(&dir.join("key_trace.txt"), &keys)?;
        write_text(&dir.join("patches.txt"), &patches)?;
        outln!(out, "wrote traces to {}", dir.display());
    }
    outln!(out, "epochs         {}", result.losses.len());
    outln!(out, "initial loss   {:.6}", result.initial_loss());
    outln!(out, "final loss     {:.6}", result.final_loss());
    outln!(
        out,
        "keys on patches {:.3} (Chebyshev ≤ {})",
        result.final_hit_fraction(cfg.demo.hit_radius),
        cfg.demo.hit_radius
    );
    Ok(())
}

fn synthetic<T: Scalar>(cfg: &RunConfig, path: &Path, mask: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = generate_scene::<T, _>(cfg.scene(), &mut rng)?;
    let to_any = |t: Tensor<T>| -> AnyTensor {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    };
    tensor_file::save(path, &to_any(scene.features.clone()))?;
    if let Some(m) = mask {
        tensor_file::save(m, &to_any(scene.mask.clone()))?;
    }
    outln!(out, "{:<6} {:>4} {:>4} {:>5} {:>8}", "patch", "x", "y", "side", "center");
    for (i, p) in scene.patches.iter().enumerate() {
        outln!(out, "{i:<6} {:>4} {:>4} {:>5} {:>8}", p.x, p.y, p.side, p.center().to_string());
    }
    let [n, c, h, w] = scene.features.dims();
    outln!(out, "wrote {} ({n}×{c}×{h}×{w})", path.display());
    Ok(())
}

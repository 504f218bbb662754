//! Cross-scale context aggregation: a convolution block that mixes local
//! multi-dilation features with a few globally selected key locations
//! through a small transformer encoder, plus the detection metrics used to
//! evaluate it.
//!
//! Every kernel is generic over [`Scalar`] (`f32` for production runs, `f64`
//! for verification) and ships with an analytic backward pass.

pub mod cca;
pub mod demo;
pub mod conv;
pub mod error;
pub mod gcfc;
pub mod gradcheck;
pub mod lcfe;
pub mod matrix;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod transformer;
pub mod verify;

pub use cca::{
    cca_backward, cca_forward, cca_forward_cached, flop_count, param_count, Accounting, CcaCache,
    CcaConfig, CcaParams, KeyMerge, StageCount,
};
pub use conv::{conv2d, conv2d_backward, conv2d_direct, ConvSpec};
pub use error::{Error, Result};
pub use gcfc::{gcfc_forward, GcfcParams, KeyFeatureSet};
pub use gradcheck::{grad_check, GradReport};
pub use lcfe::{lcfe_forward, LcfeParams};
pub use matrix::{Matrix, TokenMatrix};
pub use metrics::{
    average_precision, evaluate, iou, map_at, map_range, match_detections, mean_ap, pr_curve, BBox,
    DetectionBox, GroundTruthBox, Interpolation,
};
pub use params::Parameters;
pub use scalar::{DType, Scalar};
pub use tensor::{Dims, Position, Tensor};
pub use demo::{demo_train, generate_scene, DemoConfig, DemoResult, SceneSpec, SyntheticScene};

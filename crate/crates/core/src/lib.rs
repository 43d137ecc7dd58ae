//! Perturbation-based evaluation of saliency maps for image classifiers.
//!
//! The crate covers the full pipeline: masking images by saliency rank,
//! perturbation alternatives, a small differentiable CNN, gradient-based
//! importance estimators, MiF/LiF accuracy-degradation curves with an
//! artifact bound from shifted masks, and a crop-and-rescale metric.

pub mod crop;
pub mod error;
pub mod estimators;
pub mod fidelity;
pub mod model;
pub mod perturbation;
pub mod seed;
pub mod tensor;

pub use crop::{crop_metric_eval, CropReport, Rect, RegionMethod};
pub use error::{Error, Result};
pub use estimators::{compute_saliency, Estimator, EstimatorConfig};
pub use fidelity::{
    area_above, artifact_bound, degradation_curve, fidelity_report, run_fidelity,
    shifted_degradation_curve, AccuracyCurve, CurveSet, FidelityReport, FidelityRow,
    FidelitySettings, ShiftConfig,
};
pub use model::{AnyModel, Classifier, ConvNet, LinearModel, ScoreKind};
pub use perturbation::{calibrate_blur_sigma, Perturbation};
pub use tensor::{Dataset, Dims, Direction, Image, LabeledSample, Mask, SaliencyMap, Tensor};

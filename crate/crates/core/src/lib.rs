//! Loss functions, evaluation metrics and validation statistics for
//! multi-class volumetric segmentation.
//!
//! The crate is organised around a handful of voxel-grid types ([`LabelVolume`],
//! [`BinaryMask`], [`ProbVolume`]) and pure functions over them:
//!
//! * [`losses`]: cross-entropy, soft Dice, DiceCE, top-k cross-entropy and the
//!   epoch-scheduled Dice/top-k blend, all with analytic gradients.
//! * [`metrics`]: Dice, normalized surface distance, sensitivity, specificity
//!   and voxel-level AUC, plus per-case and cohort reports.
//! * [`stats`]: Spearman rank correlation with exact and t-approximation p-values.
//! * [`posthoc`]: ensemble variance and Grad-CAM aggregation.
//! * [`volio`]: MetaImage-style volume I/O, PFT tables, report writers and
//!   synthetic phantoms.
//!
//! Probability-valued math is generic over [`Scalar`] (`f32` or `f64`); geometry
//! (spacings, surface coordinates, distances) is always `f64` millimetres.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod posthoc;
pub mod scalar;
pub mod stats;
pub mod volgrid;
pub mod volio;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use volgrid::{BinaryMask, ClassTable, ConfusionCounts, Dims, LabelVolume, ProbVolume, VoxelSpacing};

pub type ProbVolume64 = volgrid::ProbVolume<f64>;
pub type ProbVolume32 = volgrid::ProbVolume<f32>;
pub type LossValue64 = losses::LossValue<f64>;
pub type LossValue32 = losses::LossValue<f32>;
pub type Ensemble64 = posthoc::Ensemble<f64>;
pub type VarianceSummary64 = posthoc::VarianceSummary<f64>;
pub type FeatureTensor64 = posthoc::FeatureTensor<f64>;
pub type Heatmap64 = posthoc::Heatmap<f64>;

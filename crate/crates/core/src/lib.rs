//! Temporal-mask annotation for dynamic SLAM.
//!
//! Given a black-box evaluator that runs a SLAM system on a sequence under a
//! per-frame, per-class masking schedule and reports trajectory error and
//! tracking rate, this crate computes the schedule that maximizes the unified
//! SLAM metric `USM = TR · exp(-λ · ATE)`:
//!
//! 1. [`mask_space`] draws masks uniformly from the run-length constrained
//!    space `E(l, k0, k1)`.
//! 2. [`evaluation`] benchmarks each mask (repetitions, median, caching,
//!    parallel scheduling, subprocess protocol).
//! 3. [`aggregation`] folds the scored samples into a score field, binarizes
//!    it at several thresholds and keeps the best candidate.
//!
//! [`sim`] provides a deterministic synthetic evaluator with a known optimal
//! mask, and [`pipeline`] ties the stages together for the `tempmask` CLI.

pub mod aggregation;
pub mod evaluation;
pub mod mask;
pub mod mask_space;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod sim;
pub mod seed;

pub use mask::{MaskError, TemporalMask};
pub use mask_space::{
    build_count_table, count_masks, is_member, sample_mask, sample_multiclass, MaskSpaceError,
    MaskSpaceParams, PathCountTable,
};
pub use evaluation::{EvaluationError, EvaluationRecord, Evaluator, EvaluatorKind, EvaluatorSpec};
pub use metrics::{
    associate, ate_rmse, default_lambda, parse_trajectory, tracking_rate, usm, Alignment,
    EvalResult, MetricsError, Pose, Trajectory, UsmParams,
};
pub use pipeline::{annotate, AnnotationConfig, AnnotationReport, PipelineError};

//! Depth compression toolkit for a small decoder-only transformer.
//!
//! The crate provides the full pipeline used by the `swm` CLI:
//!
//! - [`tensor`] — dense f32 matrices with deterministic 64-bit reductions
//! - [`model`] — the toy transformer, synthetic-redundancy generation, and
//!   the bit-exact `SWM1` model file format
//! - [`calib`] — token-sequence calibration sets (JSON-lines on disk)
//! - [`cka`] — centered-kernel-alignment layer similarity and heatmap export
//! - [`merge`] — the delete / average / diff layer-merge strategies
//! - [`swm`] — the sliding-window merging engine, plan files, and threshold search
//! - [`width`] — structured head/channel pruning and the combined depth+width pipeline
//! - [`eval`] — perplexity, latency/throughput benchmarking, threshold sweeps,
//!   and calibration-robustness measurement

pub mod calib;
pub mod cka;
pub mod eval;
pub mod merge;
pub mod model;
pub mod rng;
pub mod swm;
pub mod tensor;
pub mod width;

pub use calib::{CalibError, CalibSet};
pub use cka::{center, cka, gram, layer_cka_matrix, ActivationMatrix, CkaError, CkaMatrix};
pub use merge::{apply_merge, merge_params, MergeError, MergeStrategy, MergeWindow};
pub use model::{synthesize, HiddenTrace, LayerParams, Model, ModelConfig, ModelError, PatchSpec};
pub use swm::{
    calibration_similarity, compress, find_threshold, load_plan, replay_plan, save_plan,
    CommitPolicy, MergePlan, Pooling, SwmConfig, SwmError, SwmLog,
};
pub use tensor::{cosine, Matrix, TensorError};
pub use width::{
    head_importance, pipeline, width_prune, PipelineReport, WidthError, WidthPruneConfig,
};

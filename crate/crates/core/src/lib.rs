//! Whole-slide image tiling, tile-level classifier training, slide-level
//! inference and Grad-CAM for histopathology slides, at desk scale.
//!
//! The crate is organised as a pipeline:
//!
//! - [`slide_io`]: pyramidal slide containers and polygon annotations
//! - [`tiler`]: grid planning, annotation gating, QC and tile preprocessing
//! - [`augment`]: seeded photometric augmentation
//! - [`dataset`]: slide holdout, class balancing, stratified splits, cohorts
//! - [`nn`]: a small CNN with exact gradients, Adam and two-phase training
//! - [`metrics`]: confusion matrices, scores, ROC/AUROC
//! - [`inference`]: slide-level aggregation and heatmap grids
//! - [`gradcam`]: class activation maps and overlays
//! - [`report`]: PNG/CSV/JSON artifacts
//! - [`pipeline`]: config-driven subcommands used by the `tileforge` binary
//!
//! Runnable walkthroughs for each stage live in `examples/`.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod gradcam;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod slide_io;
pub mod synth;
pub mod tiler;

pub use tiler::ClassLabel;

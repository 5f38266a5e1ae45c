//! Volumetric gross-tumor-volume (GTV) segmentation toolkit.
//!
//! The crate implements a complete desk-scale segmentation pipeline for
//! esophageal GTV delineation from planning CT (pCT), optionally fused with
//! PET aligned through a diagnostic-CT deformable registration front-end:
//!
//! - [`volcore`]: 3D volume/mask data model, trilinear sampling, resampling,
//!   and the header+raw interchange file format shared by every module.
//! - [`phantom`]: deterministic synthetic thoracic phantoms with known
//!   ground-truth tumors, deformations, and metadata tags.
//! - [`register`]: lung-mass-center rigid initialization plus a
//!   dense-displacement-sampling deformable registration used to map PET
//!   onto the pCT grid.
//! - [`nnet`]: a minimal dense tensor engine with hand-written reverse-mode
//!   gradients for 3D convolution, batch norm, pooling, trilinear
//!   upsampling, and a Dice+BCE loss, with Nesterov SGD.
//! - [`models`]: the progressive semantically-nested segmentation network
//!   (PSNN) and the pCT-only / early-fusion / late-fusion variants.
//! - [`pipeline`]: VOI sampling, augmentation, four-fold cross-validation,
//!   ensembling, and sliding-window whole-volume inference.
//! - [`evalx`]: DSC / HD95 / ASD metrics, the revision-degree proxy, and
//!   cohort summaries.
//! - [`stats`]: Wilcoxon signed-rank, Mann-Whitney U, Spearman, chi-square,
//!   t-based confidence intervals, and stepwise linear regression.
//! - [`report`]: dependency-free SVG boxplots and scatter plots.
//! - [`cli`]: the `gtvseg` command-line front end wiring the modules into
//!   reproducible, manifest-stamped runs.
//!
//! Every operation is deterministic under a fixed seed; see the `examples/`
//! directory for one runnable program per capability.

pub mod cli;
pub mod error;
pub mod evalx;
pub mod models;
pub mod nnet;
pub mod phantom;
pub mod pipeline;
pub mod register;
pub mod report;
pub mod stats;
pub mod volcore;

pub use error::{Error, Result};

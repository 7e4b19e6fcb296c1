//! Multi-view separation of object appearance into highlight, albedo and
//! shading layers.
//!
//! A set of roughly aligned views of one object is decomposed as
//! `I = H + A * S` by directly minimizing scale-invariant low-rank losses
//! computed over a per-cell sorted color representation, followed by a
//! contrastive joint refinement. The crate also ships a synthetic scene
//! generator with exact ground truth and the metrics used to score results.

pub mod colordist;
pub mod decomposer;
pub mod error;
pub mod image;
pub mod lowrank;
pub mod manifest;
pub mod metrics;
mod optim;
pub mod sidecar;
pub mod synthgen;

pub use colordist::{scatter_gradient, reorder_transform, CellLayout, DistVector, GridSpec};

pub use decomposer::{
    decompose, init_variables, objective, phase_h, phase_joint, phase_s, DecompResult, DecompVariables,
    Evaluation, OptimConfig, Phase, PhaseTrace,
};
pub use error::{Error, Result};
pub use image::{
    albedo_from_shading, chromaticity, compose, load_image, load_mask, median_chroma_match,
    save_image, save_mask, ChromaticityMap, ImageSet, LayerDecomposition, LinearImage, PixelMask,
};
pub use lowrank::{
    albedo_silr_loss, chroma_silr_loss, contrastive_objective, silr, stack, ChainedLoss,
    ContrastiveLoss, LossReport, StackMatrix,
};


pub use manifest::{GroundTruthFiles, SetManifest, MANIFEST_FILE};
pub use metrics::{dssim, evaluate, lmse, mse, si_mse, ImageMetrics, LayerMetrics, MetricReport};
pub use synthgen::{make_set, render_view, RenderedView, SceneSpec, SyntheticSet, ViewSpec};

//! Topology-preserving training stack for tubular-structure segmentation:
//! a small reverse-mode autodiff engine over dense 3D volumes, a synthetic
//! airway-tree generator with an exact distance-transform oracle,
//! topology-surrogate losses, a differentiable convolutional distance
//! transform, tree-topology metrics, and a desk-scale trainer.

pub mod autodiff;
pub mod cdt;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rvol;
pub mod synth;
pub mod train;
pub mod volume;

pub use autodiff::{NodeId, Tape};
pub use error::{Error, Result};
pub use synth::{AirwayTree, Branch, GroundTruthBundle, Sample, SynthParams};
pub use volume::{Kernel3, Volume};

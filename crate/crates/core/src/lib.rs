//! Self-annotation of smeared depth pixels from multi-view consistency.
//!
//! A posed depth sequence is checked frame against frame: a pixel that
//! reprojects onto matching depth in other views is valid, one that lies in
//! front of observed surfaces or over empty space is smeared.

pub mod alignment;
pub mod annotator;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod export;
pub mod fuse;
pub mod geometry;
pub mod metrics;
pub mod ply;
pub mod simulator;
pub mod spatial;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    AnnotatorConfig, CameraModel, DepthFrame, EvidenceMap, Label, LabelMap, Manifest, RigidPose,
    SceneSequence,
};

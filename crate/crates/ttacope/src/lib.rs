//! Category-level object pose estimation from depth point clouds, with
//! online test-time adaptation of the predictor on unlabeled target streams.
//!
//! The pipeline: a per-point network predicts binned normalized object
//! coordinates, a robust similarity fit turns the correspondences into a
//! pose, geometric filtering scores how well prediction and observation
//! agree, and a student/teacher pair self-trains on the filtered
//! correspondences frame by frame. Synthetic stream generation, evaluation
//! metrics and experiment plumbing round out the toolkit.

pub mod adaptation;
pub mod error;
pub mod experiment;
pub mod filtering;
pub mod geometry;
pub mod metrics;
pub mod nocs;
pub mod predictor;
mod seeds;
pub mod synth;

pub use error::Error;

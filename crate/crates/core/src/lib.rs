//! Fingerprint presentation-attack detection.
//!
//! The pipeline segments a fingerprint, extracts quality-filtered minutiae,
//! cuts a patch around each one and routes it to one of nine section
//! classifiers by its position in the segmented print. Per-section WGAN-GP
//! generators, each trained without the sensor under test, synthesize extra
//! spoof patches for classifier training. Patch scores are averaged into one
//! liveness score per image and evaluated with APCER/BPCER/ACE.

pub mod classifier;
pub mod config;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod minutiae;
pub mod netcore;
pub mod opg;
pub mod patching;
pub mod protocols;
pub mod rng;

pub use config::RunConfig;
pub use domain::{
    DatasetManifest, GrayImage, Label, Minutia, MinutiaKind, Patch, PatchLabel, PatchOrigin,
    SampleRecord, Split,
};
pub use error::{Error, Result};

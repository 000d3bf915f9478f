//! Demonstration records, their on-disk format, dataset manifests, splitting
//! and the oversampling batch sampler.

mod dataset;
mod manifest;
mod sampling;
mod store;

pub use dataset::{Batch, Dataset};
pub use manifest::{DatasetManifest, ManifestEntry, SplitTag, MANIFEST_VERSION};
pub use sampling::{batches_per_epoch, oversample_weights, split, BatchSampler, DEFAULT_BOOST, DEFAULT_YAW_THRESHOLD};
pub use store::{TRAJECTORY_MAGIC, TRAJECTORY_VERSION};

use crate::features::KINEMATIC_DIM;
use crate::world::Configuration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a trajectory file (bad magic)")]
    BadMagic,
    #[error("trajectory format version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("corrupt trajectory: {0}")]
    Corrupt(String),
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Oracle,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Timeout,
}

/// Tag written when a record carries no phase or pattern label.
pub const NO_TAG: u8 = u8::MAX;

/// One demonstration time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub index: u32,
    /// Interleaved RGB, `3 * width * height` bytes.
    pub rgb: Vec<u8>,
    pub depth: Vec<f32>,
    pub kin: [f32; KINEMATIC_DIM],
    /// `(forward, lateral, vertical, yaw_rate)`.
    pub action: [f32; 4],
    pub gaze: [f32; 2],
    pub collision: bool,
    pub phase: u8,
    pub pattern: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub source: Source,
    pub outcome: Outcome,
    pub seed: u64,
    pub config: Configuration,
    pub world_hash: u64,
    pub width: u16,
    pub height: u16,
    /// Vehicle position after the last recorded step.
    pub final_position: [f64; 3],
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    /// Checks the structural invariants every stored trajectory satisfies.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.steps.is_empty() {
            return Err(DataError::Invalid("no steps".into()));
        }
        let pixels = self.width as usize * self.height as usize;
        let mut prev: Option<u32> = None;
        for s in &self.steps {
            if prev.is_some_and(|p| s.index <= p) {
                return Err(DataError::Invalid(format!("step index {} not increasing", s.index)));
            }
            prev = Some(s.index);
            if s.rgb.len() != 3 * pixels || s.depth.len() != pixels {
                return Err(DataError::Invalid(format!("step {}: frame size mismatch", s.index)));
            }
            if !s.action.iter().all(|a| (-1.0..=1.0).contains(a)) {
                return Err(DataError::Invalid(format!("step {}: action {:?} out of bounds", s.index, s.action)));
            }
            if !s.gaze.iter().all(|g| (0.0..=1.0).contains(g)) {
                return Err(DataError::Invalid(format!("step {}: gaze {:?} out of bounds", s.index, s.gaze)));
            }
        }
        Ok(())
    }
}

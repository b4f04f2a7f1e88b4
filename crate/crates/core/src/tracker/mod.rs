//! Differentiable surrogate tracker.
//!
//! Each modality has a small strided convolutional encoder shared between
//! the template and the search patch. Per-modality features are fused by a
//! learned weighted sum, the template features are cross-correlated with the
//! search features to give a 16x16 logit map, and the target center is the
//! soft-argmax of that map. A small head on attention-pooled search features
//! predicts the box size.

mod checkpoint;
mod crop;
mod net;
mod params;
mod train;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_MAGIC};
pub use crop::{
    build_pair, crop_event_frame, crop_patch, crop_region, crop_voxels, frame_to_patch,
    patch_to_frame, voxel_patch,
};
pub use net::{
    cell_center, embed_rgb, embed_voxels, forward, nearest_cell, predict, search_inputs,
    template_features, EventInput, EventPatch, InputVars, OutputVars, PatchPair, TrackerOutput,
};
pub use params::{BoundParams, ConvLayer, Encoder, TrackerParams, TrainMeta};
pub use train::{build_dataset, example_loss, train, LabeledPair, TrainConfig, TrainReport};

pub use crate::geom::BBox;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::DiffError;

/// Template patch side, pixels.
pub const TEMPLATE_PX: usize = 64;
/// Search patch side, pixels.
pub const SEARCH_PX: usize = 128;
/// Template crop extent relative to the target box.
pub const TEMPLATE_SCALE: f64 = 2.0;
/// Search crop extent relative to the target box.
pub const SEARCH_SCALE: f64 = 4.0;
/// Score map side.
pub const SCORE_SIZE: usize = 16;
/// Search-patch pixels per score cell.
pub const SCORE_STRIDE: f64 = (SEARCH_PX / SCORE_SIZE) as f64;
/// Nominal target size inside either patch, pixels.
pub const NOMINAL_TARGET_PX: f64 = 32.0;
/// Bounds of the decoded box size, pixels.
pub const SIZE_RANGE: (f64, f64) = (4.0, 128.0);
/// Saturation (events per pixel) of the event-frame display mapping.
pub const EVENT_FRAME_SATURATION: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Rgb,
    Voxel,
    Frame,
    RgbVoxel,
    RgbFrame,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Rgb,
        Modality::Voxel,
        Modality::Frame,
        Modality::RgbVoxel,
        Modality::RgbFrame,
    ];

    pub fn has_rgb(self) -> bool {
        matches!(self, Modality::Rgb | Modality::RgbVoxel | Modality::RgbFrame)
    }

    pub fn has_voxel(self) -> bool {
        matches!(self, Modality::Voxel | Modality::RgbVoxel)
    }

    pub fn has_frame(self) -> bool {
        matches!(self, Modality::Frame | Modality::RgbFrame)
    }

    pub fn has_event(self) -> bool {
        self.has_voxel() || self.has_frame()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Voxel => "voxel",
            Modality::Frame => "frame",
            Modality::RgbVoxel => "rgb+voxel",
            Modality::RgbFrame => "rgb+frame",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = TrackerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrackerError::Config(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("crop error: {0}")]
    Crop(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unsupported checkpoint version {0:?}")]
    Version(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

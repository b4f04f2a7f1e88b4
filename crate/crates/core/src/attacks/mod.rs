//! Adversarial attacks on the surrogate tracker.
//!
//! Every attack works on the search patches of one frame with the template
//! fixed. Gradient attacks descend on a loss from [`crate::losses`]: an
//! update written as `x + α·sign(R)` uses `R = ∇(−L)`. After every step
//! each perturbed quantity is projected back into the L∞ ball of radius ε
//! around its starting value and then into its valid range.

mod engine;
mod fusion;
mod runner;
mod voxel;

pub use engine::{
    evaluate, fgsm, noise_baseline, pgd, pgd_rgb, AttackModel, AttackResult, Evaluation,
    SearchState, Wrt,
};
pub use fusion::{
    attack_rgb_event_frame_universal, attack_rgb_event_voxel, baseline_ae_adv, baseline_dare_snn,
    FusionConfig, FusionResult, InnerOrder, UniversalResult,
};
pub use runner::{
    AttackConfig, AttackKind, AttackManifest, FrameAttack, SequenceAttacker, TargetChoice, Timestamps,
};
pub use voxel::{
    adv_init_voxels, grad_opt_features, grad_opt_voxels, gumbel_softmax_polarity, temporal_carry,
    temporal_carry_voxels, Axes,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::DiffError;
use crate::geom::BBox;
use crate::losses::{LossError, LossWeights, Role, TrackTarget};
use crate::tracker::{TrackerError, SEARCH_PX};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("non-finite gradient at iteration {iteration}")]
    Numeric { iteration: usize },
    #[error("attack needs {0}")]
    Unsupported(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// L∞ radius, step size, and iteration count. Pixel inputs are budgeted in
/// `[0, 255]` values, voxel coordinates in search-patch pixels, voxel
/// features in events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub eps: f64,
    pub alpha: f64,
    pub iters: usize,
}

impl AttackBudget {
    /// Unimodal default radius.
    pub const UNIMODAL_EPS: f64 = 10.0;
    /// Multimodal default radius.
    pub const MULTIMODAL_EPS: f64 = 8.0;

    pub fn new(eps: f64, alpha: f64, iters: usize) -> Result<Self, AttackError> {
        let b = Self { eps, alpha, iters };
        b.validate()?;
        Ok(b)
    }

    pub fn unimodal() -> Self {
        Self {
            eps: Self::UNIMODAL_EPS,
            alpha: 1.0,
            iters: 10,
        }
    }

    pub fn multimodal() -> Self {
        Self {
            eps: Self::MULTIMODAL_EPS,
            ..Self::unimodal()
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(AttackError::Budget(format!("eps must be >= 0, got {}", self.eps)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(AttackError::Budget(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.iters == 0 {
            return Err(AttackError::Budget("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Attacker's desired box in search-patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub bbox: BBox,
}

impl TargetSpec {
    /// Box of the true size centered on the patch quadrant center farthest
    /// from the true center.
    pub fn far_quadrant(truth: &BBox) -> Self {
        let s = SEARCH_PX as f64;
        let (tx, ty) = truth.center();
        let dist = |&(x, y): &(f64, f64)| (x - tx).hypot(y - ty);
        let (cx, cy) = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
            .map(|(a, b)| (a * s, b * s))
            .into_iter()
            .max_by(|a, b| dist(a).total_cmp(&dist(b)))
            .expect("four quadrants");
        let w = truth.w.clamp(1.0, s / 2.0);
        let h = truth.h.clamp(1.0, s / 2.0);
        Self {
            bbox: BBox::from_center(cx, cy, w, h),
        }
    }

    /// Copy moved inside the patch.
    pub fn clamped(&self) -> Self {
        let s = SEARCH_PX as f64;
        let w = self.bbox.w.min(s);
        let h = self.bbox.h.min(s);
        Self {
            bbox: BBox::new(self.bbox.x.clamp(0.0, s - w), self.bbox.y.clamp(0.0, s - h), w, h),
        }
    }
}

/// Which loss the gradient attacks descend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `e(y, target) - e(y, true) - e(y, ori)`.
    Adversarial,
    /// `e(y, target) - e(y, true)`.
    Track,
}

/// Targets of one frame's attack, all in search-patch pixels.
#[derive(Debug, Clone)]
pub struct AttackTargets {
    pub target: TrackTarget,
    pub truth: TrackTarget,
    pub ori: TrackTarget,
    pub weights: LossWeights,
    pub kind: LossKind,
}

impl AttackTargets {
    pub fn new(target: &TargetSpec, truth: BBox, ori: BBox, kind: LossKind) -> Self {
        Self {
            target: TrackTarget::from_box(target.bbox, Role::Target),
            truth: TrackTarget::from_box(truth, Role::True),
            ori: TrackTarget::from_box(ori, Role::Ori),
            weights: LossWeights::default(),
            kind,
        }
    }
}

/// Perturbations carried between frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerturbationState {
    /// `[3, H, W]` pixel offsets of the last attacked search patch.
    pub eta_rgb: Option<crate::diffmath::Tensor>,
    /// `[N, 4]` voxel offsets in grid units or `[1, H, W]` event-frame offsets.
    pub eta_event: Option<crate::diffmath::Tensor>,
    /// Frame the offsets were computed on.
    pub frame: Option<usize>,
}

/// How the previous frame's perturbation seeds the next attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Carry {
    Off,
    /// Start from the previous offset `adv - clean`.
    On,
    /// Start from the negated previous offset, `clean - adv`.
    Negated,
}

impl std::str::FromStr for Carry {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Carry::Off),
            "on" => Ok(Carry::On),
            "negated" => Ok(Carry::Negated),
            other => Err(AttackError::Unsupported(format!("a temporal mode of on|off|negated, got {other:?}"))),
        }
    }
}

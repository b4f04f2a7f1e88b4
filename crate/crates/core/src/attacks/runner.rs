use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::engine::{evaluate, fgsm, noise_baseline, pgd, pgd_rgb, AttackModel, SearchState, Wrt};
use super::fusion::{
    attack_rgb_event_frame_universal, attack_rgb_event_voxel, baseline_ae_adv, baseline_dare_snn,
    FusionConfig, FusionResult, InnerOrder,
};
use super::voxel::adv_init_voxels;
use super::{AttackBudget, AttackError, AttackTargets, Carry, LossKind, PerturbationState, TargetSpec};
use crate::diffmath::Tensor;
use crate::eventcam::VoxelSet;
use crate::geom::BBox;
use crate::tracker::{Modality, PatchPair, TrackerOutput, SEARCH_PX};

/// Attack procedures selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Uniform noise on every input.
    Noise,
    /// One signed step on every input.
    Fgsm,
    /// Iterated attack on the RGB patch only.
    PgdRgb,
    /// Iterated attack on every input jointly.
    Pgd,
    /// Voxel injection into the target region, no optimization.
    AdvInit,
    /// Voxel injection followed by coordinate optimization.
    GradOpt,
    /// RGB then voxel inner loops with temporal carry.
    FusionVoxel,
    /// Universal offset shared by the RGB patch and the event frame.
    UniversalFrame,
    /// Timestamp-only voxel attack with an RGB branch.
    AeAdv,
    /// Polarity-only voxel attack with an RGB branch.
    DareSnn,
}

impl AttackKind {
    pub const ALL: [AttackKind; 10] = [
        AttackKind::Noise,
        AttackKind::Fgsm,
        AttackKind::PgdRgb,
        AttackKind::Pgd,
        AttackKind::AdvInit,
        AttackKind::GradOpt,
        AttackKind::FusionVoxel,
        AttackKind::UniversalFrame,
        AttackKind::AeAdv,
        AttackKind::DareSnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Noise => "noise",
            AttackKind::Fgsm => "fgsm",
            AttackKind::PgdRgb => "pgd-rgb",
            AttackKind::Pgd => "pgd",
            AttackKind::AdvInit => "adv-init",
            AttackKind::GradOpt => "grad-opt",
            AttackKind::FusionVoxel => "fusion-voxel",
            AttackKind::UniversalFrame => "universal-frame",
            AttackKind::AeAdv => "ae-adv",
            AttackKind::DareSnn => "dare-snn",
        }
    }

    /// Whether the attack can run against a tracker of `m`.
    pub fn supports(self, m: Modality) -> bool {
        match self {
            AttackKind::Noise | AttackKind::Fgsm | AttackKind::Pgd => true,
            AttackKind::PgdRgb => m.has_rgb(),
            AttackKind::AdvInit | AttackKind::GradOpt | AttackKind::AeAdv | AttackKind::DareSnn => m.has_voxel(),
            AttackKind::FusionVoxel => m == Modality::RgbVoxel,
            AttackKind::UniversalFrame => m == Modality::RgbFrame,
        }
    }

    fn multimodal(self) -> bool {
        matches!(
            self,
            AttackKind::FusionVoxel | AttackKind::UniversalFrame | AttackKind::AeAdv | AttackKind::DareSnn
        )
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                AttackError::Unsupported(format!("an attack name in {}, got {s:?}", names.join("|")))
            })
    }
}

/// Where the attacker wants the prediction to go.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetChoice {
    /// The patch quadrant farthest from the true center.
    FarQuadrant,
    /// A fixed box in search-patch pixels.
    Fixed(BBox),
}

impl TargetChoice {
    pub fn resolve(&self, truth: &BBox) -> TargetSpec {
        match self {
            TargetChoice::FarQuadrant => TargetSpec::far_quadrant(truth),
            TargetChoice::Fixed(b) => TargetSpec { bbox: *b }.clamped(),
        }
    }
}

impl FromStr for TargetChoice {
    type Err = AttackError;

    /// `far-quadrant` or `x,y,w,h` in search-patch pixels.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "far-quadrant" {
            return Ok(TargetChoice::FarQuadrant);
        }
        let bad = || AttackError::Unsupported(format!("a target of far-quadrant or x,y,w,h, got {s:?}"));
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let &[x, y, w, h] = v.as_slice() else {
            return Err(bad());
        };
        let b = BBox::new(x, y, w, h);
        let s = SEARCH_PX as f64;
        if !b.is_valid() || x < 0.0 || y < 0.0 || b.right() > s || b.bottom() > s {
            return Err(AttackError::Unsupported(format!("a target inside the {s}-pixel search patch")));
        }
        Ok(TargetChoice::Fixed(b))
    }
}

/// Full description of an attack run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Budget for pixel inputs.
    pub rgb: AttackBudget,
    /// Budget for the event input.
    pub event: AttackBudget,
    pub target: TargetChoice,
    pub carry: Carry,
    pub loss: LossKind,
    pub order: InnerOrder,
    pub seed: u64,
}

impl AttackConfig {
    /// Defaults for `kind`: radius 8 for the cross-modal attacks, 10 for
    /// the rest; step 1; 10 iterations.
    pub fn new(kind: AttackKind) -> Self {
        let budget = if kind.multimodal() {
            AttackBudget::multimodal()
        } else {
            AttackBudget::unimodal()
        };
        Self {
            kind,
            rgb: budget,
            event: budget,
            target: TargetChoice::FarQuadrant,
            carry: Carry::On,
            loss: LossKind::Adversarial,
            order: InnerOrder::RgbFirst,
            seed: 0,
        }
    }

    /// Same budget for every input.
    pub fn with_budget(mut self, b: AttackBudget) -> Self {
        self.rgb = b;
        self.event = b;
        self
    }

    pub fn validate(&self, m: Modality) -> Result<(), AttackError> {
        self.rgb.validate()?;
        self.event.validate()?;
        if !self.kind.supports(m) {
            return Err(AttackError::Unsupported(format!(
                "a tracker suited to {}, got a {m} tracker",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Outcome of attacking one frame.
#[derive(Debug, Clone)]
pub struct FrameAttack {
    /// The pair with attacked search patches.
    pub pair: PatchPair,
    pub state: SearchState,
    pub target: TargetSpec,
    pub clean: TrackerOutput,
    pub output: TrackerOutput,
    /// Loss trace of the main optimization loop; empty for noise and
    /// injection-only attacks.
    pub trace: Vec<f64>,
    /// Attack loss of the clean inputs, where a cold start begins.
    pub clean_loss: f64,
}

/// Stateful attacker for one sequence; frames must be fed in order.
#[derive(Debug, Clone)]
pub struct SequenceAttacker {
    pub config: AttackConfig,
    carry: PerturbationState,
    universal: Option<Tensor>,
    frame: usize,
}

fn mix(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Uniform noise of up to `eps` search-patch pixels on every occupied
/// voxel's coordinates.
fn noisy_voxels(v: &VoxelSet, eps: f64, seed: u64) -> VoxelSet {
    let n = v.occupied();
    let t = v.to_tensor();
    let noisy = noise_baseline(&t, eps / v.cell_px() as f64, f64::NEG_INFINITY, f64::INFINITY, seed);
    let [mx, my, mz] = v.coord_max();
    let hi = [mx, my, mz];
    let data = t
        .data()
        .iter()
        .zip(noisy.data())
        .enumerate()
        .map(|(i, (&o, &x))| {
            let (row, col) = (i / 4, i % 4);
            if row < n && col < 3 {
                x.clamp(0.0, hi[col])
            } else {
                o
            }
        })
        .collect();
    v.with_tensor(&Tensor::new(t.shape().to_vec(), data))
}

impl SequenceAttacker {
    pub fn new(config: AttackConfig) -> Self {
        Self {
            config,
            carry: PerturbationState::default(),
            universal: None,
            frame: 0,
        }
    }

    /// Offsets carried into the next frame.
    pub fn carried(&self) -> &PerturbationState {
        &self.carry
    }

    /// The universal offset learned so far.
    pub fn universal(&self) -> Option<&Tensor> {
        self.universal.as_ref()
    }

    /// Attacks the search patches of `pair`, whose true box in patch pixels
    /// is `truth`.
    pub fn attack_frame(
        &mut self,
        model: &AttackModel,
        pair: &PatchPair,
        truth: &BBox,
    ) -> Result<FrameAttack, AttackError> {
        let cfg = self.config;
        cfg.validate(pair.modality)?;
        let clean_state = SearchState::from_pair(pair);
        let clean = model.output(&clean_state)?;
        let target = cfg.target.resolve(truth);
        let targets = AttackTargets::new(&target, *truth, clean.raw_bbox, cfg.loss);
        let clean_loss = evaluate(model, &targets, &clean_state, Wrt::NONE)?.loss;
        let seed = mix(cfg.seed, self.frame);
        let fusion = FusionConfig {
            rgb: cfg.rgb,
            event: cfg.event,
            carry: cfg.carry,
            order: cfg.order,
            seed,
        };
        let from_fusion = |f: FusionResult, carry: &mut PerturbationState| {
            let trace = f.event.as_ref().or(f.rgb.as_ref()).map(|r| r.trace.clone()).unwrap_or_default();
            *carry = f.carry;
            (f.state, trace)
        };
        let (state, trace) = match cfg.kind {
            AttackKind::Noise => {
                let mut s = clean_state.clone();
                s.rgb = s.rgb.map(|r| noise_baseline(&r, cfg.rgb.eps, 0.0, 255.0, seed));
                s.frame = s.frame.map(|f| noise_baseline(&f, cfg.event.eps, 0.0, 255.0, seed ^ 1));
                s.voxels = s.voxels.map(|v| noisy_voxels(&v, cfg.event.eps, seed ^ 2));
                (s, Vec::new())
            }
            AttackKind::Fgsm => {
                let r = fgsm(model, &targets, &clean_state, cfg.rgb.eps)?;
                (r.state, r.trace)
            }
            AttackKind::Pgd => {
                let r = pgd(model, &targets, &clean_state, &cfg.rgb)?;
                (r.state, r.trace)
            }
            AttackKind::PgdRgb => {
                let clean_rgb = clean_state.rgb.as_ref().expect("rgb tracker");
                let warm = super::temporal_carry(clean_rgb, self.carry.eta_rgb.as_ref(), cfg.rgb.eps, cfg.carry);
                let (r, eta) = pgd_rgb(model, &targets, &clean_state, &cfg.rgb, Some(&warm))?;
                self.carry.eta_rgb = Some(eta);
                (r.state, r.trace)
            }
            AttackKind::AdvInit => {
                let mut s = clean_state.clone();
                s.voxels = s.voxels.map(|v| adv_init_voxels(&v, &target, seed));
                (s, Vec::new())
            }
            AttackKind::GradOpt => {
                let mut voxel_only = clean_state.clone();
                voxel_only.rgb = None;
                let mut f = attack_rgb_event_voxel(model, &targets, &voxel_only, &target, &self.carry, &fusion)?;
                f.state.rgb = clean_state.rgb.clone();
                from_fusion(f, &mut self.carry)
            }
            AttackKind::FusionVoxel => {
                let f = attack_rgb_event_voxel(model, &targets, &clean_state, &target, &self.carry, &fusion)?;
                from_fusion(f, &mut self.carry)
            }
            AttackKind::AeAdv => {
                let f = baseline_ae_adv(model, &targets, &clean_state, &target, &self.carry, &fusion)?;
                from_fusion(f, &mut self.carry)
            }
            AttackKind::DareSnn => {
                let f = baseline_dare_snn(model, &targets, &clean_state, &target, &self.carry, &fusion)?;
                from_fusion(f, &mut self.carry)
            }
            AttackKind::UniversalFrame => {
                let frame = clean_state.frame.as_ref().expect("frame tracker");
                let eta = match &self.universal {
                    Some(e) if e.shape() == frame.shape() => e.clone(),
                    _ => Tensor::zeros(frame.shape()),
                };
                let u = attack_rgb_event_frame_universal(model, &targets, &clean_state, &cfg.rgb, &eta)?;
                self.universal = Some(u.eta);
                (u.state, u.trace)
            }
        };
        self.carry.frame = Some(self.frame);
        self.frame += 1;
        let output = model.output(&state)?;
        Ok(FrameAttack {
            pair: state.apply_to(pair),
            state,
            target,
            clean,
            output,
            trace,
            clean_loss,
        })
    }
}

/// Record of an attack run, enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub schema: String,
    pub attack: AttackKind,
    pub modality: Modality,
    pub config: AttackConfig,
    pub checkpoint: Option<String>,
    pub data: Option<String>,
    pub sequences: Vec<String>,
    /// Wall-clock fields live only here so other outputs stay byte-stable.
    #[serde(default)]
    pub timestamps: Option<Timestamps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_s: u64,
    pub elapsed_s: f64,
}

impl AttackManifest {
    pub const SCHEMA: &'static str = "rgbe-advbench/attack/v1";

    pub fn new(config: AttackConfig, modality: Modality) -> Self {
        Self {
            schema: Self::SCHEMA.into(),
            attack: config.kind,
            modality,
            config,
            checkpoint: None,
            data: None,
            sequences: Vec::new(),
            timestamps: None,
        }
    }
}

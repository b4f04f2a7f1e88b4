use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{FrameRecord, Metrics};
use super::report::{BenchmarkReport, SequenceReport, Timing};
use super::EvalError;
use crate::attacks::{AttackConfig, AttackModel, FrameAttack, SequenceAttacker, TargetChoice};
use crate::eventcam::{load_sequence, GridSpec, Sequence};
use crate::geom::BBox;
use crate::tracker::{build_pair, frame_to_patch, patch_to_frame, predict, TrackerParams};

/// Result of tracking one frame.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    /// Estimate in frame pixels; also the search center for the next frame.
    pub bbox: BBox,
    /// Distance of the raw prediction to the attacker's target, patch pixels.
    pub target_distance: Option<f64>,
    /// The attacked inputs, when an attacker ran.
    pub attack: Option<FrameAttack>,
}

/// Something that follows a target frame by frame.
pub trait FrameTracker: Sync {
    /// Short label stored in reports.
    fn label(&self) -> String;

    /// Estimates frame `k` of `seq` from the previous estimate `prev`,
    /// applying `attacker` to the inputs when given.
    fn track_frame(
        &self,
        seq: &Sequence,
        k: usize,
        prev: &BBox,
        target: TargetChoice,
        attacker: Option<&mut SequenceAttacker>,
    ) -> Result<FrameOutcome, EvalError>;
}

/// Returns the ground truth. Useful to check the harness itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleTracker;

impl FrameTracker for OracleTracker {
    fn label(&self) -> String {
        "oracle".into()
    }

    fn track_frame(
        &self,
        seq: &Sequence,
        k: usize,
        _prev: &BBox,
        _target: TargetChoice,
        _attacker: Option<&mut SequenceAttacker>,
    ) -> Result<FrameOutcome, EvalError> {
        Ok(FrameOutcome {
            bbox: seq.boxes[k],
            target_distance: None,
            attack: None,
        })
    }
}

/// The surrogate network with a simple tracking policy: the search region
/// is centered on the previous estimate, the new center is the network's
/// center kept inside the frame, and the size follows the network's size
/// at rate `size_rate`.
#[derive(Debug, Clone)]
pub struct SurrogateTracker {
    pub params: TrackerParams,
    pub grid: GridSpec,
    pub size_rate: f64,
}

impl SurrogateTracker {
    pub const DEFAULT_SIZE_RATE: f64 = 0.2;

    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            grid: GridSpec::default(),
            size_rate: Self::DEFAULT_SIZE_RATE,
        }
    }
}

impl FrameTracker for SurrogateTracker {
    fn label(&self) -> String {
        format!("surrogate-{}", self.params.modality)
    }

    fn track_frame(
        &self,
        seq: &Sequence,
        k: usize,
        prev: &BBox,
        target: TargetChoice,
        attacker: Option<&mut SequenceAttacker>,
    ) -> Result<FrameOutcome, EvalError> {
        let p = &self.params;
        let pair = build_pair(seq, p.modality, &self.grid, (0, &seq.boxes[0]), k, prev)?;
        let truth = frame_to_patch(&seq.boxes[k], prev);
        let (out, target, attack) = match attacker {
            Some(a) => {
                let model = AttackModel::new(p, &pair)?;
                let fa = a.attack_frame(&model, &pair, &truth)?;
                (fa.output.clone(), fa.target, Some(fa))
            }
            None => (predict(p, &pair)?, target.resolve(&truth), None),
        };
        let fb = patch_to_frame(&out.bbox, prev);
        let (cx, cy) = fb.center();
        let (w, h) = (seq.frames[k].width() as f64, seq.frames[k].height() as f64);
        let r = self.size_rate;
        let bbox = BBox::from_center(
            cx.clamp(0.0, w),
            cy.clamp(0.0, h),
            prev.w + r * (fb.w - prev.w),
            prev.h + r * (fb.h - prev.h),
        );
        Ok(FrameOutcome {
            bbox,
            target_distance: Some(out.raw_bbox.center_distance(&target.bbox)),
            attack,
        })
    }
}

/// A sequence already in memory or a directory to load it from.
#[derive(Debug, Clone)]
pub enum SequenceInput {
    Loaded(Sequence),
    Dir(PathBuf),
}

impl SequenceInput {
    pub fn name(&self) -> String {
        match self {
            SequenceInput::Loaded(s) => s.name.clone(),
            SequenceInput::Dir(d) => d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string()),
        }
    }
}

/// What to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub name: String,
    pub attack: Option<AttackConfig>,
    /// Target for the distance statistic when no attack is configured.
    pub target: TargetChoice,
    /// Path of the attack manifest, stored in the report.
    pub manifest: Option<String>,
    /// Record wall-clock times.
    pub timing: bool,
}

impl BenchmarkConfig {
    pub fn clean(name: &str) -> Self {
        Self {
            name: name.into(),
            attack: None,
            target: TargetChoice::FarQuadrant,
            manifest: None,
            timing: false,
        }
    }

    pub fn attacked(name: &str, attack: AttackConfig) -> Self {
        Self {
            attack: Some(attack),
            target: attack.target,
            ..Self::clean(name)
        }
    }
}

/// Tracks `seq` from its first box, handing each frame's outcome and record
/// to `visit`. `index` offsets the attack seed so sequences differ.
pub fn track_sequence(
    tracker: &dyn FrameTracker,
    seq: &Sequence,
    cfg: &BenchmarkConfig,
    index: usize,
    mut visit: impl FnMut(&FrameOutcome, FrameRecord) -> Result<(), EvalError>,
) -> Result<(), EvalError> {
    if seq.len() < 2 || seq.boxes.len() != seq.len() {
        return Err(EvalError::Sequence(format!("{} has too few frames or boxes", seq.name)));
    }
    let mut attacker = cfg.attack.map(|mut a| {
        a.seed = a.seed.wrapping_add(index as u64);
        SequenceAttacker::new(a)
    });
    let mut prev = seq.boxes[0];
    for k in 1..seq.len() {
        let o = tracker.track_frame(seq, k, &prev, cfg.target, attacker.as_mut())?;
        let mut r = FrameRecord::new(k, seq.boxes[k], o.bbox);
        r.target_distance = o.target_distance;
        prev = o.bbox;
        visit(&o, r)?;
    }
    Ok(())
}

/// Tracks every sequence from its first ground-truth box, attacking each
/// frame when `cfg.attack` is set. Sequences run in parallel; a failing
/// sequence is reported and does not stop the others.
pub fn run_benchmark(tracker: &dyn FrameTracker, inputs: &[SequenceInput], cfg: &BenchmarkConfig) -> BenchmarkReport {
    let start = Instant::now();
    let sequences: Vec<(SequenceReport, f64)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let t = Instant::now();
            let mut records = Vec::new();
            let mut push = |_: &FrameOutcome, r| {
                records.push(r);
                Ok(())
            };
            let result = match input {
                SequenceInput::Loaded(s) => track_sequence(tracker, s, cfg, i, &mut push),
                SequenceInput::Dir(d) => load_sequence(d)
                    .map_err(EvalError::from)
                    .and_then(|s| track_sequence(tracker, &s, cfg, i, &mut push)),
            };
            let report = match result {
                Ok(()) => SequenceReport::new(input.name(), records),
                Err(e) => {
                    log::warn!("sequence {} failed: {e}", input.name());
                    SequenceReport::failed(input.name(), records, e.to_string())
                }
            };
            (report, t.elapsed().as_secs_f64())
        })
        .collect();
    let per_sequence_s = sequences.iter().map(|s| s.1).collect();
    let sequences: Vec<SequenceReport> = sequences.into_iter().map(|s| s.0).collect();
    let ok: Vec<Metrics> = sequences.iter().filter_map(|s| s.metrics).collect();
    let distances: Vec<f64> = sequences
        .iter()
        .filter(|s| s.error.is_none())
        .flat_map(|s| s.records.iter().filter_map(|r| r.target_distance))
        .collect();
    BenchmarkReport {
        schema: BenchmarkReport::SCHEMA.into(),
        name: cfg.name.clone(),
        tracker: tracker.label(),
        attack: cfg.attack,
        manifest: cfg.manifest.clone(),
        aggregate: Metrics::mean(&ok).ok(),
        mean_target_distance: (!distances.is_empty()).then(|| distances.iter().sum::<f64>() / distances.len() as f64),
        sequences,
        timing: cfg.timing.then(|| Timing {
            total_s: start.elapsed().as_secs_f64(),
            per_sequence_s,
        }),
    }
}

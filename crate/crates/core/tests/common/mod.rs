#![allow(dead_code)]

use std::collections::BTreeMap;

use advbench::attacks::{SequenceAttacker, TargetChoice};
use advbench::diffmath::{Graph, Tensor, Var};
use advbench::eval::{EvalError, FrameOutcome, FrameTracker};
use advbench::eventcam::{
    synthesize_sequence, EventPoint, EventStream, GridSpec, Polarity, SceneConfig, Sequence, TimeWindow, VoxelSet,
};
use advbench::geom::BBox;
use advbench::losses::{Role, TrackTarget};
use advbench::tracker::{build_pair, frame_to_patch, Modality, OutputVars, PatchPair, TrackerParams, SCORE_SIZE};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sequence(seed: u64, frames: usize) -> Sequence {
    let scene = SceneConfig::random(seed, 160, 120, frames);
    let (frames, events, boxes) = synthesize_sequence(&scene, seed).unwrap();
    Sequence {
        name: format!("seq_{seed:03}"),
        frames,
        events,
        boxes,
    }
}

/// Search patch of frame `k` around a jittered copy of the true box, with
/// the true box in patch pixels.
pub fn pair_at(seq: &Sequence, modality: Modality, k: usize, seed: u64) -> (PatchPair, BBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = seq.boxes[k];
    let (cx, cy) = gt.center();
    let dx = rng.random_range(-0.4..=0.4) * gt.w;
    let dy = rng.random_range(-0.4..=0.4) * gt.h;
    let search = BBox::from_center(cx + dx, cy + dy, gt.w, gt.h);
    let pair = build_pair(seq, modality, &GridSpec::default(), (0, &seq.boxes[0]), k, &search).unwrap();
    (pair, frame_to_patch(&gt, &search))
}

/// Central difference of `f` along coordinate `i`.
pub fn central(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut a = x.clone();
    a.data_mut()[i] += h;
    let mut b = x.clone();
    b.data_mut()[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fresh parameters with every weight nudged off zero, so no activation
/// sits exactly on a ReLU kink.
pub fn generic_params(m: Modality, seed: u64) -> TrackerParams {
    let mut p = TrackerParams::new(m, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    p
}

pub const N: usize = SCORE_SIZE * SCORE_SIZE;

/// Records a prediction whose scores and box are all leaves, packed as
/// `S*S` scores followed by `cx, cy, w, h`.
pub fn prediction(g: &Graph, x: &Tensor, leaf: bool) -> (OutputVars, Vec<Var>) {
    let put = |t: Tensor| if leaf { g.leaf(t) } else { g.constant(t) };
    let d = x.data();
    let scores = put(Tensor::new(vec![SCORE_SIZE, SCORE_SIZE], d[..N].to_vec()));
    let parts: Vec<Var> = d[N..].iter().map(|&v| put(Tensor::scalar(v))).collect();
    let out = OutputVars {
        logits: g.constant(Tensor::zeros(&[N])),
        scores,
        cx: parts[0],
        cy: parts[1],
        w: parts[2],
        h: parts[3],
    };
    let mut vars = vec![scores];
    vars.extend(parts);
    (out, vars)
}

pub fn pack(scores: &[f64], b: &BBox) -> Tensor {
    let (cx, cy) = b.center();
    let mut d = scores.to_vec();
    d.extend([cx, cy, b.w, b.h]);
    Tensor::from_vec(d)
}

pub fn random_prediction(rng: &mut ChaCha8Rng) -> Tensor {
    let scores: Vec<f64> = (0..N).map(|_| rng.random_range(0.02..0.98)).collect();
    let b = BBox::from_center(
        rng.random_range(20.0..108.0),
        rng.random_range(20.0..108.0),
        rng.random_range(10.0..50.0),
        rng.random_range(10.0..50.0),
    );
    pack(&scores, &b)
}

pub fn random_target(rng: &mut ChaCha8Rng, role: Role) -> TrackTarget {
    TrackTarget::from_box(
        BBox::from_center(
            rng.random_range(16.0..112.0),
            rng.random_range(16.0..112.0),
            rng.random_range(10.0..50.0),
            rng.random_range(10.0..50.0),
        ),
        role,
    )
}

pub fn random_stream(rng: &mut ChaCha8Rng, n: usize, w: u32, h: u32, t_end: u64) -> EventStream {
    let mut ts: Vec<u64> = (0..n).map(|_| rng.random_range(0..=t_end)).collect();
    ts.sort_unstable();
    let events = ts
        .into_iter()
        .map(|t| {
            let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            EventPoint::new(t, rng.random_range(0..w), rng.random_range(0..h), p)
        })
        .collect();
    EventStream::new(w, h, 0, t_end, events).unwrap()
}

/// Exhaustive binning: group every in-window event by cell, order cells by
/// first event, keep the first `n_cap` cells and the first `k_max` events of each.
pub fn binning_oracle(
    stream: &EventStream,
    window: TimeWindow,
    spec: &GridSpec,
) -> Vec<((u32, u32, u64), i64, usize)> {
    let mut cells: BTreeMap<(u32, u32, u64), Vec<(usize, i64)>> = BTreeMap::new();
    for (i, e) in stream.events().iter().enumerate() {
        if e.t < window.start || e.t >= window.end {
            continue;
        }
        let z = (e.t - window.start) * spec.bins as u64 / (window.end - window.start);
        cells
            .entry((e.x / spec.cell_px, e.y / spec.cell_px, z))
            .or_default()
            .push((i, e.p.sign() as i64));
    }
    let mut ordered: Vec<_> = cells.into_iter().collect();
    ordered.sort_by_key(|(_, evs)| evs[0].0);
    ordered
        .into_iter()
        .take(spec.n_cap)
        .map(|(cell, evs)| {
            let kept = evs.len().min(spec.k_max);
            (cell, evs[..kept].iter().map(|e| e.1).sum(), kept)
        })
        .collect()
}

pub fn as_cells(v: &VoxelSet) -> Vec<((u32, u32, u64), i64, usize)> {
    v.voxels()
        .iter()
        .zip(v.retained_events())
        .map(|(x, &n)| ((x.vx as u32, x.vy as u32, x.vz as u64), x.vf as i64, n as usize))
        .collect()
}

/// Ground truth moved by a frame-dependent offset, for a report with
/// non-trivial numbers.
pub struct Drift;

impl FrameTracker for Drift {
    fn label(&self) -> String {
        "drift".into()
    }

    fn track_frame(
        &self,
        seq: &Sequence,
        k: usize,
        _prev: &BBox,
        _target: TargetChoice,
        _attacker: Option<&mut SequenceAttacker>,
    ) -> Result<FrameOutcome, EvalError> {
        let b = seq.boxes[k];
        let d = 3.0 * (k % 9) as f64;
        Ok(FrameOutcome {
            bbox: BBox::new(b.x + d, b.y - d / 2.0, b.w * (1.0 + 0.05 * (k % 4) as f64), b.h),
            target_distance: Some(d),
            attack: None,
        })
    }
}

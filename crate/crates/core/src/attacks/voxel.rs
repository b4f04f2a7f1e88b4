use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{descend, AttackModel, AttackResult, Knob, SearchState};
use super::{AttackBudget, AttackError, AttackTargets, Carry, TargetSpec};
use crate::diffmath::Tensor;
use crate::eventcam::{count_invalid_voxels, Voxel, VoxelSet};

/// Voxel coordinates a coordinate attack may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axes {
    Xyz,
    TimeOnly,
}

impl Axes {
    pub(crate) fn mask(self) -> [bool; 4] {
        match self {
            Axes::Xyz => [true, true, true, false],
            Axes::TimeOnly => [false, false, true, false],
        }
    }
}

/// Fills every padding slot with a `+1` voxel at a cell drawn uniformly
/// from the cells covered by the target box and a uniform temporal bin.
pub fn adv_init_voxels(v: &VoxelSet, spec: &TargetSpec, seed: u64) -> VoxelSet {
    let n_v = count_invalid_voxels(v);
    if n_v == 0 {
        log::debug!("voxel set is full; nothing to inject");
        return v.clone();
    }
    let cell = v.cell_px() as f64;
    let [gx, gy, gz] = v.dims();
    let b = spec.clamped().bbox;
    let span = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / cell).floor().max(0.0) as usize).min(n - 1);
        let z = (((hi / cell).ceil() as usize).saturating_sub(1)).clamp(a, n - 1);
        (a, z)
    };
    let (x0, x1) = span(b.x, b.right(), gx);
    let (y0, y1) = span(b.y, b.bottom(), gy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = v.clone();
    for _ in 0..n_v {
        let vx = rng.random_range(x0..=x1) as f64;
        let vy = rng.random_range(y0..=y1) as f64;
        let vz = rng.random_range(0..gz) as f64;
        out.push(Voxel::new(vx, vy, vz, 1.0));
    }
    out
}

/// Signed-gradient optimization of the continuous coordinates of every
/// occupied voxel of `state.voxels` (`V′`). `eps` and `alpha` are in
/// search-patch pixels: offsets from `V′` are clamped to `eps / cell_px`
/// grid units on every axis, then coordinates to the grid. Features never move. `warm`
/// is an optional starting point, projected into the same constraints.
pub fn grad_opt_voxels(
    model: &AttackModel,
    targets: &AttackTargets,
    state: &SearchState,
    budget: &AttackBudget,
    axes: Axes,
    warm: Option<&VoxelSet>,
) -> Result<AttackResult, AttackError> {
    budget.validate()?;
    let v = state
        .voxels
        .as_ref()
        .ok_or_else(|| AttackError::Unsupported("a voxel search patch".into()))?;
    let knob = Knob::voxels(v, axes.mask(), budget.eps);
    descend_from(model, targets, state, warm, knob, budget)
}

fn descend_from(
    model: &AttackModel,
    targets: &AttackTargets,
    state: &SearchState,
    warm: Option<&VoxelSet>,
    knob: Knob,
    budget: &AttackBudget,
) -> Result<AttackResult, AttackError> {
    let mut start = state.clone();
    if let Some(w) = warm {
        let mut x = w.to_tensor();
        knob.project(x.data_mut());
        start.set_event_tensor(x);
    }
    descend(model, targets, &start, &[knob], budget.alpha, budget.iters)
}

/// Signed-gradient optimization of the features of every occupied voxel,
/// clamped to `[-eps, eps]` around `state.voxels` and to `[-K_max, K_max]`.
/// Coordinates never move.
pub fn grad_opt_features(
    model: &AttackModel,
    targets: &AttackTargets,
    state: &SearchState,
    budget: &AttackBudget,
) -> Result<AttackResult, AttackError> {
    budget.validate()?;
    let v = state
        .voxels
        .as_ref()
        .ok_or_else(|| AttackError::Unsupported("a voxel search patch".into()))?;
    let knob = Knob::voxels(v, [false, false, false, true], budget.eps);
    descend_from(model, targets, state, None, knob, budget)
}

fn carry_sign(carry: Carry) -> f64 {
    match carry {
        Carry::Off => 0.0,
        Carry::On => 1.0,
        Carry::Negated => -1.0,
    }
}

/// Warm start for a pixel input: the previous frame's offset `prev_eta`
/// (`adv - clean` there) added to `clean` with the sign `carry` selects,
/// clamped to `[-eps, eps]` and then to `[0, 255]`. Without a previous
/// offset the warm start is `clean`.
pub fn temporal_carry(clean: &Tensor, prev_eta: Option<&Tensor>, eps: f64, carry: Carry) -> Tensor {
    let Some(eta) = prev_eta.filter(|e| e.shape() == clean.shape()) else {
        return clean.clone();
    };
    let s = carry_sign(carry);
    let data = clean
        .data()
        .iter()
        .zip(eta.data())
        .map(|(c, d)| (c + (s * d).clamp(-eps, eps)).clamp(0.0, 255.0))
        .collect();
    Tensor::new(clean.shape().to_vec(), data)
}

/// Warm start for a voxel set: slot `i` of `v` is moved by the offset slot
/// `i` received on the previous frame (`[N, 4]` rows in grid units),
/// restricted to `axes`, clamped to `eps` pixels and to the grid.
pub fn temporal_carry_voxels(
    v: &VoxelSet,
    prev_eta: Option<&Tensor>,
    eps: f64,
    carry: Carry,
    axes: Axes,
) -> VoxelSet {
    let Some(eta) = prev_eta.filter(|e| e.shape() == [v.capacity(), 4]) else {
        return v.clone();
    };
    let s = carry_sign(carry);
    let knob = Knob::voxels(v, axes.mask(), eps);
    let mut x: Vec<f64> = knob.origin.iter().zip(eta.data()).map(|(o, d)| o + s * d).collect();
    knob.project(&mut x);
    v.with_tensor(&Tensor::new(vec![v.capacity(), 4], x))
}

/// Relaxed one-hot sample over `{-1, +1}` by Gumbel-Softmax:
/// `softmax((logits + g) / temperature)` with standard Gumbel noise `g`.
/// Returns the weights of `-1` and `+1`.
pub fn gumbel_softmax_polarity(rng: &mut ChaCha8Rng, logits: [f64; 2], temperature: f64) -> [f64; 2] {
    let gumbel = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    };
    let a = (logits[0] + gumbel(rng)) / temperature;
    let b = (logits[1] + gumbel(rng)) / temperature;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

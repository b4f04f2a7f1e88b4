use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttackBudget, AttackError, AttackTargets, LossKind};
use crate::diffmath::{Graph, Tensor};
use crate::eventcam::{Image, VoxelSet};
use crate::losses::{adversarial_loss, targeted_track_loss};
use crate::tracker::{
    forward, template_features, EventInput, EventPatch, InputVars, PatchPair, TrackerOutput,
    TrackerParams,
};

/// A tracker with the template features of one sequence cached.
#[derive(Debug, Clone)]
pub struct AttackModel<'a> {
    pub params: &'a TrackerParams,
    pub template: Tensor,
}

impl<'a> AttackModel<'a> {
    pub fn new(params: &'a TrackerParams, pair: &PatchPair) -> Result<Self, AttackError> {
        Ok(Self {
            params,
            template: template_features(params, pair)?,
        })
    }

    /// Prediction on `state` without gradients.
    pub fn output(&self, state: &SearchState) -> Result<TrackerOutput, AttackError> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let t = g.constant(self.template.clone());
        let out = forward(&g, &p, t, &state.record(&g, Wrt::NONE))?;
        Ok(out.output(&g))
    }
}

/// Search-patch inputs in the form the attacks perturb.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    /// `[3, H, W]` pixel values.
    pub rgb: Option<Tensor>,
    pub voxels: Option<VoxelSet>,
    /// `[1, H, W]` event display values.
    pub frame: Option<Tensor>,
}

impl SearchState {
    pub fn from_pair(pair: &PatchPair) -> Self {
        Self {
            rgb: pair.x_rgb.as_ref().map(Image::to_chw),
            voxels: pair.x_voxels().cloned(),
            frame: pair.x_frame().map(Image::to_chw),
        }
    }

    /// `pair` with its search patches replaced by this state.
    pub fn apply_to(&self, pair: &PatchPair) -> PatchPair {
        let mut out = pair.clone();
        if let Some(r) = &self.rgb {
            out.x_rgb = Some(Image::from_chw(r));
        }
        if let Some(v) = &self.voxels {
            out.x_event = Some(EventPatch::Voxels(v.clone()));
        }
        if let Some(f) = &self.frame {
            out.x_event = Some(EventPatch::Frame(Image::from_chw(f)));
        }
        out
    }

    pub(crate) fn event_tensor(&self) -> Option<Tensor> {
        self.voxels
            .as_ref()
            .map(VoxelSet::to_tensor)
            .or_else(|| self.frame.clone())
    }

    pub(crate) fn set_event_tensor(&mut self, t: Tensor) {
        if let Some(v) = &mut self.voxels {
            *v = v.with_tensor(&t);
        } else {
            self.frame = Some(t);
        }
    }

    fn record(&self, g: &Graph, wrt: Wrt) -> InputVars {
        let put = |t: &Tensor, leaf: bool| if leaf { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        let event = if let Some(v) = &self.voxels {
            let [gx, gy, gz] = v.dims();
            Some(EventInput::Voxels {
                var: put(&v.to_tensor(), wrt.event),
                active: v.active_mask(),
                dims: [gz, gy, gx],
            })
        } else {
            self.frame.as_ref().map(|f| EventInput::Frame(put(f, wrt.event)))
        };
        InputVars {
            rgb: self.rgb.as_ref().map(|r| put(r, wrt.rgb)),
            event,
        }
    }
}

/// Inputs to differentiate with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wrt {
    pub rgb: bool,
    pub event: bool,
}

impl Wrt {
    pub const NONE: Wrt = Wrt { rgb: false, event: false };
    pub const RGB: Wrt = Wrt { rgb: true, event: false };
    pub const EVENT: Wrt = Wrt { rgb: false, event: true };
    pub const BOTH: Wrt = Wrt { rgb: true, event: true };
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub output: TrackerOutput,
    pub d_rgb: Option<Tensor>,
    /// Gradient for the voxel rows `[N, 4]` or the event frame.
    pub d_event: Option<Tensor>,
}

/// Attack loss of `state` and its gradients.
pub fn evaluate(
    model: &AttackModel,
    targets: &AttackTargets,
    state: &SearchState,
    wrt: Wrt,
) -> Result<Evaluation, AttackError> {
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let t = g.constant(model.template.clone());
    let inputs = state.record(&g, wrt);
    let out = forward(&g, &p, t, &inputs)?;
    let loss = match targets.kind {
        LossKind::Adversarial => adversarial_loss(
            &g,
            &out,
            &targets.target,
            &targets.truth,
            Some(&targets.ori),
            &targets.weights,
        )?,
        LossKind::Track => {
            targeted_track_loss(&g, &out, &targets.target, &targets.truth, &targets.weights)?
        }
    };
    let (d_rgb, d_event) = if wrt.rgb || wrt.event {
        let grads = g.backward(loss)?;
        let event_var = inputs.voxels().or(inputs.frame());
        (
            inputs.rgb.filter(|_| wrt.rgb).map(|v| grads.wrt(v)),
            event_var.filter(|_| wrt.event).map(|v| grads.wrt(v)),
        )
    } else {
        (None, None)
    };
    Ok(Evaluation {
        loss: g.item(loss),
        output: out.output(&g),
        d_rgb,
        d_event,
    })
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub state: SearchState,
    /// Loss before each of the `M` steps and after the last.
    pub trace: Vec<f64>,
    pub before: TrackerOutput,
    pub after: TrackerOutput,
}

/// Which part of the state a [`Knob`] moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Field {
    Rgb,
    Event,
}

/// One perturbed quantity: its projection center, valid range, and which
/// elements may move. `unit` converts budget units into element units, so
/// element `i` moves at most `eps * unit[i]` by steps of `alpha * unit[i]`.
#[derive(Debug, Clone)]
pub(crate) struct Knob {
    pub field: Field,
    pub origin: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub movable: Vec<bool>,
    pub unit: Vec<f64>,
    pub eps: f64,
}

impl Knob {
    /// Pixel grid in `[0, 255]` centered on `origin`.
    pub fn pixels(field: Field, origin: &Tensor, eps: f64) -> Self {
        let n = origin.numel();
        Self {
            field,
            origin: origin.data().to_vec(),
            lo: vec![0.0; n],
            hi: vec![255.0; n],
            movable: vec![true; n],
            unit: vec![1.0; n],
            eps,
        }
    }

    /// Voxel rows of `v`; `axes[c]` selects which of `(vx, vy, vz, vf)` move.
    /// Coordinates are budgeted in search-patch pixels (`1 / cell_px` grid
    /// units each, on every axis), features in events.
    pub fn voxels(v: &VoxelSet, axes: [bool; 4], eps: f64) -> Self {
        let t = v.to_tensor();
        let [mx, my, mz] = v.coord_max();
        let kmax = v.k_max() as f64;
        let cell = 1.0 / v.cell_px() as f64;
        let n = v.capacity();
        let mut lo = Vec::with_capacity(4 * n);
        let mut hi = Vec::with_capacity(4 * n);
        let mut movable = Vec::with_capacity(4 * n);
        let mut unit = Vec::with_capacity(4 * n);
        for i in 0..n {
            lo.extend([0.0, 0.0, 0.0, -kmax]);
            hi.extend([mx, my, mz, kmax]);
            movable.extend(axes.map(|a| a && i < v.occupied()));
            unit.extend([cell, cell, cell, 1.0]);
        }
        Self {
            field: Field::Event,
            origin: t.into_data(),
            lo,
            hi,
            movable,
            unit,
            eps,
        }
    }

    /// Projects `x` into the ε-ball around the origin and the valid range.
    pub fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            if !self.movable[i] {
                x[i] = self.origin[i];
                continue;
            }
            let o = self.origin[i];
            let r = self.eps * self.unit[i];
            let d = (x[i] - o).clamp(-r, r);
            x[i] = (o + d).clamp(self.lo[i], self.hi[i]);
        }
    }

    fn step(&self, x: &mut [f64], grad: &[f64], alpha: f64) {
        for i in 0..x.len() {
            if self.movable[i] {
                x[i] -= alpha * self.unit[i] * sign(grad[i]);
            }
        }
        self.project(x);
    }

    /// Largest deviation from the origin, in budget units.
    pub fn max_deviation(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.origin)
            .zip(&self.unit)
            .fold(0.0, |m, ((a, b), u)| m.max((a - b).abs() / u))
    }
}

/// `sign` with `sign(0) = 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Tolerance for the in-loop budget assertion; `(o + ε) - o` may differ
/// from `ε` by rounding.
pub(crate) const BUDGET_SLACK: f64 = 1e-9;

fn field_data(state: &SearchState, f: Field) -> Tensor {
    match f {
        Field::Rgb => state.rgb.clone().expect("rgb input present"),
        Field::Event => state.event_tensor().expect("event input present"),
    }
}

fn set_field(state: &mut SearchState, f: Field, t: Tensor) {
    match f {
        Field::Rgb => state.rgb = Some(t),
        Field::Event => state.set_event_tensor(t),
    }
}

/// Signed-gradient descent on every knob jointly, starting from `start`.
pub(crate) fn descend(
    model: &AttackModel,
    targets: &AttackTargets,
    start: &SearchState,
    knobs: &[Knob],
    alpha: f64,
    iters: usize,
) -> Result<AttackResult, AttackError> {
    let wrt = Wrt {
        rgb: knobs.iter().any(|k| k.field == Field::Rgb),
        event: knobs.iter().any(|k| k.field == Field::Event),
    };
    let mut state = start.clone();
    let mut trace = Vec::with_capacity(iters + 1);
    let mut before = None;
    for m in 0..iters {
        let ev = evaluate(model, targets, &state, wrt)?;
        trace.push(ev.loss);
        before.get_or_insert(ev.output);
        for k in knobs {
            let grad = match k.field {
                Field::Rgb => ev.d_rgb.as_ref(),
                Field::Event => ev.d_event.as_ref(),
            }
            .expect("gradient requested");
            if !grad.all_finite() {
                return Err(AttackError::Numeric { iteration: m });
            }
            let mut x = field_data(&state, k.field);
            k.step(x.data_mut(), grad.data(), alpha);
            assert!(
                k.max_deviation(x.data()) <= k.eps + BUDGET_SLACK,
                "budget exceeded at iteration {m}"
            );
            set_field(&mut state, k.field, x);
        }
    }
    let last = evaluate(model, targets, &state, Wrt::NONE)?;
    trace.push(last.loss);
    Ok(AttackResult {
        state,
        trace,
        before: before.unwrap_or_else(|| last.output.clone()),
        after: last.output,
    })
}

/// Iterated signed-gradient attack on the RGB search patch. `warm` is an
/// optional starting patch, projected into the budget around the clean one.
/// Returns the result and the final offset `I* - I`.
pub fn pgd_rgb(
    model: &AttackModel,
    targets: &AttackTargets,
    state: &SearchState,
    budget: &AttackBudget,
    warm: Option<&Tensor>,
) -> Result<(AttackResult, Tensor), AttackError> {
    budget.validate()?;
    let clean = state
        .rgb
        .as_ref()
        .ok_or_else(|| AttackError::Unsupported("an RGB search patch".into()))?;
    let knob = Knob::pixels(Field::Rgb, clean, budget.eps);
    let mut start = state.clone();
    if let Some(w) = warm {
        let mut x = w.clone();
        knob.project(x.data_mut());
        start.rgb = Some(x);
    }
    let res = descend(model, targets, &start, &[knob], budget.alpha, budget.iters)?;
    let adv = res.state.rgb.as_ref().expect("rgb kept");
    let eta = Tensor::new(
        clean.shape().to_vec(),
        adv.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect(),
    );
    Ok((res, eta))
}

/// Joint iterated attack on every present input with one budget. Voxel
/// coordinates move, voxel features do not.
pub fn pgd(
    model: &AttackModel,
    targets: &AttackTargets,
    state: &SearchState,
    budget: &AttackBudget,
) -> Result<AttackResult, AttackError> {
    budget.validate()?;
    descend(model, targets, state, &all_knobs(state, budget.eps), budget.alpha, budget.iters)
}

pub(crate) fn all_knobs(state: &SearchState, eps: f64) -> Vec<Knob> {
    let mut knobs = Vec::new();
    if let Some(r) = &state.rgb {
        knobs.push(Knob::pixels(Field::Rgb, r, eps));
    }
    if let Some(v) = &state.voxels {
        knobs.push(Knob::voxels(v, [true, true, true, false], eps));
    } else if let Some(f) = &state.frame {
        knobs.push(Knob::pixels(Field::Event, f, eps));
    }
    knobs
}

/// One signed-gradient step of size `eps` on every present input.
pub fn fgsm(
    model: &AttackModel,
    targets: &AttackTargets,
    state: &SearchState,
    eps: f64,
) -> Result<AttackResult, AttackError> {
    if !(eps >= 0.0) {
        return Err(AttackError::Budget(format!("eps must be >= 0, got {eps}")));
    }
    descend(model, targets, state, &all_knobs(state, eps), eps, 1)
}

/// Adds uniform noise in `[-eps, eps]` to every element and clamps to
/// `[lo, hi]`.
pub fn noise_baseline(input: &Tensor, eps: f64, lo: f64, hi: f64, seed: u64) -> Tensor {
    assert!(eps >= 0.0, "eps must be non-negative");
    if eps == 0.0 {
        return input.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = input
        .data()
        .iter()
        .map(|v| (v + rng.random_range(-eps..=eps)).clamp(lo, hi))
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

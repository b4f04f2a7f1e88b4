use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{evaluate, sign, AttackModel, AttackResult, SearchState, Wrt, BUDGET_SLACK};
use super::voxel::{
    adv_init_voxels, grad_opt_features, grad_opt_voxels, gumbel_softmax_polarity, temporal_carry,
    temporal_carry_voxels, Axes,
};
use super::{pgd_rgb, AttackBudget, AttackError, AttackTargets, Carry, PerturbationState, TargetSpec};
use crate::diffmath::Tensor;
use crate::eventcam::VoxelSet;
use crate::tracker::TrackerOutput;

/// Which inner loop of the RGB-voxel attack runs first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerOrder {
    #[default]
    RgbFirst,
    VoxelFirst,
}

/// Budgets and carry settings shared by the RGB-voxel attacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub rgb: AttackBudget,
    pub event: AttackBudget,
    pub carry: Carry,
    pub order: InnerOrder,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            rgb: AttackBudget::multimodal(),
            event: AttackBudget::multimodal(),
            carry: Carry::On,
            order: InnerOrder::RgbFirst,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    /// Attacked search inputs.
    pub state: SearchState,
    /// Voxels after injection and before optimization (`V′`).
    pub injected: Option<VoxelSet>,
    /// Offsets to carry to the next frame.
    pub carry: PerturbationState,
    pub rgb: Option<AttackResult>,
    pub event: Option<AttackResult>,
    pub before: TrackerOutput,
    pub after: TrackerOutput,
    /// Attack loss of `state`.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy)]
enum EventMode {
    Coords(Axes),
    Polarity,
}

fn offsets(adv: &Tensor, origin: &Tensor) -> Tensor {
    Tensor::new(
        adv.shape().to_vec(),
        adv.data().iter().zip(origin.data()).map(|(a, b)| a - b).collect(),
    )
}

fn run_voxel_fusion(
    model: &AttackModel,
    targets: &AttackTargets,
    clean: &SearchState,
    target: &TargetSpec,
    prev: &PerturbationState,
    cfg: &FusionConfig,
    mode: EventMode,
) -> Result<FusionResult, AttackError> {
    cfg.rgb.validate()?;
    cfg.event.validate()?;
    let before = model.output(clean)?;
    let mut state = clean.clone();

    // Injection happens once per frame, before either loop.
    let injected = clean.voxels.as_ref().map(|v| {
        let mut v1 = adv_init_voxels(v, target, cfg.seed);
        if let EventMode::Polarity = mode {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
            for vox in &mut v1.voxels_mut()[v.occupied()..] {
                let [neg, pos] = gumbel_softmax_polarity(&mut rng, [0.0, 0.0], 1.0);
                vox.vf = pos - neg;
            }
        }
        v1
    });
    state.voxels = injected.clone();

    let axes = match mode {
        EventMode::Coords(a) => a,
        EventMode::Polarity => Axes::Xyz,
    };
    let warm_rgb = clean
        .rgb
        .as_ref()
        .map(|r| temporal_carry(r, prev.eta_rgb.as_ref(), cfg.rgb.eps, cfg.carry));
    let warm_vox = match (&injected, mode) {
        (Some(v), EventMode::Coords(_)) => {
            Some(temporal_carry_voxels(v, prev.eta_event.as_ref(), cfg.event.eps, cfg.carry, axes))
        }
        _ => None,
    };
    if let Some(w) = &warm_vox {
        // the RGB loop sees the warm voxels when it runs first
        state.voxels = Some(w.clone());
    }

    let mut rgb_res = None;
    let mut eta_rgb = None;
    let mut event_res = None;
    let mut run_rgb = |state: &mut SearchState| -> Result<(), AttackError> {
        if let Some(clean_rgb) = &clean.rgb {
            let mut held = state.clone();
            held.rgb = Some(clean_rgb.clone());
            let (res, eta) = pgd_rgb(model, targets, &held, &cfg.rgb, warm_rgb.as_ref())?;
            state.rgb = res.state.rgb.clone();
            eta_rgb = Some(eta);
            rgb_res = Some(res);
        }
        Ok(())
    };
    let mut run_event = |state: &mut SearchState| -> Result<(), AttackError> {
        if let Some(v1) = &injected {
            let mut held = state.clone();
            held.voxels = Some(v1.clone());
            let res = match mode {
                EventMode::Coords(axes) => grad_opt_voxels(model, targets, &held, &cfg.event, axes, warm_vox.as_ref())?,
                EventMode::Polarity => grad_opt_features(model, targets, &held, &cfg.event)?,
            };
            state.voxels = res.state.voxels.clone();
            event_res = Some(res);
        }
        Ok(())
    };
    match cfg.order {
        InnerOrder::RgbFirst => {
            run_rgb(&mut state)?;
            run_event(&mut state)?;
        }
        InnerOrder::VoxelFirst => {
            if let Some(w) = &warm_rgb {
                state.rgb = Some(w.clone());
            }
            run_event(&mut state)?;
            run_rgb(&mut state)?;
        }
    }
    let eta_event = match (&state.voxels, &injected, mode) {
        (Some(v), Some(v1), EventMode::Coords(_)) => Some(offsets(&v.to_tensor(), &v1.to_tensor())),
        _ => None,
    };
    let last = evaluate(model, targets, &state, Wrt::NONE)?;
    Ok(FusionResult {
        state,
        injected,
        carry: PerturbationState {
            eta_rgb,
            eta_event,
            frame: None,
        },
        rgb: rgb_res,
        event: event_res,
        before,
        after: last.output,
        loss: last.loss,
    })
}

/// Cross-modal attack on an RGB plus voxel tracker for one frame.
///
/// Padding slots of the clean voxels are filled around `target` once.
/// Both inputs are warm-started from `prev` per `cfg.carry`. Then the RGB
/// patch is attacked with the voxels held, and the voxel coordinates with
/// the attacked RGB patch held (or the reverse, per `cfg.order`). Either
/// modality may be absent, which skips its loop.
pub fn attack_rgb_event_voxel(
    model: &AttackModel,
    targets: &AttackTargets,
    clean: &SearchState,
    target: &TargetSpec,
    prev: &PerturbationState,
    cfg: &FusionConfig,
) -> Result<FusionResult, AttackError> {
    run_voxel_fusion(model, targets, clean, target, prev, cfg, EventMode::Coords(Axes::Xyz))
}

/// Timestamp-only voxel attack: like [`attack_rgb_event_voxel`] with the
/// spatial coordinates frozen.
pub fn baseline_ae_adv(
    model: &AttackModel,
    targets: &AttackTargets,
    clean: &SearchState,
    target: &TargetSpec,
    prev: &PerturbationState,
    cfg: &FusionConfig,
) -> Result<FusionResult, AttackError> {
    run_voxel_fusion(model, targets, clean, target, prev, cfg, EventMode::Coords(Axes::TimeOnly))
}

/// Polarity attack: injected voxels get Gumbel-Softmax polarities, then
/// only voxel features are optimized. The RGB branch is [`pgd_rgb`].
/// Voxel offsets are not carried between frames.
pub fn baseline_dare_snn(
    model: &AttackModel,
    targets: &AttackTargets,
    clean: &SearchState,
    target: &TargetSpec,
    prev: &PerturbationState,
    cfg: &FusionConfig,
) -> Result<FusionResult, AttackError> {
    run_voxel_fusion(model, targets, clean, target, prev, cfg, EventMode::Polarity)
}

#[derive(Debug, Clone)]
pub struct UniversalResult {
    pub state: SearchState,
    /// `[1, H, W]` shared offset after the last iteration.
    pub eta: Tensor,
    /// Loss at the start of each iteration and after the last.
    pub trace: Vec<f64>,
    pub before: TrackerOutput,
    pub after: TrackerOutput,
}

fn apply_eta(clean: &SearchState, eta: &Tensor) -> SearchState {
    let add = |t: &Tensor| {
        let plane = eta.numel();
        Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .enumerate()
                .map(|(i, v)| (v + eta.data()[i % plane]).clamp(0.0, 255.0))
                .collect(),
        )
    };
    SearchState {
        rgb: clean.rgb.as_ref().map(add),
        voxels: clean.voxels.clone(),
        frame: clean.frame.as_ref().map(add),
    }
}

fn eta_step(eta: &mut Tensor, grad: &Tensor, alpha: f64, eps: f64, iteration: usize) -> Result<(), AttackError> {
    if !grad.all_finite() {
        return Err(AttackError::Numeric { iteration });
    }
    let plane = eta.numel();
    let mut summed = vec![0.0; plane];
    for (i, g) in grad.data().iter().enumerate() {
        summed[i % plane] += g;
    }
    for (e, g) in eta.data_mut().iter_mut().zip(summed) {
        *e = (*e - alpha * sign(g)).clamp(-eps, eps);
    }
    assert!(
        eta.data().iter().all(|e| e.abs() <= eps + BUDGET_SLACK),
        "universal budget exceeded at iteration {iteration}"
    );
    Ok(())
}

/// Universal perturbation shared by the RGB patch and the event frame.
///
/// Each iteration takes one signed step on `eta` from the RGB gradient
/// (summed over channels), then one from the event-frame gradient. `eta`
/// stays in `[-eps, eps]` and is what the caller carries to later frames.
pub fn attack_rgb_event_frame_universal(
    model: &AttackModel,
    targets: &AttackTargets,
    clean: &SearchState,
    budget: &AttackBudget,
    eta: &Tensor,
) -> Result<UniversalResult, AttackError> {
    budget.validate()?;
    let (rgb, frame) = match (&clean.rgb, &clean.frame) {
        (Some(r), Some(f)) => (r, f),
        _ => return Err(AttackError::Unsupported("RGB and event-frame search patches".into())),
    };
    let plane = [1, frame.shape()[1], frame.shape()[2]];
    if rgb.shape()[1..] != plane[1..] || eta.shape() != plane {
        return Err(AttackError::Unsupported(format!("a {plane:?} universal offset")));
    }
    let mut eta = eta.map(|e| e.clamp(-budget.eps, budget.eps));
    let before = model.output(clean)?;
    let mut trace = Vec::with_capacity(budget.iters + 1);
    for m in 0..budget.iters {
        let ev = evaluate(model, targets, &apply_eta(clean, &eta), Wrt::RGB)?;
        trace.push(ev.loss);
        eta_step(&mut eta, ev.d_rgb.as_ref().expect("rgb gradient"), budget.alpha, budget.eps, m)?;
        let ev = evaluate(model, targets, &apply_eta(clean, &eta), Wrt::EVENT)?;
        eta_step(&mut eta, ev.d_event.as_ref().expect("frame gradient"), budget.alpha, budget.eps, m)?;
    }
    let state = apply_eta(clean, &eta);
    let last = evaluate(model, targets, &state, Wrt::NONE)?;
    trace.push(last.loss);
    Ok(UniversalResult {
        state,
        eta,
        trace,
        before,
        after: last.output,
    })
}

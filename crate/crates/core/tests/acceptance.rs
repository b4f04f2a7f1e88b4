//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! per supporting check. The exit status fails only when a numbered criterion does.
//!
//! Trained models are built once, in order of first use, on 32 synthetic
//! sequences; every trained-model number is measured on 16 held-out ones.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use advbench::attacks::*;
use advbench::diffmath::{Graph, Tensor, Var};
use advbench::eval::*;
use advbench::eventcam::{voxelize, GridSpec, Sequence, TimeWindow, VoxelSet};
use advbench::geom::BBox;
use advbench::losses::*;
use advbench::tracker::*;
use common::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAMES: usize = 20;
const TRAIN_SEEDS: std::ops::Range<u64> = 0..32;
const HELD_OUT_SEEDS: std::ops::Range<u64> = 100..116;
const FD_TOL: f64 = 1e-4;
const SLACK: f64 = 1e-9;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

fn pct(n: usize, d: usize) -> f64 {
    100.0 * n as f64 / d.max(1) as f64
}

// ---------------------------------------------------------------- data

fn train_set() -> &'static [Sequence] {
    static S: OnceLock<Vec<Sequence>> = OnceLock::new();
    S.get_or_init(|| TRAIN_SEEDS.map(|s| sequence(s, FRAMES)).collect())
}

fn held_out() -> &'static [Sequence] {
    static S: OnceLock<Vec<Sequence>> = OnceLock::new();
    S.get_or_init(|| HELD_OUT_SEEDS.map(|s| sequence(s, FRAMES)).collect())
}

fn train_model(m: Modality, steps: usize) -> TrackerParams {
    let t = Instant::now();
    let data = build_dataset(train_set(), m, &GridSpec::default(), 24, 0.6, 1).unwrap();
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let rep = train(&TrackerParams::new(m, 1), &data, &cfg).unwrap();
    println!("  (trained {m} for {steps} steps in {:.0}s)", t.elapsed().as_secs_f64());
    rep.params
}

fn model(m: Modality) -> &'static TrackerParams {
    static RGB: OnceLock<TrackerParams> = OnceLock::new();
    static VOXEL: OnceLock<TrackerParams> = OnceLock::new();
    static RGB_VOXEL: OnceLock<TrackerParams> = OnceLock::new();
    static RGB_FRAME: OnceLock<TrackerParams> = OnceLock::new();
    match m {
        Modality::Rgb => RGB.get_or_init(|| train_model(m, 2000)),
        Modality::Voxel => VOXEL.get_or_init(|| train_model(m, 2000)),
        Modality::RgbVoxel => RGB_VOXEL.get_or_init(|| train_model(m, 1000)),
        Modality::RgbFrame => RGB_FRAME.get_or_init(|| train_model(m, 1000)),
        Modality::Frame => unreachable!("no frame-only model is needed"),
    }
}

/// A search patch with its true box and the model that attacks it.
struct Fixture<'a> {
    params: &'a TrackerParams,
    pair: PatchPair,
    truth: BBox,
}

impl<'a> Fixture<'a> {
    fn new(params: &'a TrackerParams, seq: &Sequence, k: usize, seed: u64) -> Self {
        let (pair, truth) = pair_at(seq, params.modality, k, seed);
        Self { params, pair, truth }
    }

    /// Fixture `i` of a held-out sweep: sequence `i % 16`, a frame and a
    /// search jitter drawn from `i`.
    fn held_out(params: &'a TrackerParams, i: usize) -> Self {
        let seqs = held_out();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let k = rng.random_range(1..FRAMES);
        Self::new(params, &seqs[i % seqs.len()], k, 2000 + i as u64)
    }

    fn model(&self) -> AttackModel<'a> {
        AttackModel::new(self.params, &self.pair).unwrap()
    }

    fn clean(&self) -> SearchState {
        SearchState::from_pair(&self.pair)
    }

    fn target(&self) -> TargetSpec {
        TargetSpec::far_quadrant(&self.truth)
    }

    fn targets(&self, model: &AttackModel, kind: LossKind) -> AttackTargets {
        let ori = model.output(&self.clean()).unwrap().raw_bbox;
        AttackTargets::new(&self.target(), self.truth, ori, kind)
    }
}

/// Metrics and per-frame attack losses of one tracking run over the
/// held-out sequences.
struct Run {
    metrics: Metrics,
    target_distance: f64,
    /// `(frame, iteration-0 loss, clean loss)` of every attacked frame.
    losses: Vec<(usize, f64, f64)>,
}

fn track(params: &TrackerParams, attack: Option<AttackConfig>) -> Run {
    let tracker = SurrogateTracker::new(params.clone());
    let cfg = match attack {
        Some(a) => BenchmarkConfig::attacked("acceptance", a),
        None => BenchmarkConfig::clean("acceptance"),
    };
    let mut metrics = Vec::new();
    let mut distances = Vec::new();
    let mut losses = Vec::new();
    for (i, seq) in held_out().iter().enumerate() {
        let mut records = Vec::new();
        track_sequence(&tracker, seq, &cfg, i, |o, r| {
            if let Some(a) = &o.attack {
                if let Some(&first) = a.trace.first() {
                    losses.push((r.frame, first, a.clean_loss));
                }
            }
            distances.extend(r.target_distance);
            records.push(r);
            Ok(())
        })
        .unwrap();
        metrics.push(Metrics::of(&records).unwrap());
    }
    Run {
        metrics: Metrics::mean(&metrics).unwrap(),
        target_distance: distances.iter().sum::<f64>() / distances.len() as f64,
        losses,
    }
}

fn attack(kind: AttackKind, loss: LossKind) -> AttackConfig {
    let mut cfg = AttackConfig::new(kind);
    cfg.loss = loss;
    cfg
}

fn runs() -> &'static Runs {
    static R: OnceLock<Runs> = OnceLock::new();
    R.get_or_init(Runs::default)
}

/// Benchmark runs shared by several criteria, computed on first use.
#[derive(Default)]
struct Runs {
    rgb_clean: OnceLock<Run>,
    rgb_pgd: OnceLock<Run>,
    voxel_clean: OnceLock<Run>,
    voxel_grad_opt: OnceLock<Run>,
}

impl Runs {
    fn rgb_clean(&self) -> &Run {
        self.rgb_clean.get_or_init(|| track(model(Modality::Rgb), None))
    }

    fn rgb_pgd(&self) -> &Run {
        self.rgb_pgd
            .get_or_init(|| track(model(Modality::Rgb), Some(attack(AttackKind::PgdRgb, LossKind::Adversarial))))
    }

    fn voxel_clean(&self) -> &Run {
        self.voxel_clean.get_or_init(|| track(model(Modality::Voxel), None))
    }

    fn voxel_grad_opt(&self) -> &Run {
        self.voxel_grad_opt
            .get_or_init(|| track(model(Modality::Voxel), Some(attack(AttackKind::GradOpt, LossKind::Adversarial))))
    }
}

// ------------------------------------------------- gradient correctness

/// Relative error of the reverse-mode derivative along coordinate `i` of
/// the single input `x`, against a central difference. `build` records
/// the loss from `x` with its leaves, in the order of `x`'s coordinates.
fn fd_error(x: &Tensor, i: usize, build: &dyn Fn(&Graph, &Tensor, bool) -> (Var, Vec<Var>)) -> f64 {
    let g = Graph::new();
    let (root, vars) = build(&g, x, true);
    let grads = g.backward(root).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect();
    let f = |p: &Tensor| {
        let g = Graph::new();
        let (root, _) = build(&g, p, false);
        g.item(root)
    };
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    rel_err(analytic[i], central(&f, x, i, 1e-6), 1e-6 * scale.max(1e-12))
}

fn scalars(g: &Graph, x: &Tensor, leaf: bool) -> Vec<Var> {
    x.data()
        .iter()
        .map(|&v| if leaf { g.leaf(Tensor::scalar(v)) } else { g.scalar(v) })
        .collect()
}

fn box_pair(rng: &mut ChaCha8Rng) -> Tensor {
    let mut b = || {
        [
            rng.random_range(20.0..108.0),
            rng.random_range(20.0..108.0),
            rng.random_range(10.0..50.0),
            rng.random_range(10.0..50.0),
        ]
    };
    let (a, c) = (b(), b());
    Tensor::from_vec(a.into_iter().chain(c).collect())
}

fn boxes_of(v: &[Var]) -> (BoxVars, BoxVars) {
    let b = |s: &[Var]| BoxVars {
        cx: s[0],
        cy: s[1],
        w: s[2],
        h: s[3],
    };
    (b(&v[..4]), b(&v[4..8]))
}

/// Worst relative errors of the five losses over 100 random checks each.
fn loss_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = LossWeights::default();
    let mut worst = vec![("focal", 0.0f64), ("l1", 0.0), ("giou", 0.0), ("track", 0.0), ("adversarial", 0.0)];
    for _ in 0..100 {
        let pred = Tensor::from_vec((0..N).map(|_| rng.random_range(0.02..0.98)).collect());
        let gt = random_target(&mut rng, Role::True).heatmap;
        let i = rng.random_range(0..N);
        let e = fd_error(&pred, i, &|g, x, leaf| {
            let t = Tensor::new(vec![SCORE_SIZE, SCORE_SIZE], x.data().to_vec());
            let v = if leaf { g.leaf(t) } else { g.constant(t) };
            (focal_loss(g, v, &gt).unwrap(), vec![v])
        });
        worst[0].1 = worst[0].1.max(e);

        let x = box_pair(&mut rng);
        let i = rng.random_range(0..8);
        let e = fd_error(&x, i, &|g, x, leaf| {
            let v = scalars(g, x, leaf);
            let (a, b) = boxes_of(&v);
            (l1_box_loss(g, &a, &b), v)
        });
        worst[1].1 = worst[1].1.max(e);
        let e = fd_error(&x, i, &|g, x, leaf| {
            let v = scalars(g, x, leaf);
            let (a, b) = boxes_of(&v);
            (giou_loss(g, &a, &b).unwrap(), v)
        });
        worst[2].1 = worst[2].1.max(e);

        let x = random_prediction(&mut rng);
        let (t, tr, o) = (
            random_target(&mut rng, Role::Target),
            random_target(&mut rng, Role::True),
            random_target(&mut rng, Role::Ori),
        );
        let i = rng.random_range(0..N + 4);
        let e = fd_error(&x, i, &|g, x, leaf| {
            let (out, vars) = prediction(g, x, leaf);
            (track_loss(g, &out, &tr, &w).unwrap(), vars)
        });
        worst[3].1 = worst[3].1.max(e);
        let e = fd_error(&x, i, &|g, x, leaf| {
            let (out, vars) = prediction(g, x, leaf);
            (adversarial_loss(g, &out, &t, &tr, Some(&o), &w).unwrap(), vars)
        });
        worst[4].1 = worst[4].1.max(e);
    }
    worst
}

/// Keeps every voxel coordinate strictly between grid nodes, where the
/// splatting kernel is smooth.
fn off_node(v: &VoxelSet, rng: &mut ChaCha8Rng) -> VoxelSet {
    let mut v = v.clone();
    let max = v.coord_max();
    for p in v.voxels_mut() {
        p.vx = (p.vx.floor() + rng.random_range(0.2..0.8)).min(max[0] - 0.1);
        p.vy = (p.vy.floor() + rng.random_range(0.2..0.8)).min(max[1] - 0.1);
        p.vz = (p.vz.floor() + rng.random_range(0.2..0.8)).min(max[2] - 0.1);
    }
    v
}

/// Worst relative errors of the attack loss gradients through the trained
/// RGB-voxel tracker: 100 pixel checks and 100 voxel checks (25 per axis).
///
/// Checks run away from the clean input: there the prediction equals the
/// clean-output target, and the L1 and GIoU terms against it sit on a kink.
/// Pixel gradients are tiny per unit, so their step is larger.
fn surrogate_gradient_errors() -> (f64, f64) {
    let params = model(Modality::RgbVoxel);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut pixel, mut voxel) = (0.0f64, 0.0f64);
    let with_events = (500..).map(|i| Fixture::held_out(params, i)).filter(|fx| fx.pair.x_voxels().is_some_and(|v| v.occupied() > 0));
    for (f, fx) in with_events.take(10).enumerate() {
        let model = fx.model();
        let targets = fx.targets(&model, LossKind::Adversarial);
        let mut state = fx.clean();
        let v = off_node(state.voxels.as_ref().unwrap(), &mut rng);
        if let Some(r) = state.rgb.as_mut() {
            for x in r.data_mut() {
                *x = (*x + rng.random_range(-2.0..2.0)).clamp(0.0, 255.0);
            }
        }
        let occupied = v.occupied();
        state.voxels = Some(v);
        let ev = evaluate(&model, &targets, &state, Wrt::BOTH).unwrap();
        let loss_with = |s: &SearchState| evaluate(&model, &targets, s, Wrt::NONE).unwrap().loss;

        let d_rgb = ev.d_rgb.unwrap();
        let scale = d_rgb.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let rgb = state.rgb.clone().unwrap();
        let f_rgb = |x: &Tensor| {
            let mut s = state.clone();
            s.rgb = Some(x.clone());
            loss_with(&s)
        };
        for _ in 0..10 {
            let i = rng.random_range(0..rgb.numel());
            let e = rel_err(d_rgb.data()[i], central(&f_rgb, &rgb, i, 0.05), 1e-6 * scale);
            pixel = pixel.max(e);
        }

        let d_vox = ev.d_event.unwrap();
        let scale = d_vox.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x = state.voxels.as_ref().unwrap().to_tensor();
        let f_vox = |x: &Tensor| {
            let mut s = state.clone();
            s.voxels = Some(s.voxels.as_ref().unwrap().with_tensor(x));
            loss_with(&s)
        };
        for j in 0..10 {
            let i = 4 * rng.random_range(0..occupied) + (f * 10 + j) % 4;
            let e = rel_err(d_vox.data()[i], central(&f_vox, &x, i, 1e-4), 1e-6 * scale);
            voxel = voxel.max(e);
        }
    }
    (pixel, voxel)
}

fn criterion_1() -> Check {
    model(Modality::RgbVoxel);
    let t = Instant::now();
    let mut worst = loss_gradient_errors();
    let (pixel, voxel) = surrogate_gradient_errors();
    worst.push(("d/dpixel", pixel));
    worst.push(("d/dvoxel", voxel));
    let secs = t.elapsed().as_secs_f64();
    let pass = worst.iter().all(|w| w.1 <= FD_TOL) && secs <= 120.0;
    let list: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(pass, format!("worst relative error {} (<= {FD_TOL:.0e}); {secs:.0}s excluding training", list.join(", ")))
}

// ----------------------------------------------------- voxelization

fn criterion_2() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mismatches = 0;
    let mut events = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..120), rng.random_range(1..90));
        let t_end = rng.random_range(1..200_000u64);
        let n = rng.random_range(0..=10_000);
        let stream = random_stream(&mut rng, n, w, h, t_end);
        let spec = GridSpec {
            cell_px: rng.random_range(1..8),
            bins: rng.random_range(1..12),
            n_cap: rng.random_range(1..3000),
            k_max: rng.random_range(1..12),
        };
        let a = rng.random_range(0..=t_end);
        let window = TimeWindow::new(a, rng.random_range(a..=t_end));
        events += n;
        if as_cells(&voxelize(&stream, window, &spec)) != binning_oracle(&stream, window, &spec) {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs <= 60.0,
        format!("{mismatches}/1000 streams differ from the binning oracle ({events} events); {secs:.0}s"),
    )
}

// ---------------------------------------------------------- budgets

fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn bits(s: &SearchState) -> Vec<u64> {
    let mut out = Vec::new();
    for t in [&s.rgb, &s.frame].into_iter().flatten() {
        out.extend(t.data().iter().map(|v| v.to_bits()));
    }
    if let Some(v) = &s.voxels {
        out.extend(v.to_tensor().data().iter().map(|v| v.to_bits()));
        out.push(v.occupied() as u64);
    }
    out
}

/// Largest coordinate offset (search-patch pixels) and feature offset.
fn voxel_offsets(a: &VoxelSet, b: &VoxelSet) -> (f64, f64) {
    let c = a.cell_px() as f64;
    a.slots().iter().zip(b.slots()).fold((0.0, 0.0), |(xyz, f), (p, q)| {
        let d = (p.vx - q.vx).abs().max((p.vy - q.vy).abs()).max((p.vz - q.vz).abs());
        (f64::max(xyz, d * c), f64::max(f, (p.vf - q.vf).abs()))
    })
}

/// Pixel fields of `s` stay within `eps` of `clean`.
fn pixels_within(s: &SearchState, clean: &SearchState, eps: f64) -> bool {
    let ok = |a: &Option<Tensor>, b: &Option<Tensor>| match (a, b) {
        (Some(a), Some(b)) => linf(a, b) <= eps + SLACK && a.data().iter().all(|v| (0.0..=255.0).contains(v)),
        (None, None) => true,
        _ => false,
    };
    ok(&s.rgb, &clean.rgb) && ok(&s.frame, &clean.frame)
}

fn random_budget(rng: &mut ChaCha8Rng, zero: bool) -> AttackBudget {
    let eps = if zero { 0.0 } else { rng.random_range(0.0..12.0) };
    AttackBudget::new(eps, rng.random_range(0.1..4.0), rng.random_range(1..=3)).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-r..=r)).collect())
}

/// Outcome of one fuzzed attack run.
#[derive(Default)]
struct BudgetRun {
    within: bool,
    identity: Option<bool>,
    fgsm_matches: Option<bool>,
}

fn budget_run(kind: AttackKind, fx: &Fixture, rng: &mut ChaCha8Rng, zero: bool, seed: u64) -> BudgetRun {
    let model = fx.model();
    let t = fx.targets(&model, LossKind::Adversarial);
    let clean = fx.clean();
    let b = random_budget(rng, zero);
    let ident = |s: &SearchState, reference: &SearchState| zero.then(|| bits(s) == bits(reference));
    match kind {
        AttackKind::Noise => {
            let mut cfg = AttackConfig::new(kind).with_budget(b);
            cfg.seed = seed;
            let out = SequenceAttacker::new(cfg).attack_frame(&model, &fx.pair, &fx.truth).unwrap();
            let vox = match (&out.state.voxels, &clean.voxels) {
                (Some(a), Some(c)) => {
                    let (d, f) = voxel_offsets(a, c);
                    d <= b.eps + SLACK && f == 0.0
                }
                _ => true,
            };
            BudgetRun {
                within: pixels_within(&out.state, &clean, b.eps) && vox,
                identity: ident(&out.state, &clean),
                ..BudgetRun::default()
            }
        }
        AttackKind::Fgsm | AttackKind::Pgd => {
            let r = if kind == AttackKind::Fgsm {
                fgsm(&model, &t, &clean, b.eps).unwrap()
            } else {
                pgd(&model, &t, &clean, &b).unwrap()
            };
            let mut within = pixels_within(&r.state, &clean, b.eps) && r.trace.len() == r.trace.len().max(2);
            if let (Some(a), Some(c)) = (&r.state.voxels, &clean.voxels) {
                let (d, f) = voxel_offsets(a, c);
                within &= d <= b.eps + SLACK && f == 0.0;
            }
            let fgsm_matches = (kind == AttackKind::Fgsm && b.eps > 0.0).then(|| {
                let p = pgd(&model, &t, &clean, &AttackBudget::new(b.eps, b.eps, 1).unwrap()).unwrap();
                bits(&p.state) == bits(&r.state)
            });
            BudgetRun {
                within,
                identity: ident(&r.state, &clean),
                fgsm_matches,
            }
        }
        AttackKind::PgdRgb => {
            let c = clean.rgb.as_ref().unwrap();
            let warm = Tensor::new(
                c.shape().to_vec(),
                c.data().iter().map(|v| v + rng.random_range(-30.0..30.0)).collect(),
            );
            let (r, eta) = pgd_rgb(&model, &t, &clean, &b, Some(&warm)).unwrap();
            BudgetRun {
                within: pixels_within(&r.state, &clean, b.eps)
                    && eta.data().iter().all(|e| e.abs() <= b.eps + SLACK)
                    && r.trace.len() == b.iters + 1,
                identity: ident(&r.state, &clean),
                ..BudgetRun::default()
            }
        }
        AttackKind::AdvInit => {
            let v = clean.voxels.as_ref().unwrap();
            let out = adv_init_voxels(v, &fx.target(), seed);
            BudgetRun {
                within: out.voxels()[..v.occupied()] == *v.voxels() && out.occupied() == out.capacity(),
                ..BudgetRun::default()
            }
        }
        AttackKind::GradOpt => {
            let mut start = clean.clone();
            let v1 = adv_init_voxels(clean.voxels.as_ref().unwrap(), &fx.target(), seed);
            start.voxels = Some(v1.clone());
            let shift = random_tensor(rng, &[v1.capacity(), 4], 6.0);
            let warm = v1.with_tensor(&Tensor::new(
                shift.shape().to_vec(),
                v1.to_tensor().data().iter().zip(shift.data()).map(|(a, d)| a + d).collect(),
            ));
            let r = grad_opt_voxels(&model, &t, &start, &b, Axes::Xyz, Some(&warm)).unwrap();
            let (d, f) = voxel_offsets(r.state.voxels.as_ref().unwrap(), &v1);
            BudgetRun {
                within: d <= b.eps + SLACK && f == 0.0 && r.trace.len() == b.iters + 1,
                identity: ident(&r.state, &start),
                ..BudgetRun::default()
            }
        }
        AttackKind::FusionVoxel | AttackKind::AeAdv | AttackKind::DareSnn => {
            let event = random_budget(rng, zero);
            let cap = clean.voxels.as_ref().unwrap().capacity();
            let prev = PerturbationState {
                eta_rgb: clean.rgb.as_ref().map(|r| random_tensor(rng, r.shape(), 30.0)),
                eta_event: Some(random_tensor(rng, &[cap, 4], 5.0)),
                frame: Some(0),
            };
            let cfg = FusionConfig {
                rgb: b,
                event,
                carry: [Carry::On, Carry::Negated, Carry::Off][rng.random_range(0..3)],
                order: if rng.random_bool(0.5) { InnerOrder::RgbFirst } else { InnerOrder::VoxelFirst },
                seed,
            };
            let run = match kind {
                AttackKind::FusionVoxel => attack_rgb_event_voxel,
                AttackKind::AeAdv => baseline_ae_adv,
                _ => baseline_dare_snn,
            };
            let r = run(&model, &t, &clean, &fx.target(), &prev, &cfg).unwrap();
            let v1 = r.injected.clone().unwrap();
            let v = r.state.voxels.as_ref().unwrap();
            let (d, f) = voxel_offsets(v, &v1);
            let k_max = v.k_max() as f64;
            let vox = match kind {
                AttackKind::DareSnn => {
                    d == 0.0 && f <= event.eps + SLACK && v.voxels().iter().all(|p| p.vf.abs() <= k_max)
                }
                AttackKind::AeAdv => {
                    f == 0.0
                        && d <= event.eps + SLACK
                        && v.voxels().iter().zip(v1.voxels()).all(|(p, q)| p.vx == q.vx && p.vy == q.vy)
                }
                _ => f == 0.0 && d <= event.eps + SLACK,
            };
            let carried_rgb = r.carry.eta_rgb.as_ref().is_none_or(|e| e.data().iter().all(|x| x.abs() <= b.eps + SLACK));
            let carried_event = r.carry.eta_event.as_ref().is_none_or(|e| {
                let c = v.cell_px() as f64;
                e.data().iter().all(|x| x.abs() * c <= event.eps + SLACK)
            });
            let mut injected = clean.clone();
            injected.voxels = Some(v1);
            BudgetRun {
                within: pixels_within(&r.state, &clean, b.eps) && vox && carried_rgb && carried_event,
                identity: (zero && event.eps == 0.0).then(|| bits(&r.state) == bits(&injected)),
                ..BudgetRun::default()
            }
        }
        AttackKind::UniversalFrame => {
            let eta0 = random_tensor(rng, &[1, SEARCH_PX, SEARCH_PX], 2.0 * b.eps);
            let u = attack_rgb_event_frame_universal(&model, &t, &clean, &b, &eta0).unwrap();
            BudgetRun {
                within: u.eta.data().iter().all(|e| e.abs() <= b.eps)
                    && pixels_within(&u.state, &clean, b.eps)
                    && u.trace.len() == b.iters + 1,
                identity: ident(&u.state, &clean),
                ..BudgetRun::default()
            }
        }
    }
}

fn criterion_3() -> Check {
    let t = Instant::now();
    let modalities = [Modality::Rgb, Modality::Voxel, Modality::Frame, Modality::RgbVoxel, Modality::RgbFrame];
    let params: Vec<TrackerParams> = modalities.iter().map(|&m| generic_params(m, 30)).collect();
    let fixtures: Vec<Fixture> = params
        .iter()
        .flat_map(|p| (0..2).map(move |i| Fixture::held_out(p, 300 + i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut outside, mut not_identity, mut identity_runs, mut fgsm_differs, mut fgsm_runs) = (0, 0, 0, 0, 0);
    for run in 0..1000usize {
        let kind = AttackKind::ALL[run % AttackKind::ALL.len()];
        let choices: Vec<&Fixture> = fixtures.iter().filter(|f| kind.supports(f.params.modality)).collect();
        let fx = choices[rng.random_range(0..choices.len())];
        let zero = (run / AttackKind::ALL.len()) % 10 == 0;
        let r = budget_run(kind, fx, &mut rng, zero, run as u64);
        outside += usize::from(!r.within);
        if let Some(ok) = r.identity {
            identity_runs += 1;
            not_identity += usize::from(!ok);
        }
        if let Some(ok) = r.fgsm_matches {
            fgsm_runs += 1;
            fgsm_differs += usize::from(!ok);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        outside == 0 && not_identity == 0 && fgsm_differs == 0 && identity_runs > 0 && fgsm_runs > 0,
        format!(
            "1000 runs over {} attacks: {outside} left the budget (every iteration is also asserted in-loop); \
             {not_identity}/{identity_runs} eps=0 runs not the identity; \
             {fgsm_differs}/{fgsm_runs} fgsm runs differ from one-step pgd; {secs:.0}s",
            AttackKind::ALL.len()
        ),
    )
}

// --------------------------------------------------------- efficacy

fn criterion_4() -> Check {
    let t = Instant::now();
    model(Modality::Rgb);
    let clean = runs().rgb_clean();
    let pgd = runs().rgb_pgd();
    let secs = t.elapsed().as_secs_f64();
    let drop = 1.0 - pgd.metrics.sr / clean.metrics.sr;
    let shrink = 1.0 - pgd.target_distance / clean.target_distance;
    check(
        clean.metrics.sr >= 50.0 && drop >= 0.6 && shrink >= 0.5 && secs <= 1200.0,
        format!(
            "clean SR {:.1} (>= 50); PGD-RGB SR {:.1}, a {:.0}% drop (>= 60%); target distance {:.1} -> {:.1} px, \
             {:.0}% shorter (>= 50%); {secs:.0}s including training",
            clean.metrics.sr,
            pgd.metrics.sr,
            100.0 * drop,
            clean.target_distance,
            pgd.target_distance,
            100.0 * shrink
        ),
    )
}

fn criterion_5() -> Check {
    let clean = runs().voxel_clean().metrics.sr;
    let init = track(model(Modality::Voxel), Some(attack(AttackKind::AdvInit, LossKind::Adversarial))).metrics.sr;
    let opt = runs().voxel_grad_opt().metrics.sr;
    check(
        clean - init >= 3.0 && init - opt >= 3.0,
        format!("SR clean {clean:.1} > AdvInit {init:.1} > AdvInit+GradOpt {opt:.1} (gaps >= 3)"),
    )
}

fn criterion_6() -> Check {
    let voxel_adv = runs().voxel_grad_opt().metrics.pr;
    let voxel_track = track(model(Modality::Voxel), Some(attack(AttackKind::GradOpt, LossKind::Track))).metrics.pr;
    let rgb_adv = runs().rgb_pgd().metrics.pr;
    let rgb_track = track(model(Modality::Rgb), Some(attack(AttackKind::PgdRgb, LossKind::Track))).metrics.pr;
    check(
        voxel_adv <= voxel_track + 1.0 && rgb_adv <= rgb_track + 1.0,
        format!(
            "PR adversarial vs track loss: GradOpt {voxel_adv:.1} vs {voxel_track:.1}, PGD-RGB {rgb_adv:.1} vs {rgb_track:.1} \
             (adversarial <= track + 1)"
        ),
    )
}

fn criterion_7() -> Check {
    let later: Vec<_> = runs().rgb_pgd().losses.iter().filter(|l| l.0 > 3).collect();
    let ok = later.iter().filter(|l| l.1 <= l.2).count();
    check(
        pct(ok, later.len()) >= 80.0,
        format!(
            "PGD-RGB with carry: warm iteration-0 loss <= cold on {ok}/{} frames after frame 3 ({:.1}%, >= 80%)",
            later.len(),
            pct(ok, later.len())
        ),
    )
}

/// Search patch centered on the true box of frame `k`.
fn centered_pair(seq: &Sequence, m: Modality, k: usize) -> (PatchPair, BBox) {
    let gt = seq.boxes[k];
    let pair = build_pair(seq, m, &GridSpec::default(), (0, &seq.boxes[0]), k, &gt).unwrap();
    (pair, frame_to_patch(&gt, &gt))
}

fn with_offset(clean: &SearchState, eta: &Tensor) -> SearchState {
    let plane = eta.numel();
    let add = |t: &Tensor| {
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

fn criterion_8() -> Check {
    let params = model(Modality::RgbFrame);
    let (mut lower, mut total) = (0, 0);
    for seq in held_out() {
        let fit = ((seq.len() - 1) as f64 * 0.75).round() as usize;
        let (w, h) = (seq.boxes[0].w, seq.boxes[0].h);
        let s = SEARCH_PX as f64;
        let target = TargetChoice::Fixed(TargetSpec { bbox: BBox::from_center(0.75 * s, 0.75 * s, w, h) }.clamped().bbox);
        let mut cfg = AttackConfig::new(AttackKind::UniversalFrame);
        cfg.target = target;
        let mut attacker = SequenceAttacker::new(cfg);
        for k in 1..=fit {
            let (pair, truth) = centered_pair(seq, Modality::RgbFrame, k);
            let model = AttackModel::new(params, &pair).unwrap();
            attacker.attack_frame(&model, &pair, &truth).unwrap();
        }
        let eta = attacker.universal().unwrap().clone();
        for k in fit + 1..seq.len() {
            let (pair, truth) = centered_pair(seq, Modality::RgbFrame, k);
            let model = AttackModel::new(params, &pair).unwrap();
            let clean = SearchState::from_pair(&pair);
            let ori = model.output(&clean).unwrap().raw_bbox;
            let targets = AttackTargets::new(&target.resolve(&truth), truth, ori, LossKind::Adversarial);
            let before = evaluate(&model, &targets, &clean, Wrt::NONE).unwrap().loss;
            let after = evaluate(&model, &targets, &with_offset(&clean, &eta), Wrt::NONE).unwrap().loss;
            lower += usize::from(after < before);
            total += 1;
        }
    }
    check(
        pct(lower, total) >= 70.0,
        format!(
            "offset fit on the first 75% of frames lowers the loss on {lower}/{total} later frames ({:.1}%, >= 70%)",
            pct(lower, total)
        ),
    )
}

fn criterion_9() -> Check {
    let inputs: Vec<SequenceInput> = held_out().iter().cloned().map(SequenceInput::Loaded).collect();
    let perfect = run_benchmark(&OracleTracker, &inputs, &BenchmarkConfig::clean("perfect")).aggregate.unwrap();
    let records: Vec<FrameRecord> = held_out()
        .iter()
        .flat_map(|s| s.boxes.iter().enumerate())
        .map(|(k, b)| FrameRecord::new(k, *b, BBox::new(b.right() + 30.0, b.bottom() + 30.0, b.w, b.h)))
        .collect();
    let disjoint = Metrics::of(&records).unwrap();

    let report = run_benchmark(&Drift, &inputs[..2], &BenchmarkConfig::clean("drift"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    write_report(&report, &path).unwrap();
    let round_trip = read_report(&path).unwrap() == report;
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/drift_report.json");
    let golden = std::fs::read_to_string(golden_path).unwrap_or_default();
    let fresh = run_benchmark(
        &Drift,
        &[11, 12].map(|s| SequenceInput::Loaded(sequence(s, 10))),
        &BenchmarkConfig::clean("drift"),
    );
    let golden_equal = fresh.to_json().unwrap() == golden;

    let all100 = perfect.pr == 100.0 && perfect.npr == 100.0 && perfect.sr == 100.0;
    check(
        all100 && disjoint.sr == 0.0 && disjoint.pr < 5.0 && round_trip && golden_equal,
        format!(
            "perfect PR/NPR/SR {}/{}/{}; disjoint SR {} PR {}; round trip {}; golden bytes {}",
            perfect.pr,
            perfect.npr,
            perfect.sr,
            disjoint.sr,
            disjoint.pr,
            if round_trip { "equal" } else { "differ" },
            if golden_equal { "equal" } else { "differ" }
        ),
    )
}

// ------------------------------------------------ supporting checks

fn fgsm_descends() -> Check {
    let params = model(Modality::Rgb);
    let mut ok = 0;
    for i in 0..100 {
        let fx = Fixture::held_out(params, i);
        let model = fx.model();
        let r = fgsm(&model, &fx.targets(&model, LossKind::Adversarial), &fx.clean(), 10.0).unwrap();
        ok += usize::from(r.trace[1] <= r.trace[0]);
    }
    check(ok >= 90, format!("FGSM (eps 10) lowers the loss on {ok}/100 trained-model fixtures (>= 90)"))
}

fn pgd_moves_toward_corner() -> Check {
    let params = model(Modality::Rgb);
    let mut closer = 0;
    for (i, seq) in held_out().iter().enumerate() {
        let fx = Fixture::new(params, seq, 1, 700 + i as u64);
        let model = fx.model();
        let corner = TargetSpec {
            bbox: BBox::new(0.0, 0.0, fx.truth.w, fx.truth.h),
        }
        .clamped();
        let ori = model.output(&fx.clean()).unwrap().raw_bbox;
        let t = AttackTargets::new(&corner, fx.truth, ori, LossKind::Adversarial);
        let (r, _) = pgd_rgb(&model, &t, &fx.clean(), &AttackBudget::unimodal(), None).unwrap();
        let d = |b: &BBox| b.center_distance(&corner.bbox);
        closer += usize::from(d(&r.after.raw_bbox) < d(&r.before.raw_bbox));
    }
    let n = held_out().len();
    check(
        closer == n,
        format!("PGD-RGB toward the top-left corner moves the prediction closer on {closer}/{n} held-out fixtures"),
    )
}

fn grad_opt_descends() -> Check {
    let params = model(Modality::Voxel);
    let mut ok = 0;
    for i in 0..100 {
        let fx = Fixture::held_out(params, 100 + i);
        let model = fx.model();
        let mut state = fx.clean();
        state.voxels = Some(adv_init_voxels(state.voxels.as_ref().unwrap(), &fx.target(), i as u64));
        let b = AttackBudget::multimodal();
        let r = grad_opt_voxels(&model, &fx.targets(&model, LossKind::Adversarial), &state, &b, Axes::Xyz, None).unwrap();
        ok += usize::from(r.trace[b.iters] <= r.trace[0]);
    }
    check(ok >= 90, format!("GradOpt ends below its starting loss on {ok}/100 trained-model fixtures (>= 90)"))
}

/// Final attack losses on the RGB-voxel tracker of the joint attack, the
/// RGB-only and voxel-only ablations, and the timestamp-only baseline.
fn fusion_losses() -> &'static Vec<[f64; 4]> {
    static L: OnceLock<Vec<[f64; 4]>> = OnceLock::new();
    L.get_or_init(|| {
        let params = model(Modality::RgbVoxel);
        (0..50)
            .map(|i| {
                let fx = Fixture::held_out(params, 200 + i);
                let model = fx.model();
                let t = fx.targets(&model, LossKind::Adversarial);
                let clean = fx.clean();
                let cfg = FusionConfig {
                    carry: Carry::Off,
                    seed: i as u64,
                    ..FusionConfig::default()
                };
                let prev = PerturbationState::default();
                let joint = attack_rgb_event_voxel(&model, &t, &clean, &fx.target(), &prev, &cfg).unwrap().loss;
                let time_only = baseline_ae_adv(&model, &t, &clean, &fx.target(), &prev, &cfg).unwrap().loss;
                let (rgb, _) = pgd_rgb(&model, &t, &clean, &cfg.rgb, None).unwrap();
                let mut v1 = clean.clone();
                v1.voxels = Some(adv_init_voxels(clean.voxels.as_ref().unwrap(), &fx.target(), cfg.seed));
                let vox = grad_opt_voxels(&model, &t, &v1, &cfg.event, Axes::Xyz, None).unwrap();
                [joint, *rgb.trace.last().unwrap(), *vox.trace.last().unwrap(), time_only]
            })
            .collect()
    })
}

fn joint_beats_single_modality() -> Check {
    let l = fusion_losses();
    let ok = l.iter().filter(|x| x[0] <= x[1].min(x[2])).count();
    check(
        pct(ok, l.len()) >= 70.0,
        format!("joint RGB+voxel loss <= min(RGB-only, voxel-only) on {ok}/{} fixtures (>= 70%)", l.len()),
    )
}

fn xyz_beats_time_only() -> Check {
    let l = fusion_losses();
    let ok = l.iter().filter(|x| x[0] <= x[3]).count();
    check(
        pct(ok, l.len()) >= 60.0,
        format!("xyz voxel attack loss <= timestamp-only loss on {ok}/{} fixtures (>= 60%)", l.len()),
    )
}

fn harm_ordering() -> Check {
    let params = model(Modality::Rgb);
    let clean = runs().rgb_clean().metrics.sr;
    let noise = track(params, Some(attack(AttackKind::Noise, LossKind::Adversarial))).metrics.sr;
    let fgsm = track(params, Some(attack(AttackKind::Fgsm, LossKind::Adversarial))).metrics.sr;
    let pgd = runs().rgb_pgd().metrics.sr;
    check(
        clean - noise >= 5.0 && noise - fgsm >= 5.0 && fgsm - pgd >= 5.0,
        format!("SR clean {clean:.1} >= noise {noise:.1} >= FGSM {fgsm:.1} >= PGD-RGB {pgd:.1}, margins >= 5"),
    )
}

fn cross_modal_ordering() -> Check {
    let params = model(Modality::RgbVoxel);
    let pr = |k| track(params, Some(attack(k, LossKind::Adversarial))).metrics.pr;
    let (ours, ae, dare) = (pr(AttackKind::FusionVoxel), pr(AttackKind::AeAdv), pr(AttackKind::DareSnn));
    check(
        ours <= ae && ours <= dare,
        format!("PR under attack on the RGB-voxel tracker: fusion {ours:.1}, timestamp-only {ae:.1}, polarity {dare:.1} (fusion lowest)"),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: Vec<(&str, &str, fn() -> Check)> = vec![
        ("criterion 1", "gradient correctness", criterion_1),
        ("criterion 2", "voxelization oracle", criterion_2),
        ("criterion 3", "budget invariants", criterion_3),
        ("criterion 4", "desk-scale efficacy", criterion_4),
        ("criterion 5", "voxel-attack ordering", criterion_5),
        ("criterion 6", "loss-ablation ordering", criterion_6),
        ("criterion 7", "temporal carry", criterion_7),
        ("criterion 8", "universal-perturbation generalization", criterion_8),
        ("criterion 9", "metric fixtures", criterion_9),
        ("check", "fgsm descent", fgsm_descends),
        ("check", "pgd-rgb toward a corner", pgd_moves_toward_corner),
        ("check", "grad-opt descent", grad_opt_descends),
        ("check", "joint vs single modality", joint_beats_single_modality),
        ("check", "xyz vs timestamp-only", xyz_beats_time_only),
        ("check", "cross-modal attack ordering", cross_modal_ordering),
        ("check", "harm ordering", harm_ordering),
    ];
    let start = Instant::now();
    // [criteria, supporting checks] as (ran, failed).
    let mut tally = [(0, 0); 2];
    for (id, name, run) in checks {
        let label = format!("{id}: {name}");
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let c = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            check(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let slot = &mut tally[usize::from(id == "check")];
        slot.0 += 1;
        slot.1 += usize::from(!c.pass);
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {label} ({:.0}s): {}", t.elapsed().as_secs_f64(), c.detail);
    }
    let [(criteria, failed), (checks, checks_failed)] = tally;
    println!(
        "acceptance: {} of {criteria} criteria passed; {} of {checks} supporting checks passed; {:.0}s",
        criteria - failed,
        checks - checks_failed,
        start.elapsed().as_secs_f64()
    );
    // Only the numbered criteria gate the exit status; supporting checks
    // report properties that are known not to hold everywhere.
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

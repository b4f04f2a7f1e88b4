use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::crop::{build_pair, frame_to_patch};
use super::net::{forward, search_inputs, template_var, PatchPair};
use super::{Modality, TrackerError, TrackerParams};
use crate::diffmath::Graph;
use crate::eventcam::{GridSpec, Sequence};
use crate::geom::BBox;
use crate::losses::{track_loss, LossError, LossWeights, Role, TrackTarget};

/// A patch pair with the true box in search-patch pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub pair: PatchPair,
    pub target: TrackTarget,
}

impl LabeledPair {
    pub fn new(pair: PatchPair, bbox: BBox) -> Self {
        Self {
            pair,
            target: TrackTarget::from_box(bbox, Role::True),
        }
    }
}

/// Samples `per_sequence` search patches from each sequence, centered on a
/// jittered copy of the true box. Shifts are uniform within `jitter` box
/// sizes and the crop size varies by up to 15%.
pub fn build_dataset(
    sequences: &[Sequence],
    modality: Modality,
    grid: &GridSpec,
    per_sequence: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<LabeledPair>, TrackerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sequences.len() * per_sequence);
    for seq in sequences {
        if seq.len() < 2 {
            return Err(TrackerError::Config(format!("sequence {} has fewer than two frames", seq.name)));
        }
        for _ in 0..per_sequence {
            let k = rng.random_range(1..seq.len());
            let gt = seq.boxes[k];
            let (cx, cy) = gt.center();
            let dx = rng.random_range(-jitter..=jitter) * gt.w;
            let dy = rng.random_range(-jitter..=jitter) * gt.h;
            let s = rng.random_range(0.85..=1.15);
            let search = BBox::from_center(cx + dx, cy + dy, gt.w * s, gt.h * s);
            let pair = build_pair(seq, modality, grid, (0, &seq.boxes[0]), k, &search)?;
            out.push(LabeledPair::new(pair, frame_to_patch(&gt, &search)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 4,
            learning_rate: 3e-3,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: TrackerParams,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

fn loss_err(e: LossError) -> TrackerError {
    match e {
        LossError::Diff(d) => TrackerError::Diff(d),
        other => TrackerError::Config(other.to_string()),
    }
}

/// Loss of one example and its gradient for every parameter tensor.
pub(crate) fn example_gradient(
    params: &TrackerParams,
    ex: &LabeledPair,
    weights: &LossWeights,
) -> Result<(f64, Vec<Vec<f64>>), TrackerError> {
    let g = Graph::new();
    let p = params.bind(&g, true);
    let t = template_var(&g, &p, &ex.pair)?;
    let out = forward(&g, &p, t, &search_inputs(&g, &ex.pair, false))?;
    let loss = track_loss(&g, &out, &ex.target, weights).map_err(loss_err)?;
    let grads = g.backward(loss)?;
    let per_tensor = p.vars().into_iter().map(|v| grads.wrt(v).into_data()).collect();
    Ok((g.item(loss), per_tensor))
}

/// Composite tracking loss of `params` on one example.
pub fn example_loss(params: &TrackerParams, ex: &LabeledPair, weights: &LossWeights) -> Result<f64, TrackerError> {
    let g = Graph::new();
    let p = params.bind(&g, false);
    let t = template_var(&g, &p, &ex.pair)?;
    let out = forward(&g, &p, t, &search_inputs(&g, &ex.pair, false))?;
    Ok(g.item(track_loss(&g, &out, &ex.target, weights).map_err(loss_err)?))
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAX_GRAD_NORM: f64 = 5.0;

/// Minimizes the tracking loss with Adam on minibatches drawn from `data`.
pub fn train(
    init: &TrackerParams,
    data: &[LabeledPair],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrackerError> {
    if data.is_empty() {
        return Err(TrackerError::Config("training set is empty".into()));
    }
    if cfg.batch == 0 || !(cfg.learning_rate > 0.0) {
        return Err(TrackerError::Config("batch must be positive and learning rate > 0".into()));
    }
    if let Some(bad) = data.iter().find(|ex| ex.pair.modality != init.modality) {
        return Err(TrackerError::Config(format!(
            "training pair is {} but the tracker is {}",
            bad.pair.modality, init.modality
        )));
    }
    let mut params = init.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| example_gradient(&params, &data[i], &cfg.weights))
            .collect::<Result<_, _>>()?;
        let scale = 1.0 / cfg.batch as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(TrackerError::Diverged { step, loss });
        }
        losses.push(loss);
        let mut grad: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        for (_, gs) in &results {
            for (acc, g) in grad.iter_mut().zip(gs) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
            }
        }
        let norm = grad.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(TrackerError::Diverged { step, loss: norm });
        }
        let clip = if norm > MAX_GRAD_NORM { MAX_GRAD_NORM / norm } else { 1.0 };
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_B1.powi(t), 1.0 - ADAM_B2.powi(t));
        for (k, tensor) in params.tensors_mut().into_iter().enumerate() {
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let gj = grad[k][j] * clip;
                m[k][j] = ADAM_B1 * m[k][j] + (1.0 - ADAM_B1) * gj;
                v[k][j] = ADAM_B2 * v[k][j] + (1.0 - ADAM_B2) * gj * gj;
                *w -= cfg.learning_rate * (m[k][j] / c1) / ((v[k][j] / c2).sqrt() + ADAM_EPS);
            }
        }
        if step % 50 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
    }
    params.meta.steps += cfg.steps;
    params.meta.seed = cfg.seed;
    params.meta.final_loss = losses.last().copied();
    Ok(TrainReport { params, losses })
}

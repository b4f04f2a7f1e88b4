//! Tracking and adversarial losses on recorded tracker outputs.
//!
//! The tracking loss `e` is a weighted sum of a penalty-reduced focal loss on
//! the score map, an L1 loss on normalized `(cx, cy, w, h)`, and a GIoU loss.
//! The adversarial loss pulls a prediction toward an attacker-chosen target
//! while pushing it away from the true box and from the clean prediction.
//! Attacks descend on it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Graph, Tensor, Var};
use crate::geom::BBox;
use crate::tracker::{cell_center, nearest_cell, OutputVars, SCORE_SIZE, SEARCH_PX};

/// Focal-loss modulation exponent on positives and negatives.
pub const FOCAL_GAMMA: f64 = 2.0;
/// Penalty-reduction exponent on negatives near a positive.
pub const FOCAL_BETA: f64 = 4.0;
/// Predictions are clamped to `[PRED_EPS, 1 - PRED_EPS]`.
pub const PRED_EPS: f64 = 1e-6;
/// Heatmap width in score cells.
pub const HEATMAP_SIGMA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: prediction {pred:?}, target {target:?}")]
    Shape { pred: Vec<usize>, target: Vec<usize> },
    #[error("adversarial loss needs the clean prediction")]
    MissingOri,
    #[error("loss weights must be non-negative and not all zero")]
    Weights,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn new(focal: f64, l1: f64, giou: f64) -> Result<Self, LossError> {
        let w = Self { focal, l1, giou };
        let v = [focal, l1, giou];
        if v.iter().any(|x| !(*x >= 0.0)) || v.iter().all(|x| *x == 0.0) {
            return Err(LossError::Weights);
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    True,
    Target,
    Ori,
}

/// A box in search-patch pixels with its center heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTarget {
    /// `[S, S]` values in `[0, 1]`.
    pub heatmap: Tensor,
    pub bbox: BBox,
    pub role: Role,
}

impl TrackTarget {
    /// Gaussian heatmap centered on the score cell nearest the box center,
    /// so the peak cell is exactly 1.
    pub fn from_box(bbox: BBox, role: Role) -> Self {
        let (cx, cy) = bbox.center();
        let (px, py) = (nearest_cell(cx), nearest_cell(cy));
        let s2 = 2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA;
        let mut data = Vec::with_capacity(SCORE_SIZE * SCORE_SIZE);
        for y in 0..SCORE_SIZE {
            for x in 0..SCORE_SIZE {
                let dx = x as f64 - px as f64;
                let dy = y as f64 - py as f64;
                data.push((-(dx * dx + dy * dy) / s2).exp());
            }
        }
        Self {
            heatmap: Tensor::new(vec![SCORE_SIZE, SCORE_SIZE], data),
            bbox,
            role,
        }
    }

    /// Target whose heatmap is 1 at the center cell and 0 elsewhere.
    pub fn one_hot(bbox: BBox, role: Role) -> Self {
        let (cx, cy) = bbox.center();
        let mut data = vec![0.0; SCORE_SIZE * SCORE_SIZE];
        data[nearest_cell(cy) * SCORE_SIZE + nearest_cell(cx)] = 1.0;
        Self {
            heatmap: Tensor::new(vec![SCORE_SIZE, SCORE_SIZE], data),
            bbox,
            role,
        }
    }

    /// Cell center nearest to the heatmap peak, in patch pixels.
    pub fn peak_center(&self) -> (f64, f64) {
        let (i, _) = self
            .heatmap
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (cell_center(i % SCORE_SIZE), cell_center(i / SCORE_SIZE))
    }
}

/// A box as four scalar vars.
#[derive(Debug, Clone, Copy)]
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

impl BoxVars {
    pub fn constant(g: &Graph, b: &BBox) -> Self {
        let (cx, cy) = b.center();
        Self {
            cx: g.scalar(cx),
            cy: g.scalar(cy),
            w: g.scalar(b.w),
            h: g.scalar(b.h),
        }
    }

    pub fn of(out: &OutputVars) -> Self {
        Self {
            cx: out.cx,
            cy: out.cy,
            w: out.w,
            h: out.h,
        }
    }

    fn corners(&self, g: &Graph) -> [Var; 4] {
        let hw = g.scale(self.w, 0.5);
        let hh = g.scale(self.h, 0.5);
        [
            g.sub(self.cx, hw),
            g.sub(self.cy, hh),
            g.add(self.cx, hw),
            g.add(self.cy, hh),
        ]
    }
}

/// Penalty-reduced focal loss averaged over positive cells (cells where the
/// ground truth is exactly 1).
pub fn focal_loss(g: &Graph, pred: Var, gt: &Tensor) -> Result<Var, LossError> {
    let ps = g.shape(pred);
    if ps != gt.shape() {
        return Err(LossError::Shape {
            pred: ps,
            target: gt.shape().to_vec(),
        });
    }
    let pos_mask = gt.map(|v| if v >= 1.0 { 1.0 } else { 0.0 });
    let num_pos = pos_mask.data().iter().sum::<f64>().max(1.0);
    let neg_w = gt.map(|v| if v >= 1.0 { 0.0 } else { (1.0 - v).powf(FOCAL_BETA) });
    let p = g.clamp(pred, PRED_EPS, 1.0 - PRED_EPS);
    let q = g.affine(p, -1.0, 1.0);
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let q_pow = g.powf(q, FOCAL_GAMMA)?;
    let p_pow = g.powf(p, FOCAL_GAMMA)?;
    let pos = g.mul(q_pow, log_p);
    let pos = g.mul(pos, g.constant(pos_mask));
    let neg = g.mul(p_pow, log_q);
    let neg = g.mul(neg, g.constant(neg_w));
    let total = g.add(pos, neg);
    let total = g.sum(total);
    Ok(g.scale(total, -1.0 / num_pos))
}

/// Mean absolute difference of `(cx, cy, w, h)` normalized by the search
/// patch side.
pub fn l1_box_loss(g: &Graph, a: &BoxVars, b: &BoxVars) -> Var {
    let terms = [(a.cx, b.cx), (a.cy, b.cy), (a.w, b.w), (a.h, b.h)];
    let mut acc: Option<Var> = None;
    for (x, y) in terms {
        let d = g.sub(x, y);
        let d = g.abs(d);
        acc = Some(match acc {
            Some(s) => g.add(s, d),
            None => d,
        });
    }
    g.scale(acc.expect("four terms"), 1.0 / (4.0 * SEARCH_PX as f64))
}

/// Generalized IoU of two boxes.
pub fn giou(g: &Graph, a: &BoxVars, b: &BoxVars) -> Result<Var, LossError> {
    let [ax0, ay0, ax1, ay1] = a.corners(g);
    let [bx0, by0, bx1, by1] = b.corners(g);
    let zero = g.scalar(0.0);
    let span = |lo0, lo1, hi0, hi1| {
        let hi = g.min(hi0, hi1);
        let lo = g.max(lo0, lo1);
        let d = g.sub(hi, lo);
        g.max(d, zero)
    };
    let iw = span(ax0, bx0, ax1, bx1);
    let ih = span(ay0, by0, ay1, by1);
    let inter = g.mul(iw, ih);
    let area_a = g.mul(a.w, a.h);
    let area_b = g.mul(b.w, b.h);
    let sum = g.add(area_a, area_b);
    let union = g.sub(sum, inter);
    let enclose = |lo0, lo1, hi0, hi1| {
        let hi = g.max(hi0, hi1);
        let lo = g.min(lo0, lo1);
        g.sub(hi, lo)
    };
    let cw = enclose(ax0, bx0, ax1, bx1);
    let ch = enclose(ay0, by0, ay1, by1);
    let c = g.mul(cw, ch);
    let iou = g.div(inter, union)?;
    let gap = g.sub(c, union);
    let penalty = g.div(gap, c)?;
    Ok(g.sub(iou, penalty))
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss(g: &Graph, a: &BoxVars, b: &BoxVars) -> Result<Var, LossError> {
    let v = giou(g, a, b)?;
    Ok(g.affine(v, -1.0, 1.0))
}

/// Weighted sum of focal, L1, and GIoU losses of `scores` and `pred`
/// against `tgt`.
pub fn track_loss_parts(
    g: &Graph,
    scores: Var,
    pred: &BoxVars,
    tgt: &TrackTarget,
    w: &LossWeights,
) -> Result<Var, LossError> {
    let b = BoxVars::constant(g, &tgt.bbox);
    let f = focal_loss(g, scores, &tgt.heatmap)?;
    let l1 = l1_box_loss(g, pred, &b);
    let gi = giou_loss(g, pred, &b)?;
    let f = g.scale(f, w.focal);
    let l1 = g.scale(l1, w.l1);
    let gi = g.scale(gi, w.giou);
    let s = g.add(f, l1);
    Ok(g.add(s, gi))
}

/// Composite tracking loss of one forward pass.
pub fn track_loss(g: &Graph, out: &OutputVars, tgt: &TrackTarget, w: &LossWeights) -> Result<Var, LossError> {
    track_loss_parts(g, out.scores, &BoxVars::of(out), tgt, w)
}

/// `e(y, target) - e(y, true) - e(y, ori)`. Descending on it pulls the
/// prediction toward the target and away from the truth and the clean output.
pub fn adversarial_loss(
    g: &Graph,
    out: &OutputVars,
    target: &TrackTarget,
    truth: &TrackTarget,
    ori: Option<&TrackTarget>,
    w: &LossWeights,
) -> Result<Var, LossError> {
    let ori = ori.ok_or(LossError::MissingOri)?;
    let pull = track_loss(g, out, target, w)?;
    let push_true = track_loss(g, out, truth, w)?;
    let push_ori = track_loss(g, out, ori, w)?;
    let d = g.sub(pull, push_true);
    Ok(g.sub(d, push_ori))
}

/// The adversarial loss without the clean-prediction term:
/// `e(y, target) - e(y, true)`.
pub fn targeted_track_loss(
    g: &Graph,
    out: &OutputVars,
    target: &TrackTarget,
    truth: &TrackTarget,
    w: &LossWeights,
) -> Result<Var, LossError> {
    let pull = track_loss(g, out, target, w)?;
    let push = track_loss(g, out, truth, w)?;
    Ok(g.sub(pull, push))
}

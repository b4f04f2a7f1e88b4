use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::geom::BBox;

/// Center-error threshold of the precision rate, pixels.
pub const PR_THRESHOLD_PX: f64 = 20.0;
/// Largest normalized center error the normalized precision integrates to.
pub const NPR_MAX: f64 = 0.5;
/// Sample points of the normalized precision curve.
pub const NPR_POINTS: usize = 51;
/// IoU thresholds of the success curve: `0, 0.05, ..., 1`.
pub const SR_POINTS: usize = 21;

/// Intersection over union, 0 when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    // Areas from the same edge arithmetic as the intersection, so that a
    // box overlaps itself with IoU exactly 1.
    let area = |r: &BBox| r.intersection_area(r);
    let inter = a.intersection_area(b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// One tracked frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub gt: BBox,
    pub pred: BBox,
    /// Center distance, pixels.
    pub center_error: f64,
    /// Center distance over the ground-truth diagonal.
    pub norm_error: f64,
    pub iou: f64,
    /// Distance of the network's center to the attacker's target center,
    /// search-patch pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_distance: Option<f64>,
}

impl FrameRecord {
    pub fn new(frame: usize, gt: BBox, pred: BBox) -> Self {
        let center_error = gt.center_distance(&pred);
        let diag = gt.w.hypot(gt.h);
        Self {
            frame,
            gt,
            pred,
            center_error,
            norm_error: if diag > 0.0 { center_error / diag } else { f64::INFINITY },
            iou: iou(&gt, &pred),
            target_distance: None,
        }
    }
}

fn fraction(records: &[FrameRecord], pass: impl Fn(&FrameRecord) -> bool) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(records.iter().filter(|r| pass(r)).count() as f64 / records.len() as f64)
}

/// Percent of frames with center error strictly below `threshold` pixels.
pub fn precision_at(records: &[FrameRecord], threshold: f64) -> Result<f64, EvalError> {
    Ok(100.0 * fraction(records, |r| r.center_error < threshold)?)
}

pub fn precision_rate(records: &[FrameRecord]) -> Result<f64, EvalError> {
    precision_at(records, PR_THRESHOLD_PX)
}

/// Points `(t, percent of frames with normalized error <= t)`.
pub fn norm_precision_curve(records: &[FrameRecord]) -> Result<Vec<(f64, f64)>, EvalError> {
    (0..NPR_POINTS)
        .map(|i| {
            let t = NPR_MAX * i as f64 / (NPR_POINTS - 1) as f64;
            Ok((t, 100.0 * fraction(records, |r| r.norm_error <= t)?))
        })
        .collect()
}

/// Mean of the normalized precision curve.
pub fn norm_precision_rate(records: &[FrameRecord]) -> Result<f64, EvalError> {
    let c = norm_precision_curve(records)?;
    Ok(c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64)
}

/// A frame passes threshold `t` when its IoU exceeds `t`; a perfect
/// overlap also passes `t = 1`.
fn success_pass(iou: f64, t: f64) -> bool {
    iou > t || iou >= 1.0
}

/// Points `(t, percent of frames passing t)`.
pub fn success_curve(records: &[FrameRecord]) -> Result<Vec<(f64, f64)>, EvalError> {
    (0..SR_POINTS)
        .map(|i| {
            let t = i as f64 / (SR_POINTS - 1) as f64;
            Ok((t, 100.0 * fraction(records, |r| success_pass(r.iou, t))?))
        })
        .collect()
}

/// Mean of the success curve.
pub fn success_rate(records: &[FrameRecord]) -> Result<f64, EvalError> {
    let c = success_curve(records)?;
    Ok(c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64)
}

/// Points `(threshold px, precision)` for thresholds 0..=50.
pub fn precision_curve(records: &[FrameRecord]) -> Result<Vec<(f64, f64)>, EvalError> {
    (0..=50)
        .map(|t| Ok((t as f64, precision_at(records, t as f64)?)))
        .collect()
}

/// Precision rate, normalized precision rate, and success rate, percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pr: f64,
    pub npr: f64,
    pub sr: f64,
}

impl Metrics {
    pub fn of(records: &[FrameRecord]) -> Result<Self, EvalError> {
        Ok(Self {
            pr: precision_rate(records)?,
            npr: norm_precision_rate(records)?,
            sr: success_rate(records)?,
        })
    }

    /// Element-wise mean.
    pub fn mean(all: &[Metrics]) -> Result<Self, EvalError> {
        if all.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = all.len() as f64;
        Ok(Self {
            pr: all.iter().map(|m| m.pr).sum::<f64>() / n,
            npr: all.iter().map(|m| m.npr).sum::<f64>() / n,
            sr: all.iter().map(|m| m.sr).sum::<f64>() / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(gt: BBox, pred: BBox) -> FrameRecord {
        FrameRecord::new(0, gt, pred)
    }

    #[test]
    fn counting_examples() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut rs: Vec<_> = (0..4).map(|_| rec(gt, BBox::new(5.0, 0.0, 10.0, 10.0))).collect();
        rs.extend((0..4).map(|_| rec(gt, BBox::new(50.0, 0.0, 10.0, 10.0))));
        assert_eq!(precision_rate(&rs).unwrap(), 50.0);
        assert!(matches!(precision_rate(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn single_frame_at_quarter_diagonal() {
        let gt = BBox::new(0.0, 0.0, 30.0, 40.0);
        // diagonal 50, so a 12.5 px shift is a normalized error of 0.25
        let r = rec(gt, BBox::new(12.5, 0.0, 30.0, 40.0));
        assert!((r.norm_error - 0.25).abs() < 1e-12);
        let npr = norm_precision_rate(&[r]).unwrap();
        assert!((npr - 50.0).abs() <= 1.0, "{npr}");
    }

    #[test]
    fn half_overlap_step() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        // iou exactly 0.5: passes t = 0, ..., 0.45
        let r = rec(gt, BBox::new(0.0, 0.0, 5.0, 10.0));
        assert_eq!(r.iou, 0.5);
        assert!((success_rate(&[r]).unwrap() - 100.0 * 10.0 / 21.0).abs() < 1e-9);
    }
}

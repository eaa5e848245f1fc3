//! Landmark-based alignment error, correctness, the alignable-pair oracle, and
//! precision-recall curves.
//!
//! Errors are normalized per frame by the object scale of the frame the landmarks are
//! mapped into: the largest distance between two of its visible landmarks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homography::{fit_homography_dlt, Homography, PointCorrespondence};
use crate::model::{LandmarkSet, Point2};
use crate::tps::TpsMapping;
use crate::ttps::TtpsMapping;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no frame has two co-visible landmarks")]
    NotEvaluable,
    #[error("landmark lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("mapping covers {got} frames, {needed} needed")]
    MissingFrames { got: usize, needed: usize },
    #[error("thresholds must be positive")]
    InvalidConfig,
    #[error("ground-truth homography fit failed: {0}")]
    OracleFit(String),
}

/// A mapping from the frames of one sequence to the matching frames of another.
pub trait FrameMapping {
    /// Number of frames covered; `None` when the mapping is the same in every frame.
    fn frames(&self) -> Option<usize>;
    fn map(&self, frame: usize, p: Point2) -> Point2;
}

impl FrameMapping for Homography {
    fn frames(&self) -> Option<usize> {
        None
    }

    fn map(&self, _frame: usize, p: Point2) -> Point2 {
        self.apply(p)
    }
}

impl FrameMapping for TpsMapping {
    fn frames(&self) -> Option<usize> {
        None
    }

    fn map(&self, _frame: usize, p: Point2) -> Point2 {
        self.apply(p)
    }
}

impl FrameMapping for [TpsMapping] {
    fn frames(&self) -> Option<usize> {
        Some(self.len())
    }

    fn map(&self, frame: usize, p: Point2) -> Point2 {
        self[frame].apply(p)
    }
}

impl FrameMapping for Vec<TpsMapping> {
    fn frames(&self) -> Option<usize> {
        Some(self.len())
    }

    fn map(&self, frame: usize, p: Point2) -> Point2 {
        self[frame].apply(p)
    }
}

impl FrameMapping for TtpsMapping {
    fn frames(&self) -> Option<usize> {
        Some(self.per_frame.len())
    }

    fn map(&self, frame: usize, p: Point2) -> Point2 {
        self.per_frame[frame].apply(p)
    }
}

/// Any `Fn(frame, point) -> point`, covering all frames.
pub struct FnMapping<F>(pub F);

impl<F: Fn(usize, Point2) -> Point2> FrameMapping for FnMapping<F> {
    fn frames(&self) -> Option<usize> {
        None
    }

    fn map(&self, frame: usize, p: Point2) -> Point2 {
        (self.0)(frame, p)
    }
}

impl<T: FrameMapping + ?Sized> FrameMapping for &T {
    fn frames(&self) -> Option<usize> {
        (**self).frames()
    }

    fn map(&self, frame: usize, p: Point2) -> Point2 {
        (**self).map(frame, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentError {
    /// Mean over evaluated frames, in units of object scale.
    pub mean_error: f64,
    /// Per-frame error; `None` for frames with fewer than two co-visible landmarks.
    pub per_frame: Vec<Option<f64>>,
    pub landmark_iou: f64,
    pub n_landmarks_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub error_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            error_threshold: 0.18,
            iou_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.error_threshold > 0.0 && self.iou_threshold > 0.0 {
            Ok(())
        } else {
            Err(EvalError::InvalidConfig)
        }
    }
}

fn visible_ids(lm: &LandmarkSet) -> BTreeSet<u8> {
    lm.visible
        .iter()
        .copied()
        .filter(|id| lm.points.contains_key(id))
        .collect()
}

/// Scale-normalized landmark transfer error of a forward (`A -> B`) and reverse mapping.
///
/// Landmarks visible in only one sequence count against the IOU but not the error.
pub fn alignment_error<F, R>(
    fwd: &F,
    rev: &R,
    lm_a: &[LandmarkSet],
    lm_b: &[LandmarkSet],
) -> Result<AlignmentError, EvalError>
where
    F: FrameMapping + ?Sized,
    R: FrameMapping + ?Sized,
{
    if lm_a.len() != lm_b.len() {
        return Err(EvalError::LengthMismatch(lm_a.len(), lm_b.len()));
    }
    let t_len = lm_a.len();
    for got in [fwd.frames(), rev.frames()].into_iter().flatten() {
        if got < t_len {
            return Err(EvalError::MissingFrames { got, needed: t_len });
        }
    }
    let mut per_frame = Vec::with_capacity(t_len);
    let mut ious = Vec::with_capacity(t_len);
    let mut used = 0;
    for (t, (a, b)) in lm_a.iter().zip(lm_b).enumerate() {
        let va = visible_ids(a);
        let vb = visible_ids(b);
        let union = va.union(&vb).count();
        let common: Vec<u8> = va.intersection(&vb).copied().collect();
        if union > 0 {
            ious.push(common.len() as f64 / union as f64);
        }
        let scales = (a.scale(), b.scale());
        let (Some(sa), Some(sb)) = scales else {
            per_frame.push(None);
            continue;
        };
        if common.len() < 2 || !(sa > 0.0) || !(sb > 0.0) {
            per_frame.push(None);
            continue;
        }
        let mut sum = 0.0;
        for id in &common {
            let pa = a.points[id];
            let pb = b.points[id];
            let e_fwd = fwd.map(t, pa).distance(pb) / sb;
            let e_rev = rev.map(t, pb).distance(pa) / sa;
            sum += 0.5 * (e_fwd + e_rev);
        }
        used += common.len();
        per_frame.push(Some(sum / common.len() as f64));
    }
    let evaluated: Vec<f64> = per_frame.iter().flatten().copied().collect();
    if evaluated.is_empty() {
        return Err(EvalError::NotEvaluable);
    }
    let mean_error = evaluated.iter().sum::<f64>() / evaluated.len() as f64;
    let landmark_iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(AlignmentError {
        mean_error: if mean_error.is_finite() { mean_error } else { f64::INFINITY },
        per_frame,
        landmark_iou,
        n_landmarks_used: used,
    })
}

/// Both thresholds are strict: `mean_error < error_threshold` and
/// `landmark_iou > iou_threshold`.
pub fn is_correct(err: &AlignmentError, cfg: &EvalConfig) -> bool {
    err.mean_error < cfg.error_threshold && err.landmark_iou > cfg.iou_threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignableOutcome {
    pub alignable: bool,
    pub homography: Option<Homography>,
    pub error: Option<AlignmentError>,
    /// Why the pair could not be judged, when it could not.
    pub flag: Option<String>,
}

/// Fits a homography to the ground-truth landmarks of all frames and judges it.
pub fn alignable_oracle(
    lm_a: &[LandmarkSet],
    lm_b: &[LandmarkSet],
    cfg: &EvalConfig,
) -> AlignableOutcome {
    let not = |flag: String| AlignableOutcome {
        alignable: false,
        homography: None,
        error: None,
        flag: Some(flag),
    };
    if lm_a.len() != lm_b.len() {
        return not(EvalError::LengthMismatch(lm_a.len(), lm_b.len()).to_string());
    }
    let mut corrs = Vec::new();
    for (t, (a, b)) in lm_a.iter().zip(lm_b).enumerate() {
        for id in visible_ids(a).intersection(&visible_ids(b)) {
            corrs.push(PointCorrespondence::new(b.points[id], a.points[id], t));
        }
    }
    let h = match fit_homography_dlt(&corrs) {
        Ok(h) => h,
        Err(e) => return not(EvalError::OracleFit(e.to_string()).to_string()),
    };
    let Some(h_inv) = h.inverse() else {
        return not(EvalError::OracleFit("singular fit".into()).to_string());
    };
    match alignment_error(&h, &h_inv, lm_a, lm_b) {
        Ok(err) => AlignableOutcome {
            alignable: is_correct(&err, cfg),
            homography: Some(h),
            error: Some(err),
            flag: None,
        },
        Err(e) => AlignableOutcome {
            homography: Some(h),
            ..not(e.to_string())
        },
    }
}

/// One returned (or failed) alignment, as needed for the precision-recall sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAlignment {
    /// `None` when no alignment was produced; such pairs are never returned.
    pub outlier_fraction: Option<f64>,
    pub error: Option<AlignmentError>,
    pub alignable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub operating_point: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_returned: usize,
    pub n_correct: usize,
    pub n_alignable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Set when no pair is alignable; recall is then reported as 0.
    pub recall_undefined: bool,
}

/// Precision and recall at each maximum tolerated outlier fraction.
pub fn precision_recall(results: &[ScoredAlignment], operating_points: &[f64], cfg: &EvalConfig) -> PrCurve {
    let n_alignable = results.iter().filter(|r| r.alignable).count();
    let correct: Vec<bool> = results
        .iter()
        .map(|r| r.error.as_ref().is_some_and(|e| is_correct(e, cfg)))
        .collect();
    let points = operating_points
        .iter()
        .map(|&o| {
            let (mut n_returned, mut n_correct) = (0, 0);
            for (r, &ok) in results.iter().zip(&correct) {
                if r.outlier_fraction.is_some_and(|f| f <= o) {
                    n_returned += 1;
                    n_correct += ok as usize;
                }
            }
            PrPoint {
                operating_point: o,
                precision: if n_returned == 0 { 0.0 } else { n_correct as f64 / n_returned as f64 },
                recall: if n_alignable == 0 { 0.0 } else { n_correct as f64 / n_alignable as f64 },
                n_returned,
                n_correct,
                n_alignable,
            }
        })
        .collect();
    PrCurve {
        points,
        recall_undefined: n_alignable == 0,
    }
}

/// Trapezoidal area under precision over recall. Points are taken in order of recall, and
/// the precision of the lowest-recall point is extended back to recall 0. Operating points
/// that return nothing have no precision and are skipped.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut pr: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.n_returned > 0)
        .map(|p| (p.recall, p.precision))
        .collect();
    pr.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let Some(&(_, p0)) = pr.first() else {
        return 0.0;
    };
    let mut prev = (0.0, p0);
    let mut area = 0.0;
    for &(r, p) in &pr {
        area += (r - prev.0) * 0.5 * (p + prev.1);
        prev = (r, p);
    }
    area
}

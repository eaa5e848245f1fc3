//! Rigid sequence alignment: normalized DLT homography fitting, RANSAC over point or
//! trajectory correspondences, and bounding-box corner regularization.
//!
//! All homographies map the first sequence of a CMP (source, `v`) onto the second
//! (target, `u`): `u ~ H v`.

mod matching;
mod ransac;

pub use matching::{match_trajectories, TrajectoryMatch};
pub use ransac::{ransac_im, ransac_tm, InlierThreshold, RansacParams};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ForegroundMask, Point2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomographyError {
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("need at least 4 trajectory matches, got {0}")]
    InsufficientMatches(usize),
    #[error("degenerate point configuration")]
    DegenerateSample,
    #[error("no hypothesis reached {needed} inliers (best {best})")]
    NoConsensus { needed: usize, best: usize },
    #[error("mask lists differ in length: {0} vs {1}")]
    FrameCountMismatch(usize, usize),
}

/// Collinearity tolerance on normalized coordinates.
const COLLINEAR_TOL: f64 = 1e-9;
/// Relative size of the second-smallest singular value below which the DLT solution is
/// not unique.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: Matrix3<f64>,
    pub inlier_fraction: f64,
    pub outlier_fraction: f64,
    /// Set when a trajectory-based fit fell back to the bounding-box corners alone.
    pub fg_fallback: bool,
}

impl Homography {
    /// Wraps a matrix, scaling it so that `h[2][2] = 1` (or to unit Frobenius norm when
    /// that entry vanishes).
    pub fn from_matrix(h: Matrix3<f64>) -> Self {
        Self {
            h: normalize_scale(h),
            inlier_fraction: 1.0,
            outlier_fraction: 0.0,
            fg_fallback: false,
        }
    }

    pub fn identity() -> Self {
        Self::from_matrix(Matrix3::identity())
    }

    pub fn with_inlier_fraction(mut self, inlier_fraction: f64) -> Self {
        self.inlier_fraction = inlier_fraction;
        self.outlier_fraction = 1.0 - inlier_fraction;
        self
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        apply_matrix(&self.h, p)
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.h.try_inverse().map(|inv| Homography {
            h: normalize_scale(inv),
            ..*self
        })
    }
}

pub(crate) fn normalize_scale(h: Matrix3<f64>) -> Matrix3<f64> {
    let h22 = h[(2, 2)];
    if h22.abs() > 1e-12 * h.norm() {
        h / h22
    } else {
        h / h.norm()
    }
}

/// Projective application of a 3x3 matrix to a point.
pub fn apply_matrix(h: &Matrix3<f64>, p: Point2) -> Point2 {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCorrespondence {
    /// Target point (second sequence).
    pub u: Point2,
    /// Source point (first sequence).
    pub v: Point2,
    /// Sequence-relative frame the pair was observed in.
    pub frame_offset: usize,
    pub weight: f64,
}

impl PointCorrespondence {
    pub fn new(u: Point2, v: Point2, frame_offset: usize) -> Self {
        Self {
            u,
            v,
            frame_offset,
            weight: 1.0,
        }
    }
}

/// Symmetric transfer error in pixels: mean of the forward and backward transfer distances.
pub fn symmetric_transfer_error(h: &Matrix3<f64>, h_inv: &Matrix3<f64>, c: &PointCorrespondence) -> f64 {
    let fwd = apply_matrix(h, c.v).distance(c.u);
    let back = apply_matrix(h_inv, c.u).distance(c.v);
    let e = 0.5 * (fwd + back);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Bounding-box corner correspondences, four per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgMatches {
    pub corrs: Vec<PointCorrespondence>,
}

impl FgMatches {
    pub fn from_masks(
        masks_a: &[ForegroundMask],
        masks_b: &[ForegroundMask],
    ) -> Result<Self, HomographyError> {
        if masks_a.len() != masks_b.len() {
            return Err(HomographyError::FrameCountMismatch(
                masks_a.len(),
                masks_b.len(),
            ));
        }
        let corrs = masks_a
            .iter()
            .zip(masks_b)
            .enumerate()
            .flat_map(|(t, (a, b))| {
                let ca = a.bbox().corners();
                let cb = b.bbox().corners();
                (0..4).map(move |k| PointCorrespondence::new(cb[k], ca[k], t))
            })
            .collect();
        Ok(Self { corrs })
    }

    pub fn frames(&self) -> usize {
        self.corrs.len() / 4
    }
}

/// Similarity moving the centroid to the origin with mean distance `sqrt(2)`.
pub(crate) fn hartley_transform(points: impl Iterator<Item = Point2> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count();
    if n == 0 {
        return None;
    }
    let c = points.clone().fold(Point2::default(), |a, p| a + p) * (1.0 / n as f64);
    let mean_dist = points.map(|p| p.distance(c)).sum::<f64>() / n as f64;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

pub(crate) fn has_collinear_triple(pts: &[Point2]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let a = pts[j] - pts[i];
                let b = pts[k] - pts[i];
                if (a.x * b.y - a.y * b.x).abs() < COLLINEAR_TOL {
                    return true;
                }
            }
        }
    }
    false
}

/// Least-squares DLT with Hartley normalization of both point sets. Each row pair is
/// scaled by the square root of the correspondence weight.
pub fn fit_homography_dlt(corrs: &[PointCorrespondence]) -> Result<Homography, HomographyError> {
    if corrs.len() < 4 {
        return Err(HomographyError::InsufficientCorrespondences(corrs.len()));
    }
    let tu = hartley_transform(corrs.iter().map(|c| c.u)).ok_or(HomographyError::DegenerateSample)?;
    let tv = hartley_transform(corrs.iter().map(|c| c.v)).ok_or(HomographyError::DegenerateSample)?;
    let nu: Vec<Point2> = corrs.iter().map(|c| apply_matrix(&tu, c.u)).collect();
    let nv: Vec<Point2> = corrs.iter().map(|c| apply_matrix(&tv, c.v)).collect();
    if corrs.len() == 4 && (has_collinear_triple(&nu) || has_collinear_triple(&nv)) {
        return Err(HomographyError::DegenerateSample);
    }

    let rows = (2 * corrs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, c) in corrs.iter().enumerate() {
        if !(c.weight > 0.0) {
            continue;
        }
        let s = c.weight.sqrt();
        let (x, y) = (nv[k].x, nv[k].y);
        let (xp, yp) = (nu[k].x, nu[k].y);
        let r0 = [0.0, 0.0, 0.0, -x, -y, -1.0, yp * x, yp * y, yp];
        let r1 = [x, y, 1.0, 0.0, 0.0, 0.0, -xp * x, -xp * y, -xp];
        for col in 0..9 {
            a[(2 * k, col)] = s * r0[col];
            a[(2 * k + 1, col)] = s * r1[col];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(HomographyError::DegenerateSample)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(largest > 0.0) || second <= RANK_TOL * largest {
        return Err(HomographyError::DegenerateSample);
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tu_inv = tu.try_inverse().ok_or(HomographyError::DegenerateSample)?;
    let full = tu_inv * hn * tv;
    let full = normalize_scale(full);
    if !full.iter().all(|x| x.is_finite()) || full.determinant().abs() < 1e-14 {
        return Err(HomographyError::DegenerateSample);
    }
    Ok(Homography::from_matrix(full))
}

/// Homography from the bounding-box corners of the two mask sequences alone.
pub fn fit_fg_only(
    masks_a: &[ForegroundMask],
    masks_b: &[ForegroundMask],
) -> Result<Homography, HomographyError> {
    let fg = FgMatches::from_masks(masks_a, masks_b)?;
    fit_homography_dlt(&fg.corrs)
}

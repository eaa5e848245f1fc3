//! Thin plate splines and TPS-RPM (robust point matching by deterministic annealing).
//!
//! A [`TpsMapping`] maps source points `v` onto target points `u`:
//! `f(p) = A p + t + sum_i w_i U(|p - c_i|)` with `U(r) = r^2 log r^2`, optionally
//! preceded by a fixed projective pre-warp.

mod rpm;

pub use rpm::{
    matching_energy, tps_rpm, update_correspondences, AnnealStep, CorrespondenceMatrix,
    TpsRpmParams, TpsRpmResult,
};

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homography::apply_matrix;
use crate::model::Point2;

/// Upper bound on control points (matches the edge-point cap).
pub const MAX_CONTROL_POINTS: usize = 1000;

/// Relative singular-value floor below which the control points are treated as collinear.
const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TpsError {
    #[error("need at least 3 point pairs, got {0}")]
    InsufficientPoints(usize),
    #[error("more than {MAX_CONTROL_POINTS} control points ({0})")]
    TooManyPoints(usize),
    #[error("control points are collinear or coincident")]
    DegenerateControlPoints,
    #[error("point lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("weights must be positive and finite")]
    InvalidWeight,
    #[error("non-finite input coordinates")]
    NonFinite,
    #[error("TPS system is singular")]
    SingularSystem,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// `U(r) = r^2 log(r^2)`, with `U(0) = 0`.
pub fn tps_kernel(r: f64) -> f64 {
    kernel_sq(r * r)
}

/// Kernel as a function of the squared distance.
#[inline]
pub(crate) fn kernel_sq(d2: f64) -> f64 {
    if d2 > 0.0 {
        d2 * d2.ln()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsMapping {
    /// Control points, expressed after the pre-warp when one is present.
    pub control_points: Vec<Point2>,
    /// Affine part acting on homogeneous points; the last row is `[0, 0, 1]`.
    pub affine: Matrix3<f64>,
    /// `N x 2` warp coefficients.
    pub warp_coeffs: DMatrix<f64>,
    /// Regularization weight, in the units of the normalized problem.
    pub lambda_used: f64,
    /// Projective map applied to input points before the spline.
    pub prewarp: Option<Matrix3<f64>>,
}

impl TpsMapping {
    pub fn identity() -> Self {
        Self::from_affine(Matrix3::identity())
    }

    /// A mapping with no non-rigid component.
    pub fn from_affine(affine: Matrix3<f64>) -> Self {
        Self {
            control_points: Vec::new(),
            affine,
            warp_coeffs: DMatrix::zeros(0, 2),
            lambda_used: 0.0,
            prewarp: None,
        }
    }

    pub fn with_prewarp(mut self, h: Matrix3<f64>) -> Self {
        self.prewarp = Some(h);
        self
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let q = match &self.prewarp {
            Some(h) => apply_matrix(h, p),
            None => p,
        };
        let a = &self.affine;
        let mut x = a[(0, 0)] * q.x + a[(0, 1)] * q.y + a[(0, 2)];
        let mut y = a[(1, 0)] * q.x + a[(1, 1)] * q.y + a[(1, 2)];
        for (i, c) in self.control_points.iter().enumerate() {
            let u = kernel_sq(q.distance_squared(*c));
            x += self.warp_coeffs[(i, 0)] * u;
            y += self.warp_coeffs[(i, 1)] * u;
        }
        Point2::new(x, y)
    }
}

pub fn apply_tps(f: &TpsMapping, pts: &[Point2]) -> Vec<Point2> {
    pts.iter().map(|&p| f.apply(p)).collect()
}

fn kernel_matrix(ctrl: &[Point2]) -> DMatrix<f64> {
    let n = ctrl.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = kernel_sq(ctrl[i].distance_squared(ctrl[j]));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `trace(w^T K w)` over the control points. Zero exactly when the warp vanishes.
pub fn bending_energy(f: &TpsMapping) -> f64 {
    let n = f.control_points.len();
    if n == 0 {
        return 0.0;
    }
    let k = kernel_matrix(&f.control_points);
    let kw = &k * &f.warp_coeffs;
    let e = f.warp_coeffs.component_mul(&kw).sum();
    e.max(0.0)
}

/// Maps points to zero mean and unit RMS radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Normalizer {
    pub center: Point2,
    pub scale: f64,
}

impl Normalizer {
    pub fn fit<'a>(points: impl Iterator<Item = &'a Point2> + Clone) -> Option<Self> {
        let n = points.clone().count();
        if n == 0 {
            return None;
        }
        let center = points.clone().fold(Point2::default(), |a, &p| a + p) * (1.0 / n as f64);
        let ms = points.map(|p| p.distance_squared(center)).sum::<f64>() / n as f64;
        if !(ms > 0.0) || !ms.is_finite() {
            return None;
        }
        Some(Self {
            center,
            scale: 1.0 / ms.sqrt(),
        })
    }

    pub fn forward(&self, p: Point2) -> Point2 {
        (p - self.center) * self.scale
    }
}

/// Scale factor [`fit_tps`] applies to these sources (reciprocal RMS radius).
pub(crate) fn normalizing_scale(points: &[Point2]) -> Option<f64> {
    Normalizer::fit(points.iter()).map(|n| n.scale)
}

/// Converts a regularization weight for the energy in the coordinates of `v` into the
/// normalized units [`fit_tps`] expects.
pub fn normalized_lambda(v: &[Point2], lambda: f64) -> Option<f64> {
    normalizing_scale(v).map(|s| lambda * s * s)
}

/// Spline solved in normalized coordinates.
#[derive(Debug, Clone)]
pub(crate) struct NormalizedTps {
    /// Rows: coefficients of `1`, `x`, `y`; columns: output `x`, `y`.
    pub affine: nalgebra::Matrix3x2<f64>,
    pub w: DMatrix<f64>,
}

/// Kernel and affine blocks for a fixed set of (normalized) control points.
pub(crate) struct KernelSystem {
    pub ctrl: Vec<Point2>,
    pub k: DMatrix<f64>,
}

impl KernelSystem {
    pub fn new(ctrl: Vec<Point2>) -> Result<Self, TpsError> {
        let n = ctrl.len();
        if n < 3 {
            return Err(TpsError::InsufficientPoints(n));
        }
        if n > MAX_CONTROL_POINTS {
            return Err(TpsError::TooManyPoints(n));
        }
        if !ctrl.iter().all(Point2::is_finite) {
            return Err(TpsError::NonFinite);
        }
        let mut p = DMatrix::zeros(n, 3);
        for (i, c) in ctrl.iter().enumerate() {
            p[(i, 0)] = 1.0;
            p[(i, 1)] = c.x;
            p[(i, 2)] = c.y;
        }
        let sv = p.singular_values();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if !(hi > 0.0) || lo <= COLLINEAR_TOL * hi {
            return Err(TpsError::DegenerateControlPoints);
        }
        let k = kernel_matrix(&ctrl);
        Ok(Self { ctrl, k })
    }

    /// Solves `(K + lambda diag(1/c)) w + P a = y`, `P^T w = 0`. Row `i` is multiplied
    /// through by `c_i` so that vanishing weights stay well conditioned.
    pub fn solve(&self, y: &[Point2], lambda: f64, weights: Option<&[f64]>) -> Result<NormalizedTps, TpsError> {
        let n = self.ctrl.len();
        let mut a = DMatrix::zeros(n + 3, n + 3);
        let mut rhs = DMatrix::zeros(n + 3, 2);
        for (i, c) in self.ctrl.iter().enumerate() {
            let wi = weights.map_or(1.0, |w| w[i]);
            for j in 0..n {
                a[(i, j)] = wi * self.k[(i, j)];
            }
            a[(i, i)] += lambda;
            for (col, val) in [1.0, c.x, c.y].into_iter().enumerate() {
                a[(i, n + col)] = wi * val;
                a[(n + col, i)] = val;
            }
            rhs[(i, 0)] = wi * y[i].x;
            rhs[(i, 1)] = wi * y[i].y;
        }
        let sol = a.lu().solve(&rhs).ok_or(TpsError::SingularSystem)?;
        if !sol.iter().all(|x| x.is_finite()) {
            return Err(TpsError::SingularSystem);
        }
        let w = sol.rows(0, n).into_owned();
        let affine = nalgebra::Matrix3x2::from_fn(|r, c| sol[(n + r, c)]);
        Ok(NormalizedTps { affine, w })
    }

    /// `K^-1 P`, needed by [`KernelSystem::solve_affine_penalized`]. `None` when `K` is
    /// singular.
    pub fn kernel_inverse_p(&self) -> Option<DMatrix<f64>> {
        let n = self.ctrl.len();
        let p = DMatrix::from_fn(n, 3, |i, c| match c {
            0 => 1.0,
            1 => self.ctrl[i].x,
            _ => self.ctrl[i].y,
        });
        let g = self.k.clone().lu().solve(&p)?;
        g.iter().all(|x| x.is_finite()).then_some(g)
    }

    /// Weighted fit with the extra penalty `lambda_affine * |A - I|_F^2` on the linear part.
    ///
    /// Optimality gives `(K + lambda C^-1) w + P a + C^-1 G nu = y`, `P^T w = 0`,
    /// `P^T G nu - Lambda a = -Lambda a_I` with `G = K^-1 P`.
    pub fn solve_affine_penalized(
        &self,
        y: &[Point2],
        lambda: f64,
        weights: &[f64],
        lambda_affine: f64,
        g: &DMatrix<f64>,
    ) -> Result<NormalizedTps, TpsError> {
        let n = self.ctrl.len();
        let mut a = DMatrix::zeros(n + 6, n + 6);
        let mut rhs = DMatrix::zeros(n + 6, 2);
        for (i, c) in self.ctrl.iter().enumerate() {
            let wi = weights[i];
            for j in 0..n {
                a[(i, j)] = wi * self.k[(i, j)];
            }
            a[(i, i)] += lambda;
            for (col, val) in [1.0, c.x, c.y].into_iter().enumerate() {
                a[(i, n + col)] = wi * val;
                a[(n + col, i)] = val;
                a[(i, n + 3 + col)] = g[(i, col)];
            }
            rhs[(i, 0)] = wi * y[i].x;
            rhs[(i, 1)] = wi * y[i].y;
        }
        for r in 0..3 {
            for c in 0..3 {
                let ptg: f64 = self
                    .ctrl
                    .iter()
                    .enumerate()
                    .map(|(i, p)| [1.0, p.x, p.y][r] * g[(i, c)])
                    .sum();
                a[(n + 3 + r, n + 3 + c)] = ptg;
            }
        }
        a[(n + 4, n + 1)] = -lambda_affine;
        a[(n + 5, n + 2)] = -lambda_affine;
        rhs[(n + 4, 0)] = -lambda_affine;
        rhs[(n + 5, 1)] = -lambda_affine;
        let sol = a.lu().solve(&rhs).ok_or(TpsError::SingularSystem)?;
        if !sol.iter().all(|x| x.is_finite()) {
            return Err(TpsError::SingularSystem);
        }
        let w = sol.rows(0, n).into_owned();
        let affine = nalgebra::Matrix3x2::from_fn(|r, c| sol[(n + r, c)]);
        Ok(NormalizedTps { affine, w })
    }

    /// Spline values at the control points.
    pub fn eval_at_ctrl(&self, t: &NormalizedTps) -> Vec<Point2> {
        let kw = &self.k * &t.w;
        self.ctrl
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Point2::new(
                    t.affine[(0, 0)] + t.affine[(1, 0)] * c.x + t.affine[(2, 0)] * c.y + kw[(i, 0)],
                    t.affine[(0, 1)] + t.affine[(1, 1)] * c.x + t.affine[(2, 1)] * c.y + kw[(i, 1)],
                )
            })
            .collect()
    }

    /// `trace(w^T K w)` in normalized units.
    pub fn bending(&self, t: &NormalizedTps) -> f64 {
        let kw = &self.k * &t.w;
        t.w.component_mul(&kw).sum()
    }
}

/// Converts a normalized spline back to original coordinates. Exact because the side
/// conditions cancel the `log s^2` term of the rescaled kernel.
pub(crate) fn denormalize(
    t: &NormalizedTps,
    norm: &Normalizer,
    ctrl_original: Vec<Point2>,
    lambda: f64,
    prewarp: Option<Matrix3<f64>>,
) -> TpsMapping {
    let s = norm.scale;
    let c = norm.center;
    let a = &t.affine;
    let (a11, a12, a21, a22) = (a[(1, 0)], a[(2, 0)], a[(1, 1)], a[(2, 1)]);
    // the rescaled kernel leaves a constant log(s^2) sum_i w_i |v_i|^2 behind
    let log_s2 = (s * s).ln();
    let (mut kx, mut ky) = (0.0, 0.0);
    for (i, p) in ctrl_original.iter().enumerate() {
        let r2 = norm.forward(*p).norm_squared();
        kx += t.w[(i, 0)] * r2;
        ky += t.w[(i, 1)] * r2;
    }
    let tx = c.x + a[(0, 0)] / s - (a11 * c.x + a12 * c.y) + log_s2 * kx / s;
    let ty = c.y + a[(0, 1)] / s - (a21 * c.x + a22 * c.y) + log_s2 * ky / s;
    TpsMapping {
        control_points: ctrl_original,
        affine: Matrix3::new(a11, a12, tx, a21, a22, ty, 0.0, 0.0, 1.0),
        warp_coeffs: &t.w * s,
        lambda_used: lambda,
        prewarp,
    }
}

fn check_pairs(u: &[Point2], v: &[Point2], weights: Option<&[f64]>) -> Result<(), TpsError> {
    if u.len() != v.len() {
        return Err(TpsError::LengthMismatch(u.len(), v.len()));
    }
    if let Some(w) = weights {
        if w.len() != v.len() {
            return Err(TpsError::LengthMismatch(w.len(), v.len()));
        }
        if !w.iter().all(|&x| x > 0.0 && x.is_finite()) {
            return Err(TpsError::InvalidWeight);
        }
    }
    if !u.iter().chain(v).all(Point2::is_finite) {
        return Err(TpsError::NonFinite);
    }
    Ok(())
}

/// Regularized (optionally weighted) TPS taking `v` to `u`.
///
/// Both sets are normalized by the similarity that gives `v` zero mean and unit RMS
/// radius, so `lambda` is expressed in those units; `lambda / s^2` is the equivalent
/// weight for the original coordinates.
pub fn fit_tps(
    u: &[Point2],
    v: &[Point2],
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<TpsMapping, TpsError> {
    if v.len() < 3 {
        return Err(TpsError::InsufficientPoints(v.len()));
    }
    check_pairs(u, v, weights)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(TpsError::InvalidParams(format!("lambda = {lambda}")));
    }
    let norm = Normalizer::fit(v.iter()).ok_or(TpsError::DegenerateControlPoints)?;
    let sys = KernelSystem::new(v.iter().map(|&p| norm.forward(p)).collect())?;
    let y: Vec<Point2> = u.iter().map(|&p| norm.forward(p)).collect();
    let t = sys.solve(&y, lambda, weights)?;
    Ok(denormalize(&t, &norm, v.to_vec(), lambda, None))
}

/// [`fit_tps`] on pre-warped sources; the returned mapping applies `h` first.
pub fn fit_tps_prewarped(
    u: &[Point2],
    v: &[Point2],
    h: &Matrix3<f64>,
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<TpsMapping, TpsError> {
    let warped: Vec<Point2> = v.iter().map(|&p| apply_matrix(h, p)).collect();
    Ok(fit_tps(u, &warped, lambda, weights)?.with_prewarp(*h))
}

#[cfg(test)]
mod tests;

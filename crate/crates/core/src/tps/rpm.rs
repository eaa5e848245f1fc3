use nalgebra::{DMatrix, Matrix3, Matrix3x2};
use serde::{Deserialize, Serialize};

use super::{bending_energy, denormalize, KernelSystem, NormalizedTps, Normalizer, TpsError, TpsMapping, MAX_CONTROL_POINTS};
use crate::homography::apply_matrix;
use crate::model::Point2;

/// Column sums below this are treated as this value when forming weighted targets.
const MIN_COLUMN_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpsRpmParams {
    /// Initial temperature as a multiple of the largest squared cross distance.
    pub t_init_factor: f64,
    pub anneal_rate: f64,
    /// Final temperature as a multiple of the mean squared nearest-neighbour distance.
    pub t_final_factor: f64,
    /// Regularization at temperature `T` is `lambda_init * T`.
    pub lambda_init: f64,
    /// Penalty on the deviation of the linear part from identity, per source point and
    /// scaled by `T`. Keeps the high-temperature solution from collapsing onto the centroid.
    pub lambda_affine_init: f64,
    /// Minimum number of Sinkhorn rounds per correspondence update.
    pub sinkhorn_iters: usize,
    /// Outlier-bin temperature; `None` uses the initial temperature.
    pub outlier_temperature: Option<f64>,
    /// Alternating (M, f) updates performed at each temperature.
    pub iterations_per_temperature: usize,
    /// Sinkhorn stops once every inner column sum is within this of one.
    pub sinkhorn_tolerance: f64,
    pub max_sinkhorn_iters: usize,
}

impl Default for TpsRpmParams {
    fn default() -> Self {
        Self {
            t_init_factor: 1.0,
            anneal_rate: 0.93,
            t_final_factor: 1e-4,
            lambda_init: 100.0,
            lambda_affine_init: 0.1,
            sinkhorn_iters: 20,
            outlier_temperature: None,
            iterations_per_temperature: 1,
            sinkhorn_tolerance: 1e-10,
            max_sinkhorn_iters: 1000,
        }
    }
}

impl TpsRpmParams {
    pub fn validate(&self) -> Result<(), TpsError> {
        let bad = |m: &str| Err(TpsError::InvalidParams(m.to_string()));
        if !(self.anneal_rate > 0.0 && self.anneal_rate < 1.0) {
            return bad("anneal_rate must lie in (0, 1)");
        }
        if !(self.t_init_factor > 0.0 && self.t_final_factor > 0.0) {
            return bad("temperature factors must be positive");
        }
        if !(self.lambda_init >= 0.0 && self.lambda_affine_init >= 0.0) {
            return bad("regularization weights must be nonnegative");
        }
        if self.iterations_per_temperature == 0 {
            return bad("iterations_per_temperature must be at least 1");
        }
        if let Some(t) = self.outlier_temperature {
            if !(t > 0.0) {
                return bad("outlier_temperature must be positive");
            }
        }
        Ok(())
    }
}

/// Soft-assign matrix with an outlier row (index `n_u`) and outlier column (index `n_v`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceMatrix {
    pub m: DMatrix<f64>,
    pub temperature: f64,
}

impl CorrespondenceMatrix {
    pub fn n_u(&self) -> usize {
        self.m.nrows() - 1
    }

    pub fn n_v(&self) -> usize {
        self.m.ncols() - 1
    }

    /// Mass of target point `i` assigned to the outlier column.
    pub fn outlier_mass_u(&self, i: usize) -> f64 {
        self.m[(i, self.n_v())]
    }

    /// Mass of source point `j` assigned to the outlier row.
    pub fn outlier_mass_v(&self, j: usize) -> f64 {
        self.m[(self.n_u(), j)]
    }

    /// Largest deviation from one among inner row and column sums.
    pub fn normalization_error(&self) -> f64 {
        let (nu, nv) = (self.n_u(), self.n_v());
        let rows = (0..nu).map(|i| (self.m.row(i).sum() - 1.0).abs());
        let cols = (0..nv).map(|j| (self.m.column(j).sum() - 1.0).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// Costs of the outlier bins: squared distance of each point to its own cloud's centroid.
fn centroid_costs(pts: &[Point2]) -> Vec<f64> {
    let c = pts.iter().fold(Point2::default(), |a, &p| a + p) * (1.0 / pts.len().max(1) as f64);
    pts.iter().map(|p| p.distance_squared(c)).collect()
}

struct SinkhornControl {
    min_iters: usize,
    tolerance: f64,
    max_iters: usize,
}

/// Gibbs kernel followed by alternating column/row normalization of the inner block.
///
/// Inner entries are `exp(-d^2 / 2T) / T`; outlier entries `exp(-e^2 / 2T_out) / T_out`.
fn soft_assign(
    u: &[Point2],
    f_of_v: &[Point2],
    e_u: &[f64],
    e_v: &[f64],
    temperature: f64,
    outlier_temperature: f64,
    ctl: &SinkhornControl,
) -> DMatrix<f64> {
    let (nu, nv) = (u.len(), f_of_v.len());
    let mut m = DMatrix::zeros(nu + 1, nv + 1);
    for (j, fv) in f_of_v.iter().enumerate() {
        for (i, ui) in u.iter().enumerate() {
            m[(i, j)] = (-ui.distance_squared(*fv) / (2.0 * temperature)).exp() / temperature;
        }
        m[(nu, j)] = (-e_v[j] / (2.0 * outlier_temperature)).exp() / outlier_temperature;
    }
    for i in 0..nu {
        m[(i, nv)] = (-e_u[i] / (2.0 * outlier_temperature)).exp() / outlier_temperature;
    }
    let col_dev = |m: &DMatrix<f64>| {
        (0..nv)
            .map(|j| (m.column(j).sum() - 1.0).abs())
            .fold(0.0, f64::max)
    };
    let mut done = 0;
    while done < ctl.min_iters.max(1) {
        sinkhorn_round(&mut m, nu, nv);
        done += 1;
    }
    if col_dev(&m) > ctl.tolerance && !newton_polish(&mut m, nu, nv, ctl.tolerance) {
        while done < ctl.max_iters && col_dev(&m) > ctl.tolerance {
            sinkhorn_round(&mut m, nu, nv);
            done += 1;
        }
    }
    m
}

fn sinkhorn_round(m: &mut DMatrix<f64>, nu: usize, nv: usize) {
    for j in 0..nv {
        let mut col = m.column_mut(j);
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        }
    }
    for i in 0..nu {
        let mut row = m.row_mut(i);
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
}

/// Residuals of the inner row and column constraints.
fn residuals(m: &DMatrix<f64>, nu: usize, nv: usize) -> (Vec<f64>, Vec<f64>) {
    let r = (0..nu).map(|i| m.row(i).sum() - 1.0).collect();
    let c = (0..nv).map(|j| m.column(j).sum() - 1.0).collect();
    (r, c)
}

fn max_abs(r: &[f64], c: &[f64]) -> f64 {
    r.iter().chain(c).fold(0.0, |a, x| a.max(x.abs()))
}

/// Newton iterations on the log-scalings of rows and columns. Sinkhorn stalls when the
/// outlier bins carry little mass because the scalings are then nearly gauge-free; the
/// Schur complement on the column side stays positive definite thanks to those bins.
/// Returns whether the tolerance was reached.
fn newton_polish(m: &mut DMatrix<f64>, nu: usize, nv: usize, tol: f64) -> bool {
    let (mut r, mut c) = residuals(m, nu, nv);
    let mut err = max_abs(&r, &c);
    for _ in 0..30 {
        if err <= tol {
            return true;
        }
        let row_tot: Vec<f64> = r.iter().map(|x| x + 1.0).collect();
        let col_tot: Vec<f64> = c.iter().map(|x| x + 1.0).collect();
        if row_tot.iter().chain(&col_tot).any(|&x| !(x > 0.0)) {
            return false;
        }
        let inner = m.view((0, 0), (nu, nv));
        let mut scaled = inner.clone_owned();
        for i in 0..nu {
            scaled.row_mut(i).scale_mut(1.0 / row_tot[i]);
        }
        let mut schur = -(inner.transpose() * &scaled);
        let mut rhs = nalgebra::DVector::zeros(nv);
        for j in 0..nv {
            schur[(j, j)] += col_tot[j];
            let coupling: f64 = (0..nu).map(|i| scaled[(i, j)] * r[i]).sum();
            rhs[j] = -c[j] + coupling;
        }
        let Some(chol) = schur.cholesky() else {
            return false;
        };
        let d_beta = chol.solve(&rhs);
        let d_alpha: Vec<f64> = (0..nu)
            .map(|i| (-r[i] - (0..nv).map(|j| inner[(i, j)] * d_beta[j]).sum::<f64>()) / row_tot[i])
            .collect();
        let base = m.clone();
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            for j in 0..=nv {
                let db = if j < nv { step * d_beta[j] } else { 0.0 };
                for i in 0..=nu {
                    let da = if i < nu { step * d_alpha[i] } else { 0.0 };
                    m[(i, j)] = base[(i, j)] * (da + db).exp();
                }
            }
            let (r2, c2) = residuals(m, nu, nv);
            let e2 = max_abs(&r2, &c2);
            if e2.is_finite() && e2 < err {
                (r, c, err) = (r2, c2, e2);
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            m.copy_from(&base);
            return false;
        }
    }
    err <= tol
}

/// Soft-assign update of the correspondence matrix.
///
/// `v` are the untransformed source points; the outlier row scores them against their own
/// centroid so that the bins do not depend on the current mapping. Sinkhorn runs at least
/// `sinkhorn_iters` rounds and continues until the inner block is doubly stochastic to
/// 1e-10 (at most 1000 rounds).
pub fn update_correspondences(
    u: &[Point2],
    f_of_v: &[Point2],
    v: &[Point2],
    temperature: f64,
    outlier_temperature: f64,
    sinkhorn_iters: usize,
) -> CorrespondenceMatrix {
    let defaults = TpsRpmParams::default();
    let m = soft_assign(
        u,
        f_of_v,
        &centroid_costs(u),
        &centroid_costs(v),
        temperature,
        outlier_temperature,
        &SinkhornControl {
            min_iters: sinkhorn_iters,
            tolerance: defaults.sinkhorn_tolerance,
            max_iters: defaults.max_sinkhorn_iters,
        },
    );
    CorrespondenceMatrix { m, temperature }
}

/// `sum_ij m_ij |u_i - f(v_j)|^2 + lambda * bending_energy(f)` over the inner block.
pub fn matching_energy(
    u: &[Point2],
    v: &[Point2],
    m: &CorrespondenceMatrix,
    f: &TpsMapping,
    lambda: f64,
) -> f64 {
    let fv: Vec<Point2> = v.iter().map(|&p| f.apply(p)).collect();
    let mut e = 0.0;
    for (j, fvj) in fv.iter().enumerate() {
        for (i, ui) in u.iter().enumerate() {
            e += m.m[(i, j)] * ui.distance_squared(*fvj);
        }
    }
    e + lambda * bending_energy(f)
}

/// Free energies recorded at one temperature: one value after every correspondence update
/// and one after every spline update, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealStep {
    pub temperature: f64,
    pub lambda: f64,
    pub free_energy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsRpmResult {
    pub correspondence: CorrespondenceMatrix,
    pub mapping: TpsMapping,
    /// Matching energy of the final solution in original coordinates.
    pub energy: f64,
    /// Regularization weight of `energy`, in original units.
    pub lambda: f64,
    pub schedule: Vec<AnnealStep>,
}

/// Deterministic-annealing objective in normalized coordinates. Both alternating updates
/// minimize it exactly at fixed temperature.
#[allow(clippy::too_many_arguments)]
fn free_energy(
    m: &DMatrix<f64>,
    u: &[Point2],
    fv: &[Point2],
    e_u: &[f64],
    e_v: &[f64],
    t: f64,
    t_out: f64,
    bending: f64,
    lambda: f64,
) -> f64 {
    let (nu, nv) = (u.len(), fv.len());
    let ent = |x: f64| if x > 0.0 { x * (x.ln() - 1.0) } else { 0.0 };
    let inner_bias = 2.0 * t * t.ln();
    let out_bias = 2.0 * t * t_out.ln();
    let mut f = 0.0;
    for j in 0..nv {
        for i in 0..nu {
            let x = m[(i, j)];
            if x > 0.0 {
                f += x * (u[i].distance_squared(fv[j]) + inner_bias) + 2.0 * t * ent(x);
            }
        }
        let x = m[(nu, j)];
        f += x * (t / t_out * e_v[j] + out_bias) + 2.0 * t * ent(x);
    }
    for i in 0..nu {
        let x = m[(i, nv)];
        f += x * (t / t_out * e_u[i] + out_bias) + 2.0 * t * ent(x);
    }
    f + lambda * bending
}

fn mean_nn_sq(pts: &[Point2]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let total: f64 = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| p.distance_squared(*q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / pts.len() as f64)
}

/// Joint soft correspondence and TPS estimation by deterministic annealing.
///
/// With `init`, `v` is pre-warped by it and the returned mapping includes it. Both clouds
/// share one normalization (zero mean, unit RMS radius of their union).
pub fn tps_rpm(
    u: &[Point2],
    v: &[Point2],
    params: &TpsRpmParams,
    init: Option<&Matrix3<f64>>,
) -> Result<TpsRpmResult, TpsError> {
    params.validate()?;
    if u.is_empty() {
        return Err(TpsError::InsufficientPoints(0));
    }
    if v.len() < 3 {
        return Err(TpsError::InsufficientPoints(v.len()));
    }
    if u.len() > MAX_CONTROL_POINTS || v.len() > MAX_CONTROL_POINTS {
        return Err(TpsError::TooManyPoints(u.len().max(v.len())));
    }
    let vw: Vec<Point2> = match init {
        Some(h) => v.iter().map(|&p| apply_matrix(h, p)).collect(),
        None => v.to_vec(),
    };
    if !u.iter().chain(&vw).all(Point2::is_finite) {
        return Err(TpsError::NonFinite);
    }
    let norm = Normalizer::fit(u.iter().chain(&vw)).ok_or(TpsError::DegenerateControlPoints)?;
    let un: Vec<Point2> = u.iter().map(|&p| norm.forward(p)).collect();
    let vn: Vec<Point2> = vw.iter().map(|&p| norm.forward(p)).collect();
    let sys = KernelSystem::new(vn.clone())?;

    let max_cross = un
        .iter()
        .flat_map(|a| vn.iter().map(move |b| a.distance_squared(*b)))
        .fold(0.0, f64::max);
    let t_init = params.t_init_factor * max_cross.max(f64::MIN_POSITIVE);
    let nn = match (mean_nn_sq(&un), mean_nn_sq(&vn)) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (None, Some(b)) => b,
        (Some(a), None) => a,
        (None, None) => max_cross,
    };
    let t_final = (params.t_final_factor * nn).min(t_init);
    let t_out = params.outlier_temperature.unwrap_or(t_init);
    let e_u = centroid_costs(&un);
    let e_v = centroid_costs(&vn);
    let ctl = SinkhornControl {
        min_iters: params.sinkhorn_iters,
        tolerance: params.sinkhorn_tolerance,
        max_iters: params.max_sinkhorn_iters,
    };

    let mut cur = NormalizedTps {
        affine: Matrix3x2::new(0.0, 0.0, 1.0, 0.0, 0.0, 1.0),
        w: DMatrix::zeros(vn.len(), 2),
    };
    let g = (params.lambda_affine_init > 0.0)
        .then(|| sys.kernel_inverse_p())
        .flatten();
    let mut fv = vn.clone();
    let mut bend = 0.0;
    let mut schedule = Vec::new();
    let mut m = DMatrix::zeros(0, 0);
    let mut t = t_init;
    let mut lambda;
    loop {
        lambda = params.lambda_init * t;
        let lambda_affine = params.lambda_affine_init * t * vn.len() as f64;
        let penalty = |a: &Matrix3x2<f64>| match g {
            Some(_) => {
                lambda_affine
                    * ((a[(1, 0)] - 1.0).powi(2) + a[(2, 0)].powi(2) + a[(1, 1)].powi(2) + (a[(2, 1)] - 1.0).powi(2))
            }
            None => 0.0,
        };
        let mut energies = Vec::with_capacity(2 * params.iterations_per_temperature);
        for _ in 0..params.iterations_per_temperature {
            m = soft_assign(&un, &fv, &e_u, &e_v, t, t_out, &ctl);
            energies.push(free_energy(&m, &un, &fv, &e_u, &e_v, t, t_out, bend, lambda) + penalty(&cur.affine));

            let mut y = Vec::with_capacity(vn.len());
            let mut c = Vec::with_capacity(vn.len());
            for j in 0..vn.len() {
                let col = m.column(j);
                let mass: f64 = col.rows(0, un.len()).sum();
                // normalize before summing: a subnormal mass would overflow 1 / mass
                let target = if mass > 0.0 {
                    un.iter()
                        .enumerate()
                        .fold(Point2::default(), |a, (i, &p)| a + p * (col[i] / mass))
                } else {
                    fv[j]
                };
                y.push(target);
                c.push(mass.max(MIN_COLUMN_MASS));
            }
            cur = match &g {
                Some(g) => sys.solve_affine_penalized(&y, lambda, &c, lambda_affine, g)?,
                None => sys.solve(&y, lambda, Some(&c))?,
            };
            fv = sys.eval_at_ctrl(&cur);
            bend = sys.bending(&cur);
            energies.push(free_energy(&m, &un, &fv, &e_u, &e_v, t, t_out, bend, lambda) + penalty(&cur.affine));
        }
        schedule.push(AnnealStep {
            temperature: t,
            lambda,
            free_energy: energies,
        });
        let next = t * params.anneal_rate;
        if next < t_final {
            break;
        }
        t = next;
    }

    let mapping = denormalize(&cur, &norm, vw, lambda, init.copied());
    let correspondence = CorrespondenceMatrix { m, temperature: t };
    let lambda_orig = lambda / (norm.scale * norm.scale);
    let energy = matching_energy(u, v, &correspondence, &mapping, lambda_orig);
    Ok(TpsRpmResult {
        correspondence,
        mapping,
        energy,
        lambda: lambda_orig,
        schedule,
    })
}

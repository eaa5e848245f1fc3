//! Time-varying thin plate splines: foreground edge points, flow propagation, and the
//! anchor-candidate solver.
//!
//! A [`TtpsMapping`] holds one spline per frame, all sharing a single fixed pairing of
//! flow-propagated edge points. Mappings take the first sequence onto the second.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homography::Homography;
use crate::model::{cell_center, EdgeMap, FlowField, ForegroundMask, FrameSequence, Grid, Point2};
use crate::tps::{
    bending_energy, fit_tps_prewarped, normalizing_scale, tps_rpm, CorrespondenceMatrix, TpsError,
    TpsMapping, TpsRpmParams, MAX_CONTROL_POINTS,
};

/// Fixed-point steps used to invert a forward flow when no backward flow is available.
const FLOW_INVERSION_STEPS: usize = 8;

/// Stand-in for infinity in the distance transform; exceeds any squared raster distance.
const FAR: f64 = 1e18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TtpsError {
    #[error("foreground mask has no set cells")]
    EmptyMask,
    #[error("raster size mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("no edge point survived pruning")]
    EmptyEdgeSet,
    #[error("correspondence index out of range: {0}")]
    IndexMismatch(String),
    #[error("sequence data missing: {0}")]
    MissingData(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no TTPS candidate could be fitted: {0}")]
    AlignmentFailed(String),
    #[error(transparent)]
    Tps(#[from] TpsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeParams {
    /// Decay length of the mask-distance weighting, as a fraction of the box diagonal.
    pub sigma_factor: f64,
    pub prune_threshold: f64,
    pub max_points: usize,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            sigma_factor: 0.05,
            prune_threshold: 0.2,
            max_points: MAX_CONTROL_POINTS,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<(), TtpsError> {
        if !(self.sigma_factor > 0.0) || !self.sigma_factor.is_finite() {
            return Err(TtpsError::InvalidParams("sigma_factor must be positive".into()));
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(TtpsError::InvalidParams("prune_threshold must be nonnegative".into()));
        }
        if self.max_points == 0 || self.max_points > MAX_CONTROL_POINTS {
            return Err(TtpsError::InvalidParams(format!(
                "max_points must lie in 1..={MAX_CONTROL_POINTS}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TtpsParams {
    pub rpm: TpsRpmParams,
    pub edges: EdgeParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePointSet {
    pub frame_index: usize,
    pub points: Vec<Point2>,
    /// Pruning score of each point, in `[0, 1]`.
    pub strengths: Vec<f64>,
    /// Frame each point was detected in.
    pub origin_frame: Vec<usize>,
    /// Set once a point has been propagated outside the raster (it is then clamped).
    pub out_of_bounds: Vec<bool>,
}

impl EdgePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One entry of the fixed pairing: `u` indexes the target set, `v` the source set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtpsMapping {
    pub per_frame: Vec<TpsMapping>,
    pub correspondence: Vec<Correspondence>,
    pub anchor_frame: usize,
    pub energy: f64,
    /// Regularization weight of `energy`, in pixel units.
    pub lambda: f64,
}

/// Exact Euclidean distance (in cells) from every cell to the nearest set cell.
pub fn distance_transform(mask: &ForegroundMask) -> Grid<f64> {
    distance_transform_grid(mask.grid()).expect("foreground masks are nonempty")
}

pub fn distance_transform_grid(mask: &Grid<bool>) -> Result<Grid<f64>, TtpsError> {
    if !mask.as_slice().iter().any(|&b| b) {
        return Err(TtpsError::EmptyMask);
    }
    let (w, h) = mask.dims();
    let mut d: Vec<f64> = mask.as_slice().iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut ws = Workspace::new(n);
    for c in 0..w {
        for r in 0..h {
            f[r] = d[r * w + c];
        }
        ws.transform(&f[..h], &mut out[..h]);
        for r in 0..h {
            d[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        let row = &mut d[r * w..(r + 1) * w];
        f[..w].copy_from_slice(row);
        ws.transform(&f[..w], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    Grid::from_vec(w, h, d.into_iter().map(f64::sqrt).collect())
        .map_err(|_| TtpsError::DimensionMismatch((w, h), (w, h)))
}

/// Lower envelope of parabolas for the 1-D squared distance transform.
struct Workspace {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// Abscissa where the parabola rooted at `q` overtakes the one at `v[k]`.
    fn intersect(&self, f: &[f64], q: usize, k: usize) -> f64 {
        let p = self.v[k];
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    }

    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        if n == 0 {
            return;
        }
        let mut k = 0usize;
        self.v[0] = 0;
        self.z[0] = f64::NEG_INFINITY;
        self.z[1] = f64::INFINITY;
        for q in 1..n {
            let mut s = self.intersect(f, q, k);
            while s <= self.z[k] {
                k -= 1;
                s = self.intersect(f, q, k);
            }
            k += 1;
            self.v[k] = q;
            self.z[k] = s;
            self.z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let dq = q as f64 - p as f64;
            *o = dq * dq + f[p];
        }
    }
}

/// Edge pixels near the foreground, scored `strength * exp(-dt / sigma)`.
///
/// Pixels scoring above the threshold are kept in raster order; above `max_points`, a
/// seeded uniform subsample (still in raster order) is returned.
pub fn extract_fg_edges(
    edges: &EdgeMap,
    mask: &ForegroundMask,
    params: &EdgeParams,
    seed: u64,
) -> Result<EdgePointSet, TtpsError> {
    params.validate()?;
    if edges.dims() != mask.dims() {
        return Err(TtpsError::DimensionMismatch(edges.dims(), mask.dims()));
    }
    let dt = distance_transform(mask);
    let sigma = params.sigma_factor * mask.bbox().diagonal();
    let mut points = Vec::new();
    let mut strengths = Vec::new();
    for ((r, c, &s), &d) in edges.grid().iter_cells().zip(dt.as_slice()) {
        if s <= 0.0 {
            continue;
        }
        let score = s as f64 * (-d / sigma).exp();
        if score > params.prune_threshold {
            points.push(cell_center(r, c));
            strengths.push(score);
        }
    }
    if points.is_empty() {
        return Err(TtpsError::EmptyEdgeSet);
    }
    if points.len() > params.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, points.len(), params.max_points).into_vec();
        keep.sort_unstable();
        points = keep.iter().map(|&k| points[k]).collect();
        strengths = keep.iter().map(|&k| strengths[k]).collect();
    }
    let n = points.len();
    let frame = mask.frame_index();
    Ok(EdgePointSet {
        frame_index: frame,
        points,
        strengths,
        origin_frame: vec![frame; n],
        out_of_bounds: vec![false; n],
    })
}

/// Inverse of one forward flow step at `p`: solves `q + F(q) = p` by fixed-point iteration.
fn invert_step(flow: &FlowField, p: Point2) -> Point2 {
    let mut q = p - flow.sample(p);
    for _ in 1..FLOW_INVERSION_STEPS {
        q = p - flow.sample(q);
    }
    q
}

/// Carries points from sequence frame `from_t` to `to_t`, one flow step at a time.
///
/// `flows[t]` maps frame `t` to `t + 1`; backward steps use `backward[t]` (frame `t + 1`
/// to `t`) when given and otherwise invert the forward step. Points leaving the raster
/// are clamped to it and flagged; order is preserved.
pub fn propagate_points(
    pts: &EdgePointSet,
    flows: &[FlowField],
    backward: Option<&[FlowField]>,
    from_t: usize,
    to_t: usize,
) -> Result<EdgePointSet, TtpsError> {
    let needed = from_t.max(to_t);
    if needed > flows.len() {
        return Err(TtpsError::MissingData(format!(
            "{} flows available, frame {needed} requested",
            flows.len()
        )));
    }
    if let Some(b) = backward {
        if b.len() < needed {
            return Err(TtpsError::MissingData("backward flows".into()));
        }
    }
    let mut out = pts.clone();
    out.frame_index = (pts.frame_index + to_t).checked_sub(from_t).ok_or_else(|| {
        TtpsError::MissingData("propagation before frame 0".into())
    })?;
    let Some(first) = flows.first() else {
        return Ok(out);
    };
    let (w, h) = first.dims();
    let (wf, hf) = (w as f64, h as f64);
    for (p, flag) in out.points.iter_mut().zip(out.out_of_bounds.iter_mut()) {
        let mut q = *p;
        let mut t = from_t;
        while t != to_t {
            if to_t > t {
                q = q + flows[t].sample(q);
                t += 1;
            } else {
                q = match backward {
                    Some(b) => q + b[t - 1].sample(q),
                    None => invert_step(&flows[t - 1], q),
                };
                t -= 1;
            }
            if !(q.x >= 0.0 && q.y >= 0.0 && q.x <= wf && q.y <= hf) {
                *flag = true;
                q = Point2::new(q.x.clamp(0.0, wf), q.y.clamp(0.0, hf));
            }
        }
        *p = q;
    }
    Ok(out)
}

/// Per-frame terms of the TTPS energy.
pub fn ttps_frame_energies(
    per_frame: &[TpsMapping],
    correspondence: &[Correspondence],
    u_sets: &[EdgePointSet],
    v_sets: &[EdgePointSet],
    lambda: f64,
) -> Result<Vec<f64>, TtpsError> {
    if per_frame.len() != u_sets.len() || per_frame.len() != v_sets.len() {
        return Err(TtpsError::IndexMismatch(format!(
            "{} mappings, {} target sets, {} source sets",
            per_frame.len(),
            u_sets.len(),
            v_sets.len()
        )));
    }
    per_frame
        .iter()
        .zip(u_sets.iter().zip(v_sets))
        .map(|(f, (us, vs))| {
            let mut e = 0.0;
            for c in correspondence {
                let (Some(u), Some(v)) = (us.points.get(c.u), vs.points.get(c.v)) else {
                    return Err(TtpsError::IndexMismatch(format!("pair ({}, {})", c.u, c.v)));
                };
                e += c.weight * u.distance_squared(f.apply(*v));
            }
            Ok(e + lambda * bending_energy(f))
        })
        .collect()
}

/// `sum_t (sum_pairs m_ij |u_i^t - f^t(v_j^t)|^2 + lambda * bending(f^t))`.
pub fn ttps_energy(
    mapping: &TtpsMapping,
    u_sets: &[EdgePointSet],
    v_sets: &[EdgePointSet],
    lambda: f64,
) -> Result<f64, TtpsError> {
    Ok(ttps_frame_energies(&mapping.per_frame, &mapping.correspondence, u_sets, v_sets, lambda)?
        .iter()
        .sum())
}

/// Hard one-to-one pairing from a soft-assign matrix: each target's row maximum, kept
/// when it exceeds twice the target's outlier mass, greedily by descending weight.
pub fn harden_correspondences(m: &CorrespondenceMatrix) -> Vec<Correspondence> {
    let (nu, nv) = (m.n_u(), m.n_v());
    let mut cand: Vec<Correspondence> = (0..nu)
        .filter_map(|i| {
            let (j, w) = (0..nv)
                .map(|j| (j, m.m[(i, j)]))
                .fold((usize::MAX, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
            (j < nv && w > 0.0 && w > 2.0 * m.outlier_mass_u(i)).then_some(Correspondence { u: i, v: j, weight: w })
        })
        .collect();
    cand.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.u.cmp(&b.u)));
    let mut used = vec![false; nv];
    let mut out: Vec<Correspondence> = cand
        .into_iter()
        .filter(|c| !std::mem::replace(&mut used[c.v], true))
        .collect();
    out.sort_by_key(|c| c.u);
    out
}

/// Edge sets of both sequences detected at `anchor` and propagated to every frame.
pub struct AnchorSets {
    pub u_sets: Vec<EdgePointSet>,
    pub v_sets: Vec<EdgePointSet>,
}

fn check_sequence(seq: &FrameSequence, t: usize) -> Result<(), TtpsError> {
    if seq.length != t || seq.masks.len() != t || seq.edge_maps.len() != t || seq.flows.len() + 1 < t {
        return Err(TtpsError::MissingData(format!("sequence {} is incomplete", seq.shot_id)));
    }
    Ok(())
}

fn propagate_all(seq: &FrameSequence, set: &EdgePointSet, anchor: usize) -> Result<Vec<EdgePointSet>, TtpsError> {
    let back = seq.backward_flows.as_deref();
    (0..seq.length)
        .map(|t| propagate_points(set, &seq.flows, back, anchor, t))
        .collect()
}

/// Candidate built around one anchor frame, together with the point sets it was scored on.
pub fn ttps_candidate(
    seq_a: &FrameSequence,
    seq_b: &FrameSequence,
    init: &Homography,
    params: &TtpsParams,
    anchor: usize,
) -> Result<(TtpsMapping, AnchorSets), TtpsError> {
    let t_len = seq_a.length;
    let seed = params.seed.wrapping_add(anchor as u64);
    let v0 = extract_fg_edges(&seq_a.edge_maps[anchor], &seq_a.masks[anchor], &params.edges, seed)?;
    let u0 = extract_fg_edges(&seq_b.edge_maps[anchor], &seq_b.masks[anchor], &params.edges, seed)?;
    let h: Matrix3<f64> = init.h;
    let rpm = tps_rpm(&u0.points, &v0.points, &params.rpm, Some(&h))?;
    let hard = harden_correspondences(&rpm.correspondence);

    let u_sets = propagate_all(seq_b, &u0, anchor)?;
    let v_sets = propagate_all(seq_a, &v0, anchor)?;
    let pairs: Vec<Correspondence> = hard
        .into_iter()
        .filter(|c| {
            !u_sets.iter().any(|s| s.out_of_bounds[c.u]) && !v_sets.iter().any(|s| s.out_of_bounds[c.v])
        })
        .collect();
    if pairs.len() < 3 {
        return Err(TtpsError::Tps(TpsError::InsufficientPoints(pairs.len())));
    }
    let weights: Vec<f64> = pairs.iter().map(|c| c.weight).collect();
    let lambda = rpm.lambda;
    let per_frame = (0..t_len)
        .map(|t| {
            if t == anchor {
                return Ok(rpm.mapping.clone());
            }
            let u: Vec<Point2> = pairs.iter().map(|c| u_sets[t].points[c.u]).collect();
            let v: Vec<Point2> = pairs.iter().map(|c| v_sets[t].points[c.v]).collect();
            let warped: Vec<Point2> = v.iter().map(|&p| init.apply(p)).collect();
            let s = normalizing_scale(&warped).ok_or(TpsError::DegenerateControlPoints)?;
            Ok(fit_tps_prewarped(&u, &v, &h, lambda * s * s, Some(&weights))?)
        })
        .collect::<Result<Vec<_>, TtpsError>>()?;
    let mut mapping = TtpsMapping {
        per_frame,
        correspondence: pairs,
        anchor_frame: anchor,
        energy: 0.0,
        lambda,
    };
    let sets = AnchorSets { u_sets, v_sets };
    mapping.energy = ttps_energy(&mapping, &sets.u_sets, &sets.v_sets, lambda)?;
    Ok((mapping, sets))
}

/// All `T` anchor candidates, indexed by anchor frame.
pub fn ttps_candidates(
    seq_a: &FrameSequence,
    seq_b: &FrameSequence,
    init: &Homography,
    params: &TtpsParams,
) -> Result<Vec<Result<TtpsMapping, TtpsError>>, TtpsError> {
    params.rpm.validate()?;
    params.edges.validate()?;
    let t_len = seq_a.length;
    if t_len == 0 || seq_b.length != t_len {
        return Err(TtpsError::MissingData(format!(
            "sequence lengths {} and {}",
            seq_a.length, seq_b.length
        )));
    }
    check_sequence(seq_a, t_len)?;
    check_sequence(seq_b, t_len)?;
    Ok((0..t_len)
        .into_par_iter()
        .map(|t| ttps_candidate(seq_a, seq_b, init, params, t).map(|(m, _)| m))
        .collect())
}

/// Fits every anchor candidate and keeps the one of lowest energy (ties: lower anchor).
pub fn fit_ttps(
    seq_a: &FrameSequence,
    seq_b: &FrameSequence,
    init: &Homography,
    params: &TtpsParams,
) -> Result<TtpsMapping, TtpsError> {
    let mut last_err = None;
    let mut best: Option<TtpsMapping> = None;
    for cand in ttps_candidates(seq_a, seq_b, init, params)? {
        match cand {
            Ok(m) => {
                if best.as_ref().map_or(true, |b| m.energy < b.energy) {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        TtpsError::AlignmentFailed(last_err.map_or_else(|| "no frames".into(), |e| e.to_string()))
    })
}

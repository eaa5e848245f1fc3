//! Public-API path from raw sequences to scored alignments on a spinning disc and its
//! affine image.

use std::collections::{BTreeMap, BTreeSet};

use cmpalign_core::evaluation::{alignment_error, is_correct, EvalConfig};
use cmpalign_core::homography::{match_trajectories, ransac_tm, Homography, InlierThreshold, RansacParams};
use cmpalign_core::model::cell_center;
use cmpalign_core::tps::TpsRpmParams;
use cmpalign_core::ttps::{fit_ttps, EdgeParams, TtpsParams};
use cmpalign_core::{EdgeMap, FlowField, ForegroundMask, FrameSequence, Grid, LandmarkSet, Point2, Trajectory, TRAJ_LEN};
use nalgebra::Matrix3;

const W: usize = 96;
const H: usize = 80;
const CENTER: (f64, f64) = (44.0, 38.0);
const RADIUS: f64 = 22.0;
const OMEGA: f64 = 0.06;
const LEN: usize = TRAJ_LEN;

fn true_h() -> Matrix3<f64> {
    let (s, a) = (1.1, 5f64.to_radians());
    Matrix3::new(s * a.cos(), -s * a.sin(), 6.0, s * a.sin(), s * a.cos(), -4.0, 0.0, 0.0, 1.0)
}

fn apply(h: &Matrix3<f64>, p: Point2) -> Point2 {
    let v = h * nalgebra::Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

/// Disc point `p` rotated by `t` frames.
fn spin(p: Point2, t: f64) -> Point2 {
    let (c, s) = ((OMEGA * t).cos(), (OMEGA * t).sin());
    let (dx, dy) = (p.x - CENTER.0, p.y - CENTER.1);
    Point2::new(CENTER.0 + c * dx - s * dy, CENTER.1 + s * dx + c * dy)
}

fn inside(p: Point2) -> bool {
    (p.x - CENTER.0).powi(2) + (p.y - CENTER.1).powi(2) <= RADIUS * RADIUS
}

/// The disc seen through `h`; `h` maps the reference scene into this view.
fn sequence(id: &str, h: &Matrix3<f64>) -> FrameSequence {
    let h_inv = h.try_inverse().unwrap();
    let pull = |r: usize, c: usize| apply(&h_inv, cell_center(r, c));
    let mut mask = Grid::filled(W, H, false);
    let mut edge = Grid::filled(W, H, 0.0f32);
    let mut flow = Grid::filled(W, H, [0.0f32; 2]);
    for r in 0..H {
        for c in 0..W {
            let q = pull(r, c);
            if inside(q) {
                mask.set(r, c, true);
                let next = apply(h, spin(q, 1.0)) - cell_center(r, c);
                flow.set(r, c, [next.x as f32, next.y as f32]);
            }
            let ring = ((q.x - CENTER.0).hypot(q.y - CENTER.1) - RADIUS).abs();
            let spoke = (q.y - CENTER.1).abs() < 1.0 && (q.x - CENTER.0).abs() < RADIUS;
            if ring < 1.0 || spoke {
                edge.set(r, c, 1.0);
            }
        }
    }
    // the disc is rotation invariant, so frames differ only through the tracks and flows
    let masks = (0..LEN).map(|t| ForegroundMask::new(t, mask.clone()).unwrap()).collect();
    let edge_maps = (0..LEN).map(|_| EdgeMap::new(edge.clone()).unwrap()).collect();
    let flows = (1..LEN).map(|_| FlowField::new(flow.clone()).unwrap()).collect();
    let trajectories = track_seeds()
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let points = (0..TRAJ_LEN).map(|t| apply(h, spin(p, t as f64))).collect();
            Trajectory::new(k as u64, 0, points).unwrap()
        })
        .collect();
    let seq = FrameSequence {
        shot_id: id.into(),
        start_frame: 0,
        length: LEN,
        trajectories,
        masks,
        edge_maps,
        flows,
        backward_flows: None,
    };
    seq.validate().unwrap();
    seq
}

/// Points spread over radii and angles so that their tracks differ in shape.
fn track_seeds() -> Vec<Point2> {
    (0..24)
        .map(|k| {
            let r = 4.0 + 0.7 * k as f64;
            let a = 2.4 * k as f64;
            Point2::new(CENTER.0 + r * a.cos(), CENTER.1 + r * a.sin())
        })
        .collect()
}

fn landmarks(h: &Matrix3<f64>) -> Vec<LandmarkSet> {
    let seeds = [(0.0, 0.0), (10.0, 3.0), (-12.0, 6.0), (5.0, -15.0), (-8.0, -9.0), (16.0, 10.0)];
    (0..LEN)
        .map(|t| {
            let points: BTreeMap<u8, Point2> = seeds
                .iter()
                .enumerate()
                .map(|(id, &(dx, dy))| {
                    let p = spin(Point2::new(CENTER.0 + dx, CENTER.1 + dy), t as f64);
                    (id as u8, apply(h, p))
                })
                .collect();
            let visible: BTreeSet<u8> = points.keys().copied().collect();
            LandmarkSet::new(t, points, visible).unwrap()
        })
        .collect()
}

fn recovered() -> (FrameSequence, FrameSequence, Homography) {
    let a = sequence("a", &Matrix3::identity());
    let b = sequence("b", &true_h());
    let matches = match_trajectories(&a, &b);
    assert!(!matches.is_empty());
    assert!(matches.iter().all(|m| m.traj_a.id == m.traj_b.id));
    // no foreground corners: an axis-aligned box cannot express the rotation
    let tau = InlierThreshold::from_masks(&a.masks, &b.masks, 0.05);
    let h = ransac_tm(&matches, None, &tau, &RansacParams::default()).unwrap();
    (a, b, h)
}

#[test]
fn trajectory_matching_recovers_the_affine_view() {
    let (_, _, h) = recovered();
    let truth = Homography::from_matrix(true_h());
    let dev = (h.h - truth.h).amax();
    assert!(dev < 1e-6, "{dev}\n{}", h.h);
    assert_eq!(h.outlier_fraction, 0.0);
    assert!(!h.fg_fallback);

    let rev = h.inverse().unwrap();
    let err = alignment_error(&h, &rev, &landmarks(&Matrix3::identity()), &landmarks(&true_h())).unwrap();
    assert!(err.mean_error < 1e-6, "{}", err.mean_error);
    assert!(is_correct(&err, &EvalConfig::default()));
}

#[test]
fn temporal_tps_keeps_an_exact_initialization_correct() {
    let (a, b, h) = recovered();
    // a short schedule: the initialization is already exact
    let params = TtpsParams {
        rpm: TpsRpmParams {
            anneal_rate: 0.5,
            t_final_factor: 0.1,
            lambda_init: 1000.0,
            sinkhorn_tolerance: 1e-3,
            ..Default::default()
        },
        edges: EdgeParams {
            max_points: 120,
            ..Default::default()
        },
        ..Default::default()
    };
    let fwd = fit_ttps(&a, &b, &h, &params).unwrap();
    let rev = fit_ttps(&b, &a, &h.inverse().unwrap(), &params).unwrap();
    assert!(fwd.energy.is_finite());
    let err = alignment_error(&fwd, &rev, &landmarks(&Matrix3::identity()), &landmarks(&true_h())).unwrap();
    assert!(is_correct(&err, &EvalConfig::default()), "{err:?}");
}

//! Synthetic corpora of an articulated quadruped with planted ground truth.
//!
//! A 19-landmark side-view skeleton walks under a piecewise-constant motion program
//! (root velocity, gait frequency and amplitude). Each shot draws its own similarity,
//! shear and smooth non-affine warp of the body, so cross-shot mappings are non-rigid.
//! Masks are dilated capsule unions of the bones (optionally missing a leg), edge maps are
//! the silhouette contour plus static clutter, and flows move every silhouette pixel with
//! its bone, so trajectories, flows and landmarks agree exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use cmpalign_core::tps::{fit_tps, TpsError, TpsMapping};
use cmpalign_core::{
    EdgeMap, FlowField, ForegroundMask, Grid, LandmarkSet, Point2, Trajectory, NUM_LANDMARKS, TRAJ_LEN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Shot};

pub const LANDMARK_NAMES: [&str; NUM_LANDMARKS as usize] = [
    "nose", "eye", "ear", "neck", "withers", "back", "croup", "tail_base", "tail_tip", "chest",
    "belly", "front_left_elbow", "front_left_hoof", "front_right_elbow", "front_right_hoof",
    "back_left_hock", "back_left_hoof", "back_right_hock", "back_right_hoof",
];

const SHOULDER: usize = 19;
const HIP: usize = 20;
const N_JOINTS: usize = 21;
/// Mask and silhouette dilation beyond the bone radii, in pixels.
const DILATE: f64 = 1.0;
/// Body-frame extent of the template at unit scale: x range, y range.
const EXTENT_X: (f64, f64) = (-33.0, 43.0);
const EXTENT_Y: (f64, f64) = (-26.0, 32.0);

struct Bone {
    a: usize,
    b: usize,
    radius: f64,
    leg: Option<usize>,
}

const fn bone(a: usize, b: usize, radius: f64, leg: Option<usize>) -> Bone {
    Bone { a, b, radius, leg }
}

const BONES: [Bone; 17] = [
    bone(6, 4, 8.0, None),
    bone(5, 10, 6.0, None),
    bone(4, 3, 5.0, None),
    bone(3, 2, 4.0, None),
    bone(2, 1, 3.5, None),
    bone(1, 0, 3.0, None),
    bone(4, 9, 6.0, None),
    bone(6, 7, 3.0, None),
    bone(7, 8, 1.5, None),
    bone(SHOULDER, 11, 3.2, Some(0)),
    bone(11, 12, 2.2, Some(0)),
    bone(SHOULDER, 13, 3.2, Some(1)),
    bone(13, 14, 2.2, Some(1)),
    bone(HIP, 15, 3.5, Some(2)),
    bone(15, 16, 2.2, Some(2)),
    bone(HIP, 17, 3.5, Some(3)),
    bone(17, 18, 2.2, Some(3)),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_shots: usize,
    pub frames_per_shot: usize,
    pub width: usize,
    pub height: usize,
    /// Template size multiplier; the body spans about 76 x 58 px at scale 1.
    pub scale: f64,
    /// Relative per-shot scale jitter.
    pub scale_jitter: f64,
    /// Per-shot rotation jitter, radians.
    pub rotation_jitter: f64,
    pub shear_jitter: f64,
    /// Amplitude of the smooth non-affine body warp, pixels at unit scale.
    pub warp_magnitude: f64,
    /// Per-shot random root offset, pixels.
    pub position_jitter: f64,
    /// Mean root speed, pixels per frame.
    pub speed: f64,
    /// Gait cycles per frame.
    pub gait_frequency: f64,
    /// Peak leg swing, radians.
    pub gait_amplitude: f64,
    pub segment_frames: [usize; 2],
    /// Every shot follows the same motion program (from the same starting phase).
    pub shared_program: bool,
    pub tracks_per_frame: usize,
    /// Fraction of trajectories that are random-walk outliers.
    pub outlier_rate: f64,
    /// Gaussian noise on tracked points, pixels.
    pub track_noise: f64,
    pub landmark_noise: f64,
    /// Probability that a landmark is marked invisible in a frame.
    pub landmark_dropout: f64,
    /// Probability that a frame's mask loses one leg.
    pub missing_leg_rate: f64,
    pub clutter_segments: usize,
    pub backward_flows: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_shots: 5,
            frames_per_shot: 40,
            width: 160,
            height: 120,
            scale: 1.0,
            scale_jitter: 0.08,
            rotation_jitter: 0.05,
            shear_jitter: 0.05,
            warp_magnitude: 3.0,
            position_jitter: 6.0,
            speed: 0.8,
            gait_frequency: 0.06,
            gait_amplitude: 0.5,
            segment_frames: [10, 20],
            shared_program: true,
            tracks_per_frame: 16,
            outlier_rate: 0.15,
            track_noise: 0.2,
            landmark_noise: 0.0,
            landmark_dropout: 0.0,
            missing_leg_rate: 0.2,
            clutter_segments: 8,
            backward_flows: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.n_shots == 0 {
            return bad("n_shots must be positive");
        }
        if self.frames_per_shot < TRAJ_LEN {
            return bad("frames_per_shot must be at least the trajectory length");
        }
        if !(self.scale > 0.0) {
            return bad("scale must be positive");
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let need_w = (EXTENT_X.1 - EXTENT_X.0) * self.scale * (1.0 + self.scale_jitter) + 2.0 * self.position_jitter;
        let need_h = (EXTENT_Y.1 - EXTENT_Y.0) * self.scale * (1.0 + self.scale_jitter) + 2.0 * self.position_jitter;
        if need_w + 4.0 > w || need_h + 4.0 > h {
            return bad("image too small for the figure at this scale");
        }
        if self.segment_frames[0] == 0 || self.segment_frames[0] > self.segment_frames[1] {
            return bad("segment_frames must be a nonempty range [min, max]");
        }
        for (name, p) in [
            ("outlier_rate", self.outlier_rate),
            ("landmark_dropout", self.landmark_dropout),
            ("missing_leg_rate", self.missing_leg_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("scale_jitter", self.scale_jitter),
            ("rotation_jitter", self.rotation_jitter),
            ("shear_jitter", self.shear_jitter),
            ("warp_magnitude", self.warp_magnitude),
            ("position_jitter", self.position_jitter),
            ("speed", self.speed),
            ("gait_frequency", self.gait_frequency),
            ("gait_amplitude", self.gait_amplitude),
            ("track_noise", self.track_noise),
            ("landmark_noise", self.landmark_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SynthError::InvalidSpec(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Room the root has to move horizontally and vertically around the image centre.
    fn root_range(&self) -> (f64, f64) {
        let s = self.scale * (1.0 + self.scale_jitter);
        let half_w = self.width as f64 / 2.0;
        let half_h = self.height as f64 / 2.0;
        let rx = (half_w - EXTENT_X.0.abs().max(EXTENT_X.1) * s - self.position_jitter - 2.0).max(0.0);
        let ry = (half_h - EXTENT_Y.0.abs().max(EXTENT_Y.1) * s - self.position_jitter - 2.0).max(0.0);
        (rx, ry)
    }
}

/// A stretch of constant motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub frames: usize,
    /// Root displacement per frame, pixels.
    pub velocity: [f64; 2],
    /// Gait cycles per frame.
    pub frequency: f64,
    /// Peak leg swing, radians.
    pub amplitude: f64,
    /// Gait phase at the first frame of the segment; `None` continues the running phase.
    #[serde(default)]
    pub phase: Option<f64>,
}

/// Per-shot body geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub scale: f64,
    pub rotation: f64,
    pub shear: f64,
    pub warp_magnitude: f64,
    pub warp_phase: [f64; 2],
    /// Root position in the first frame.
    pub origin: [f64; 2],
}

impl ShapeParams {
    fn place(&self, body: Point2, root: Point2) -> Point2 {
        let m = self.warp_magnitude;
        let q = Point2::new(
            body.x + m * (body.y / 6.0 + self.warp_phase[0]).sin(),
            body.y + m * (body.x / 9.0 + self.warp_phase[1]).sin(),
        );
        let sheared = Point2::new(q.x + self.shear * q.y, q.y);
        let (s, c) = self.rotation.sin_cos();
        root + Point2::new(c * sheared.x - s * sheared.y, s * sheared.x + c * sheared.y) * self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotPlan {
    pub id: String,
    pub shape: ShapeParams,
    pub program: Vec<MotionSegment>,
    pub initial_phase: f64,
    /// Seeds track sampling, noise, clutter and mask errors.
    pub seed: u64,
}

/// A generated corpus with the plans that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub plans: Vec<ShotPlan>,
}

fn rot(v: Point2, a: f64) -> Point2 {
    let (s, c) = a.sin_cos();
    Point2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Body-frame joint positions (x forward, y down) at gait phase `phase`.
fn pose(phase: f64, amplitude: f64) -> [Point2; N_JOINTS] {
    let p = Point2::new;
    let bob = 1.5 * (2.0 * phase).sin();
    let mut j = [Point2::default(); N_JOINTS];
    j[0] = p(39.0, -10.0 + bob);
    j[1] = p(32.0, -15.0 + bob);
    j[2] = p(28.0, -19.0 + bob);
    j[3] = p(24.0, -8.0 + 0.5 * bob);
    j[4] = p(14.0, -3.0);
    j[5] = p(0.0, -1.0);
    j[6] = p(-14.0, -2.0);
    j[7] = p(-21.0, -3.0);
    j[8] = p(-28.0, 10.0 + 2.0 * phase.sin());
    j[9] = p(20.0, 6.0);
    j[10] = p(0.0, 7.0);
    j[SHOULDER] = p(15.0, 5.0);
    j[HIP] = p(-14.0, 5.0);
    let down = p(0.0, 1.0);
    for (leg, (upper, lower, root, offset, bend_sign)) in [
        (11.0, 12.0, SHOULDER, 0.0, -1.0),
        (11.0, 12.0, SHOULDER, PI, -1.0),
        (12.0, 11.0, HIP, FRAC_PI_2, 1.0),
        (12.0, 11.0, HIP, 3.0 * FRAC_PI_2, 1.0),
    ]
    .into_iter()
    .enumerate()
    {
        let swing = amplitude * (phase + offset).sin();
        let bend = 0.8 * amplitude * (phase + offset + FRAC_PI_2).sin().max(0.0);
        let knee = j[root] + rot(down, swing) * upper;
        let hoof = knee + rot(down, swing + bend_sign * bend) * lower;
        j[11 + 2 * leg] = knee;
        j[12 + 2 * leg] = hoof;
    }
    j
}

/// Per-frame root position and gait parameters of a plan.
fn trace(plan: &ShotPlan, frames: usize) -> Vec<(Point2, f64, f64)> {
    let mut out = Vec::with_capacity(frames);
    let mut root = Point2::new(plan.shape.origin[0], plan.shape.origin[1]);
    let mut phase = plan.initial_phase;
    let mut segs = plan.program.iter().flat_map(|s| (0..s.frames).map(move |k| (s, k == 0)));
    let mut current = plan.program.last();
    for _ in 0..frames {
        if let Some((seg, first)) = segs.next() {
            current = Some(seg);
            if first {
                if let Some(p) = seg.phase {
                    phase = p;
                }
            }
        }
        let (amp, freq, vel) = current.map_or((0.0, 0.0, [0.0, 0.0]), |s| (s.amplitude, s.frequency, s.velocity));
        out.push((root, phase, amp));
        root = root + Point2::new(vel[0], vel[1]);
        phase += TAU * freq;
    }
    out
}

/// Image-space joint positions for every frame of a plan.
pub fn joint_tracks(plan: &ShotPlan, frames: usize) -> Vec<Vec<Point2>> {
    trace(plan, frames)
        .into_iter()
        .map(|(root, phase, amp)| pose(phase, amp).iter().map(|&b| plan.shape.place(b, root)).collect())
        .collect()
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 { ((p - a).x * ab.x + (p - a).y * ab.y) / len2 } else { 0.0 };
    p.distance(a + ab * s.clamp(0.0, 1.0))
}

/// Bone coordinates of `p`: fraction along the bone and signed offset across it.
fn bone_coords(p: Point2, a: Point2, b: Point2) -> (f64, f64) {
    let ab = b - a;
    let len = ab.norm().max(1e-12);
    let t = ab * (1.0 / len);
    let d = p - a;
    ((d.x * t.x + d.y * t.y) / len, t.x * d.y - t.y * d.x)
}

fn from_bone_coords(s: f64, off: f64, a: Point2, b: Point2) -> Point2 {
    let ab = b - a;
    let len = ab.norm().max(1e-12);
    let n = Point2::new(-ab.y / len, ab.x / len);
    a + ab * s + n * off
}

/// For every cell, the bone whose dilated capsule contains the cell centre most deeply
/// (lowest index on ties), or `None` outside the silhouette.
fn ownership(joints: &[Point2], radius_scale: f64, dropped_leg: Option<usize>, w: usize, h: usize) -> Grid<Option<u8>> {
    let mut owner = Grid::filled(w, h, None);
    let mut depth = Grid::filled(w, h, f64::INFINITY);
    for (k, b) in BONES.iter().enumerate() {
        if b.leg.is_some() && b.leg == dropped_leg {
            continue;
        }
        let reach = b.radius * radius_scale + DILATE;
        let (pa, pb) = (joints[b.a], joints[b.b]);
        let (r0, r1, c0, c1) = cell_window(&[pa, pb], reach + 1.0, w, h);
        for r in r0..r1 {
            for c in c0..c1 {
                let p = Point2::new(c as f64 + 0.5, r as f64 + 0.5);
                let d = segment_distance(p, pa, pb) - b.radius * radius_scale;
                if d <= DILATE && d < *depth.get(r, c) {
                    depth.set(r, c, d);
                    owner.set(r, c, Some(k as u8));
                }
            }
        }
    }
    owner
}

/// Cell range covering the points plus a margin, clipped to the image.
fn cell_window(points: &[Point2], margin: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let lo = |v: f64| (v - margin).floor().max(0.0) as usize;
    let hi = |v: f64, n: usize| ((v + margin).ceil().max(0.0) as usize).min(n);
    (lo(y0), hi(y1, h), lo(x0), hi(x1, w))
}

fn silhouette(owner: &Grid<Option<u8>>) -> Grid<bool> {
    let (w, h) = owner.dims();
    Grid::from_vec(w, h, owner.as_slice().iter().map(Option::is_some).collect()).expect("same dims")
}

/// Moves every silhouette cell of `from` with its bone into `to`.
fn flow_between(owner: &Grid<Option<u8>>, from: &[Point2], to: &[Point2]) -> FlowField {
    let (w, h) = owner.dims();
    let mut g = Grid::filled(w, h, [0.0f32; 2]);
    for (r, c, k) in owner.iter_cells() {
        if let Some(k) = k {
            let b = &BONES[*k as usize];
            let p = Point2::new(c as f64 + 0.5, r as f64 + 0.5);
            let (s, off) = bone_coords(p, from[b.a], from[b.b]);
            let q = from_bone_coords(s, off, to[b.a], to[b.b]);
            g.set(r, c, [(q.x - p.x) as f32, (q.y - p.y) as f32]);
        }
    }
    FlowField::new(g).expect("finite flow")
}

struct Clutter {
    a: Point2,
    b: Point2,
    strength: f32,
}

fn edge_map(sil: &Grid<bool>, clutter: &[Clutter]) -> EdgeMap {
    let (w, h) = sil.dims();
    let mut g = Grid::filled(w, h, 0.0f32);
    for cl in clutter {
        let n = (cl.a.distance(cl.b) * 2.0).ceil() as usize + 1;
        for k in 0..=n {
            let p = cl.a + (cl.b - cl.a) * (k as f64 / n as f64);
            let (c, r) = (p.x.floor(), p.y.floor());
            if c >= 0.0 && r >= 0.0 && (c as usize) < w && (r as usize) < h {
                let (r, c) = (r as usize, c as usize);
                if !*sil.get(r, c) {
                    g.set(r, c, g.get(r, c).max(cl.strength));
                }
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            if !*sil.get(r, c) {
                continue;
            }
            let outside = |dr: isize, dc: isize| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize || !*sil.get(rr as usize, cc as usize)
            };
            if outside(-1, 0) || outside(1, 0) || outside(0, -1) || outside(0, 1) {
                g.set(r, c, 1.0);
            }
        }
    }
    EdgeMap::new(g).expect("edge strengths lie in [0, 1]")
}

/// Renders one shot of `spec.frames_per_shot` frames.
pub fn render_shot(plan: &ShotPlan, spec: &SyntheticSpec) -> Shot {
    let (w, h, n) = (spec.width, spec.height, spec.frames_per_shot);
    let rs = plan.shape.scale;
    let joints = joint_tracks(plan, n);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    let clutter: Vec<Clutter> = (0..spec.clutter_segments)
        .map(|_| {
            let a = Point2::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let ang = rng.gen_range(0.0..TAU);
            let len = rng.gen_range(8.0..30.0);
            Clutter {
                a,
                b: a + Point2::new(ang.cos(), ang.sin()) * len,
                strength: rng.gen_range(0.3..0.9),
            }
        })
        .collect();

    let owners: Vec<Grid<Option<u8>>> = joints.iter().map(|jt| ownership(jt, rs, None, w, h)).collect();
    let mut masks = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    for (t, (jt, owner)) in joints.iter().zip(&owners).enumerate() {
        let full = silhouette(owner);
        let dropped = (rng.gen::<f64>() < spec.missing_leg_rate).then(|| rng.gen_range(0..4));
        let mask = match dropped {
            Some(leg) => silhouette(&ownership(jt, rs, Some(leg), w, h)),
            None => full.clone(),
        };
        edges.push(edge_map(&full, &clutter));
        masks.push(ForegroundMask::new(t, mask).expect("torso keeps the mask nonempty"));
    }
    let flows: Vec<FlowField> = (1..n).map(|t| flow_between(&owners[t - 1], &joints[t - 1], &joints[t])).collect();
    let backward_flows = spec
        .backward_flows
        .then(|| (1..n).map(|t| flow_between(&owners[t], &joints[t], &joints[t - 1])).collect());

    let noise = |sigma: f64| Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
    let track_noise = noise(spec.track_noise);
    let bone_weights: Vec<f64> = BONES.iter().map(|b| b.radius * (b.radius + 8.0)).collect();
    let total_w: f64 = bone_weights.iter().sum();
    let mut trajectories = Vec::new();
    let mut next_id = 0u64;
    for start in 0..=n.saturating_sub(TRAJ_LEN) {
        for _ in 0..spec.tracks_per_frame {
            let points: Vec<Point2> = if rng.gen::<f64>() < spec.outlier_rate {
                let mut p = Point2::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
                let mut v = Point2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                (0..TRAJ_LEN)
                    .map(|_| {
                        let out = p;
                        v = v + Point2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                        p = p + v;
                        out
                    })
                    .collect()
            } else {
                let mut pick = rng.gen::<f64>() * total_w;
                let k = bone_weights
                    .iter()
                    .position(|&bw| {
                        pick -= bw;
                        pick <= 0.0
                    })
                    .unwrap_or(BONES.len() - 1);
                let b = &BONES[k];
                let s = rng.gen_range(0.0..1.0);
                let off = rng.gen_range(-1.0..1.0) * b.radius * rs;
                (0..TRAJ_LEN)
                    .map(|i| {
                        let jt = &joints[start + i];
                        from_bone_coords(s, off, jt[b.a], jt[b.b])
                            + Point2::new(track_noise.sample(&mut rng), track_noise.sample(&mut rng))
                    })
                    .collect()
            };
            trajectories.push(Trajectory::new(next_id, start, points).expect("finite track"));
            next_id += 1;
        }
    }

    let lm_noise = noise(spec.landmark_noise);
    let landmarks = joints
        .iter()
        .enumerate()
        .map(|(t, jt)| {
            let mut points = BTreeMap::new();
            let mut visible = BTreeSet::new();
            for id in 0..NUM_LANDMARKS {
                let p = jt[id as usize] + Point2::new(lm_noise.sample(&mut rng), lm_noise.sample(&mut rng));
                let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64;
                let dropped = rng.gen::<f64>() < spec.landmark_dropout;
                points.insert(id, p);
                if inside && !dropped {
                    visible.insert(id);
                }
            }
            LandmarkSet::new(t, points, visible).expect("visible landmarks have points")
        })
        .collect();

    Shot {
        id: plan.id.clone(),
        width: w,
        height: h,
        masks,
        edges,
        flows,
        backward_flows,
        trajectories,
        landmarks: Some(landmarks),
    }
}

/// Random motion program of at least `frames` frames whose root stays within `range`
/// of its start.
pub fn random_program(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, frames: usize) -> Vec<MotionSegment> {
    let (rx, ry) = spec.root_range();
    let mut pos = Point2::default();
    let mut program = Vec::new();
    let mut total = 0;
    while total < frames {
        let len = rng.gen_range(spec.segment_frames[0]..=spec.segment_frames[1]);
        let speed = spec.speed * rng.gen_range(0.6..1.4);
        let mut vx = if rng.gen_bool(0.5) { speed } else { -speed };
        if (pos.x + vx * len as f64).abs() > rx {
            vx = -vx;
        }
        if (pos.x + vx * len as f64).abs() > rx {
            vx = (rx * vx.signum() - pos.x) / len as f64;
        }
        let mut vy = rng.gen_range(-0.25..0.25) * spec.speed;
        if (pos.y + vy * len as f64).abs() > ry {
            vy = -vy;
        }
        if (pos.y + vy * len as f64).abs() > ry {
            vy = 0.0;
        }
        pos = pos + Point2::new(vx, vy) * len as f64;
        program.push(MotionSegment {
            frames: len,
            velocity: [vx, vy],
            frequency: spec.gait_frequency * rng.gen_range(0.7..1.3),
            amplitude: spec.gait_amplitude * rng.gen_range(0.7..1.3),
            phase: None,
        });
        total += len;
    }
    program
}

/// Random per-shot shape around the template, centred in the image.
pub fn random_shape(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ShapeParams {
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let centre_y = spec.height as f64 / 2.0 - (EXTENT_Y.0 + EXTENT_Y.1) / 2.0 * spec.scale;
    let centre_x = spec.width as f64 / 2.0 - (EXTENT_X.0 + EXTENT_X.1) / 2.0 * spec.scale;
    ShapeParams {
        scale: spec.scale * (1.0 + sym(rng, spec.scale_jitter)),
        rotation: sym(rng, spec.rotation_jitter),
        shear: sym(rng, spec.shear_jitter),
        warp_magnitude: spec.warp_magnitude,
        warp_phase: [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
        origin: [
            (centre_x + sym(rng, spec.position_jitter)).round(),
            (centre_y + sym(rng, spec.position_jitter)).round(),
        ],
    }
}

/// Shot plans drawn from the spec's seed.
pub fn plan_shots(spec: &SyntheticSpec) -> Vec<ShotPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared = random_program(spec, &mut rng, spec.frames_per_shot);
    let shared_phase = rng.gen_range(0.0..TAU);
    (0..spec.n_shots)
        .map(|k| {
            let shape = random_shape(spec, &mut rng);
            let (program, initial_phase) = if spec.shared_program {
                (shared.clone(), shared_phase)
            } else {
                (random_program(spec, &mut rng, spec.frames_per_shot), rng.gen_range(0.0..TAU))
            };
            ShotPlan {
                id: format!("shot{k:03}"),
                shape,
                program,
                initial_phase,
                seed: rng.gen(),
            }
        })
        .collect()
}

/// Renders explicit plans into a corpus with one interval per shot (or 200-frame windows
/// for longer shots) and no cluster map.
pub fn render_corpus(plans: Vec<ShotPlan>, spec: &SyntheticSpec) -> Result<SyntheticCorpus, SynthError> {
    spec.validate()?;
    let shots = plans.iter().map(|p| render_shot(p, spec)).collect();
    let mut corpus = Corpus {
        shots,
        ..Corpus::default()
    };
    corpus.intervals = corpus.effective_intervals(200, 100);
    Ok(SyntheticCorpus { corpus, plans })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SynthError> {
    spec.validate()?;
    render_corpus(plan_shots(spec), spec)
}

/// Per-frame ground-truth mapping from sequence A to sequence B: the interpolating thin
/// plate spline through the co-visible landmarks. Frames with fewer than three shared
/// landmarks get the mean translation between them (identity with none).
pub fn ground_truth_mapping(lm_a: &[LandmarkSet], lm_b: &[LandmarkSet]) -> Result<Vec<TpsMapping>, TpsError> {
    lm_a.iter()
        .zip(lm_b)
        .map(|(a, b)| {
            let (mut u, mut v) = (Vec::new(), Vec::new());
            for id in a.visible.intersection(&b.visible) {
                if let (Some(&pa), Some(&pb)) = (a.points.get(id), b.points.get(id)) {
                    v.push(pa);
                    u.push(pb);
                }
            }
            if u.len() >= 3 {
                fit_tps(&u, &v, 0.0, None)
            } else {
                let shift = u
                    .iter()
                    .zip(&v)
                    .fold(Point2::default(), |s, (&pu, &pv)| s + (pu - pv))
                    * (1.0 / u.len().max(1) as f64);
                let m = nalgebra::Matrix3::new(1.0, 0.0, shift.x, 0.0, 1.0, shift.y, 0.0, 0.0, 1.0);
                Ok(TpsMapping::from_affine(m))
            }
        })
        .collect()
}

//! Geometric and corpus types shared by every stage of the pipeline.
//!
//! Raster convention: cell `(row, col)` has its center at `(col + 0.5, row + 0.5)`
//! in continuous pixel coordinates. Every conversion between points and rasters in
//! this crate goes through [`cell_center`] / [`Grid::sample_index`].

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of frames in a trajectory.
pub const TRAJ_LEN: usize = 10;

/// Number of annotated landmarks per frame.
pub const NUM_LANDMARKS: u8 = 19;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("foreground mask has no set cells")]
    EmptyMask,
    #[error("bounding box is degenerate (zero diagonal)")]
    DegenerateBox,
    #[error("bounding box corners are out of order")]
    InvertedBox,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("trajectory {id} has {len} points, expected {expected}")]
    TrajectoryLength { id: u64, len: usize, expected: usize },
    #[error("interval length {0} outside 10..=200")]
    IntervalLength(usize),
    #[error("raster size mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("edge strength {0} outside [0, 1]")]
    EdgeStrength(f32),
    #[error("landmark {0} is visible but has no position")]
    MissingLandmark(u8),
    #[error("sequence has {got} {what}, expected {expected}")]
    SequenceShape {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("mask frame {got} does not match expected frame {expected}")]
    FrameIndex { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (*self - other).norm()
    }

    pub fn distance_squared(&self, other: Point2) -> f64 {
        (*self - other).norm_squared()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Continuous coordinates of the center of raster cell `(row, col)`.
pub fn cell_center(row: usize, col: usize) -> Point2 {
    Point2::new(col as f64 + 0.5, row as f64 + 0.5)
}

/// Mean of a non-empty point set.
pub fn centroid(points: &[Point2]) -> Option<Point2> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Point2::default(), |acc, &p| acc + p);
    Some(sum * (1.0 / points.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Point2,
    pub max: Point2,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners. Zero-diagonal boxes are
    /// allowed here (see [`BBox::is_degenerate`]); ingestion rejects them.
    pub fn new(min: Point2, max: Point2) -> Result<Self, ModelError> {
        if !min.is_finite() || !max.is_finite() {
            return Err(ModelError::NonFinite);
        }
        if min.x > max.x || min.y > max.y {
            return Err(ModelError::InvertedBox);
        }
        Ok(Self { min, max })
    }

    /// Like [`BBox::new`] but also rejects zero-diagonal boxes.
    pub fn non_degenerate(min: Point2, max: Point2) -> Result<Self, ModelError> {
        let b = Self::new(min, max)?;
        if b.is_degenerate() {
            return Err(ModelError::DegenerateBox);
        }
        Ok(b)
    }

    pub fn diagonal(&self) -> f64 {
        bbox_diagonal(self)
    }

    pub fn is_degenerate(&self) -> bool {
        self.diagonal() <= 0.0
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    /// Corners in the fixed order min-min, min-max, max-min, max-max
    /// (first word is the x extreme, second the y extreme).
    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.min.x, self.min.y),
            Point2::new(self.min.x, self.max.y),
            Point2::new(self.max.x, self.min.y),
            Point2::new(self.max.x, self.max.y),
        ]
    }
}

/// Euclidean length of `max - min`.
pub fn bbox_diagonal(b: &BBox) -> f64 {
    (b.max - b.min).norm()
}

/// Dense row-major raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, ModelError> {
        if data.len() != width * height {
            return Err(ModelError::DimensionMismatch {
                expected: (width, height),
                got: (data.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(k, v)| (k / w, k % w, v))
    }

    /// Whether a continuous point lies inside the raster extent `[0,w) x [0,h)`.
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Continuous point to fractional cell-index space, where integers are cell centers.
    pub fn sample_index(p: Point2) -> (f64, f64) {
        (p.y - 0.5, p.x - 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    frame_index: usize,
    grid: Grid<bool>,
    bbox: BBox,
    centroid: Point2,
}

impl ForegroundMask {
    /// Builds a mask from a binary raster. The box spans the full extent of the set cells
    /// (cell `(r,c)` covers `[c,c+1] x [r,r+1]`), so it is never degenerate.
    pub fn new(frame_index: usize, grid: Grid<bool>) -> Result<Self, ModelError> {
        let mut count = 0usize;
        let (mut sx, mut sy) = (0.0f64, 0.0f64);
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
        for (r, c, &set) in grid.iter_cells() {
            if set {
                count += 1;
                let p = cell_center(r, c);
                sx += p.x;
                sy += p.y;
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
        if count == 0 {
            return Err(ModelError::EmptyMask);
        }
        let bbox = BBox::non_degenerate(
            Point2::new(cmin as f64, rmin as f64),
            Point2::new(cmax as f64 + 1.0, rmax as f64 + 1.0),
        )?;
        let n = count as f64;
        Ok(Self {
            frame_index,
            grid,
            bbox,
            centroid: Point2::new(sx / n, sy / n),
        })
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.grid
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn centroid(&self) -> Point2 {
        self.centroid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn count(&self) -> usize {
        self.grid.as_slice().iter().filter(|&&b| b).count()
    }
}

/// Center of mass of the set cells of a mask.
pub fn mask_centroid(mask: &ForegroundMask) -> Point2 {
    mask.centroid()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    grid: Grid<f32>,
}

impl EdgeMap {
    pub fn new(grid: Grid<f32>) -> Result<Self, ModelError> {
        if let Some(&bad) = grid
            .as_slice()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(ModelError::EdgeStrength(bad));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }
}

/// Per-pixel displacement from one frame to another.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    grid: Grid<[f32; 2]>,
}

impl FlowField {
    pub fn new(grid: Grid<[f32; 2]>) -> Result<Self, ModelError> {
        if grid
            .as_slice()
            .iter()
            .any(|v| !v[0].is_finite() || !v[1].is_finite())
        {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { grid })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            grid: Grid::filled(width, height, [0.0, 0.0]),
        }
    }

    pub fn grid(&self) -> &Grid<[f32; 2]> {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    /// Bilinear sample of the displacement at a continuous point. Samples outside the
    /// raster are clamped to the border cells.
    pub fn sample(&self, p: Point2) -> Point2 {
        let (w, h) = self.grid.dims();
        let (fr, fc) = Grid::<[f32; 2]>::sample_index(p);
        let fr = fr.clamp(0.0, (h - 1) as f64);
        let fc = fc.clamp(0.0, (w - 1) as f64);
        let r0 = fr.floor() as usize;
        let c0 = fc.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let ar = fr - r0 as f64;
        let ac = fc - c0 as f64;
        let at = |r: usize, c: usize| {
            let v = self.grid.get(r, c);
            Point2::new(v[0] as f64, v[1] as f64)
        };
        let top = at(r0, c0) * (1.0 - ac) + at(r0, c1) * ac;
        let bottom = at(r1, c0) * (1.0 - ac) + at(r1, c1) * ac;
        top * (1.0 - ar) + bottom * ar
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub start_frame: usize,
    pub points: Vec<Point2>,
}

impl Trajectory {
    pub fn new(id: u64, start_frame: usize, points: Vec<Point2>) -> Result<Self, ModelError> {
        if points.len() != TRAJ_LEN {
            return Err(ModelError::TrajectoryLength {
                id,
                len: points.len(),
                expected: TRAJ_LEN,
            });
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            id,
            start_frame,
            points,
        })
    }

    /// Last frame covered by the track.
    pub fn end_frame(&self) -> usize {
        self.start_frame + self.points.len() - 1
    }
}

/// A window of `length` consecutive frames of one shot, with the features that fall in it.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub shot_id: String,
    pub start_frame: usize,
    pub length: usize,
    /// Trajectories starting inside the window. They may extend past its end.
    pub trajectories: Vec<Trajectory>,
    pub masks: Vec<ForegroundMask>,
    pub edge_maps: Vec<EdgeMap>,
    /// `flows[t]` maps frame `t` to `t + 1` (sequence-relative).
    pub flows: Vec<FlowField>,
    /// `backward_flows[t]` maps frame `t + 1` to `t`, when available.
    pub backward_flows: Option<Vec<FlowField>>,
}

impl FrameSequence {
    /// Checks the index invariants: `length` masks and edge maps aligned to
    /// `start_frame`, `length - 1` flows, trajectories starting in the window.
    pub fn validate(&self) -> Result<(), ModelError> {
        let t = self.length;
        let check = |what: &'static str, got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(ModelError::SequenceShape {
                    what,
                    got,
                    expected,
                })
            }
        };
        check("masks", self.masks.len(), t)?;
        check("edge maps", self.edge_maps.len(), t)?;
        check("flows", self.flows.len(), t.saturating_sub(1))?;
        if let Some(back) = &self.backward_flows {
            check("backward flows", back.len(), t.saturating_sub(1))?;
        }
        for (k, m) in self.masks.iter().enumerate() {
            if m.frame_index() != self.start_frame + k {
                return Err(ModelError::FrameIndex {
                    expected: self.start_frame + k,
                    got: m.frame_index(),
                });
            }
        }
        for tr in &self.trajectories {
            if tr.start_frame < self.start_frame || tr.start_frame >= self.start_frame + t {
                return Err(ModelError::FrameIndex {
                    expected: self.start_frame,
                    got: tr.start_frame,
                });
            }
        }
        Ok(())
    }

    /// Mask of the frame a trajectory starts in.
    pub fn mask_at(&self, absolute_frame: usize) -> Option<&ForegroundMask> {
        absolute_frame
            .checked_sub(self.start_frame)
            .and_then(|k| self.masks.get(k))
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.masks.first().map(|m| m.dims())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub shot_id: String,
    pub start_frame: usize,
    pub length: usize,
    pub cluster_id: u32,
}

impl Interval {
    pub const MIN_LEN: usize = 10;
    pub const MAX_LEN: usize = 200;

    pub fn new(
        shot_id: impl Into<String>,
        start_frame: usize,
        length: usize,
        cluster_id: u32,
    ) -> Result<Self, ModelError> {
        if !(Self::MIN_LEN..=Self::MAX_LEN).contains(&length) {
            return Err(ModelError::IntervalLength(length));
        }
        Ok(Self {
            shot_id: shot_id.into(),
            start_frame,
            length,
            cluster_id,
        })
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.length
    }
}

/// Ground-truth landmark annotations for one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub frame_index: usize,
    pub points: BTreeMap<u8, Point2>,
    pub visible: BTreeSet<u8>,
}

impl LandmarkSet {
    pub fn new(
        frame_index: usize,
        points: BTreeMap<u8, Point2>,
        visible: BTreeSet<u8>,
    ) -> Result<Self, ModelError> {
        for id in &visible {
            match points.get(id) {
                Some(p) if p.is_finite() => {}
                Some(_) => return Err(ModelError::NonFinite),
                None => return Err(ModelError::MissingLandmark(*id)),
            }
        }
        Ok(Self {
            frame_index,
            points,
            visible,
        })
    }

    /// All landmarks of `points` marked visible.
    pub fn all_visible(frame_index: usize, points: BTreeMap<u8, Point2>) -> Self {
        let visible = points.keys().copied().collect();
        Self {
            frame_index,
            points,
            visible,
        }
    }

    pub fn visible_point(&self, id: u8) -> Option<Point2> {
        if self.visible.contains(&id) {
            self.points.get(&id).copied()
        } else {
            None
        }
    }

    /// Object scale: the largest distance between two visible landmarks.
    /// `None` with fewer than two visible landmarks.
    pub fn scale(&self) -> Option<f64> {
        let pts: Vec<Point2> = self
            .visible
            .iter()
            .filter_map(|id| self.points.get(id).copied())
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let mut best = 0.0f64;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                best = best.max(pts[i].distance(pts[j]));
            }
        }
        Some(best)
    }
}

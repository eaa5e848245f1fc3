//! Modified trajectory-shape descriptors, per-frame bags of words, and mining of
//! consistent motion pairs (CMPs) between two intervals.

use std::cmp::Ordering;
use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ForegroundMask, Trajectory};

/// Default sequence length of a CMP.
pub const DEFAULT_T_LEN: usize = 10;
/// Default number of CMPs kept per interval pair.
pub const DEFAULT_TOP_K: usize = 10;
/// Default codebook size.
pub const DEFAULT_CODEBOOK_K: usize = 256;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("trajectory {0} does not move; its shape descriptor is undefined")]
    StaticTrajectory(u64),
    #[error("mask is for frame {mask} but trajectory starts at frame {traj}")]
    FrameMismatch { mask: usize, traj: usize },
    #[error("need at least {needed} distinct descriptors, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("histogram dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("sequence start ({i}, {j}) with length {t_len} exceeds interval lengths ({n}, {m})")]
    OutOfRange {
        i: usize,
        j: usize,
        t_len: usize,
        n: usize,
        m: usize,
    },
    #[error("interval of {len} frames is shorter than the sequence length {t_len}")]
    IntervalTooShort { len: usize, t_len: usize },
    #[error("both intervals come from shot {0}; CMPs are mined across shots only")]
    SameShot(String),
    #[error("codebook size must be at least 1")]
    ZeroK,
}

/// Trajectory shape with an appended, scale-normalized offset from the foreground centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsDescriptor {
    /// Per-frame displacements divided by the total path length, `2 (L - 1)` entries.
    pub displacement: Vec<f64>,
    /// `(p0 - centroid) / bbox_diagonal`.
    pub anchor: [f64; 2],
}

impl TsDescriptor {
    pub fn dim(&self) -> usize {
        self.displacement.len() + 2
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.displacement.clone();
        v.extend_from_slice(&self.anchor);
        v
    }

    pub fn distance(&self, other: &TsDescriptor) -> f64 {
        squared_distance(&self.to_vec(), &other.to_vec()).sqrt()
    }
}

pub fn compute_modified_ts(
    traj: &Trajectory,
    mask_at_start: &ForegroundMask,
) -> Result<TsDescriptor, DescriptorError> {
    if mask_at_start.frame_index() != traj.start_frame {
        return Err(DescriptorError::FrameMismatch {
            mask: mask_at_start.frame_index(),
            traj: traj.start_frame,
        });
    }
    let steps: Vec<_> = traj.points.windows(2).map(|w| w[1] - w[0]).collect();
    let total: f64 = steps.iter().map(|d| d.norm()).sum();
    if total <= f64::EPSILON {
        return Err(DescriptorError::StaticTrajectory(traj.id));
    }
    let displacement = steps
        .iter()
        .flat_map(|d| [d.x / total, d.y / total])
        .collect();
    let diag = mask_at_start.bbox().diagonal();
    let off = traj.points[0] - mask_at_start.centroid();
    Ok(TsDescriptor {
        displacement,
        anchor: [off.x / diag, off.y / diag],
    })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centers: Vec<Vec<f64>>,
    pub k: usize,
    pub seed: u64,
}

impl Codebook {
    /// Index of the nearest center; ties go to the lower index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        nearest_center(&self.centers, v).0
    }
}

fn nearest_center(centers: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(c, v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means with k-means++ seeding from a ChaCha RNG; identical inputs and seed give an
/// identical codebook.
pub fn build_codebook(
    descriptors: &[TsDescriptor],
    k: usize,
    seed: u64,
) -> Result<Codebook, DescriptorError> {
    let data: Vec<Vec<f64>> = descriptors.iter().map(TsDescriptor::to_vec).collect();
    build_codebook_from_vectors(&data, k, seed)
}

pub fn build_codebook_from_vectors(
    data: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<Codebook, DescriptorError> {
    if k == 0 {
        return Err(DescriptorError::ZeroK);
    }
    let distinct = distinct_count(data);
    if distinct < k {
        return Err(DescriptorError::InsufficientData {
            needed: k,
            got: distinct,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(data[rng.gen_range(0..data.len())].clone());
    let mut d2: Vec<f64> = data
        .iter()
        .map(|x| squared_distance(x, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                pick = Some(i);
                break;
            }
            target -= w;
        }
        // rounding can walk past the end; fall back to the last positive-weight point
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0));
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, &centers[centers.len() - 1]));
        }
    }

    let dim = data[0].len();
    let mut assign = vec![usize::MAX; data.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let (c, _) = nearest_center(&centers, x);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            } else {
                // re-seed an empty cluster with the point farthest from its center
                let far = (0..data.len())
                    .max_by(|&a, &b| {
                        let da = squared_distance(&data[a], &centers[assign[a]]);
                        let db = squared_distance(&data[b], &centers[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centers[c] = data[far].clone();
                assign[far] = c;
            }
        }
    }
    Ok(Codebook { centers, k, seed })
}

fn distinct_count(data: &[Vec<f64>]) -> usize {
    let set: HashSet<Vec<u64>> = data
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect())
        .collect();
    set.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBow {
    pub histogram: Vec<f64>,
    pub frame_index: usize,
}

/// Hard-assignment histogram of the descriptors of trajectories starting in one frame,
/// L1-normalized. An empty frame yields the zero histogram.
pub fn frame_bow(descriptors: &[TsDescriptor], codebook: &Codebook, frame_index: usize) -> FrameBow {
    let mut histogram = vec![0.0; codebook.centers.len()];
    for d in descriptors {
        histogram[codebook.nearest(&d.to_vec())] += 1.0;
    }
    if !descriptors.is_empty() {
        let n = descriptors.len() as f64;
        histogram.iter_mut().for_each(|h| *h /= n);
    }
    FrameBow {
        histogram,
        frame_index,
    }
}

pub fn histogram_intersection(a: &FrameBow, b: &FrameBow) -> Result<f64, DescriptorError> {
    if a.histogram.len() != b.histogram.len() {
        return Err(DescriptorError::DimensionMismatch(
            a.histogram.len(),
            b.histogram.len(),
        ));
    }
    Ok(a.histogram
        .iter()
        .zip(&b.histogram)
        .map(|(x, y)| x.min(*y))
        .sum())
}

/// `d[(i, j)]` is the intersection of frame `i` of `p` with frame `j` of `q`.
pub fn intersection_matrix(p: &[FrameBow], q: &[FrameBow]) -> Result<DMatrix<f64>, DescriptorError> {
    let mut d = DMatrix::zeros(p.len(), q.len());
    for (i, a) in p.iter().enumerate() {
        for (j, b) in q.iter().enumerate() {
            d[(i, j)] = histogram_intersection(a, b)?;
        }
    }
    Ok(d)
}

/// Sum of `d` along the diagonal of length `t_len` starting at `(i, j)`.
pub fn score_sequence_pair(
    i: usize,
    j: usize,
    d: &DMatrix<f64>,
    t_len: usize,
) -> Result<f64, DescriptorError> {
    let (n, m) = d.shape();
    if i + t_len > n || j + t_len > m {
        return Err(DescriptorError::OutOfRange { i, j, t_len, n, m });
    }
    Ok((0..t_len).map(|t| d[(i + t, j + t)]).sum())
}

/// Per-frame bags of words of one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBows {
    pub shot_id: String,
    pub interval: usize,
    pub start_frame: usize,
    pub bows: Vec<FrameBow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceRef {
    pub shot_id: String,
    pub interval: usize,
    /// Absolute frame index in the shot.
    pub start_frame: usize,
    pub length: usize,
}

/// Consistent motion pair: two equal-length sequences from different shots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cmp {
    pub seq_a: SequenceRef,
    pub seq_b: SequenceRef,
    pub score: f64,
    pub rank: usize,
}

/// Scores every pair of `t_len`-frame sequences (all inclusive start pairs) and keeps
/// the `top_k` best, ordered by descending score then `(i, j)`.
pub fn extract_cmps(
    p: &IntervalBows,
    q: &IntervalBows,
    t_len: usize,
    top_k: usize,
) -> Result<Vec<Cmp>, DescriptorError> {
    if p.shot_id == q.shot_id {
        return Err(DescriptorError::SameShot(p.shot_id.clone()));
    }
    for len in [p.bows.len(), q.bows.len()] {
        if len < t_len || t_len == 0 {
            return Err(DescriptorError::IntervalTooShort { len, t_len });
        }
    }
    let d = intersection_matrix(&p.bows, &q.bows)?;
    let (n, m) = (p.bows.len(), q.bows.len());
    let mut scored = Vec::with_capacity((n - t_len + 1) * (m - t_len + 1));
    for i in 0..=n - t_len {
        for j in 0..=m - t_len {
            scored.push((score_sequence_pair(i, j, &d, t_len)?, i, j));
        }
    }
    scored.sort_by(|a, b| rank_order((a.0, a.1, a.2), (b.0, b.1, b.2)));
    scored.truncate(top_k);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(rank, (score, i, j))| Cmp {
            seq_a: SequenceRef {
                shot_id: p.shot_id.clone(),
                interval: p.interval,
                start_frame: p.start_frame + i,
                length: t_len,
            },
            seq_b: SequenceRef {
                shot_id: q.shot_id.clone(),
                interval: q.interval,
                start_frame: q.start_frame + j,
                length: t_len,
            },
            score,
            rank,
        })
        .collect())
}

fn rank_order(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Grid, Point2, TRAJ_LEN};

    fn block_mask(frame: usize, r0: usize, c0: usize, h: usize, w: usize) -> ForegroundMask {
        let mut g = Grid::filled(64, 64, false);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                g.set(r, c, true);
            }
        }
        ForegroundMask::new(frame, g).unwrap()
    }

    fn line_traj(start: Point2, step: Point2) -> Trajectory {
        let pts = (0..TRAJ_LEN).map(|k| start + step * k as f64).collect();
        Trajectory::new(1, 0, pts).unwrap()
    }

    #[test]
    fn uniform_motion_gives_equal_shares() {
        let m = block_mask(0, 10, 10, 8, 6);
        let d = compute_modified_ts(&line_traj(Point2::new(5.0, 5.0), Point2::new(1.0, 0.0)), &m)
            .unwrap();
        assert_eq!(d.displacement.len(), 2 * (TRAJ_LEN - 1));
        assert_eq!(d.dim(), 2 * (TRAJ_LEN - 1) + 2);
        for pair in d.displacement.chunks(2) {
            assert!((pair[0] - 1.0 / 9.0).abs() < 1e-15);
            assert_eq!(pair[1], 0.0);
        }
    }

    #[test]
    fn anchor_is_normalized_offset() {
        // 6x8 block: diagonal 10, centroid (13, 14)
        let m = block_mask(0, 10, 10, 8, 6);
        assert_eq!(m.bbox().diagonal(), 10.0);
        let c = m.centroid();
        let at_centroid = compute_modified_ts(&line_traj(c, Point2::new(0.5, 0.5)), &m).unwrap();
        assert_eq!(at_centroid.anchor, [0.0, 0.0]);
        // offset d = 5 = diag / 2
        let off = compute_modified_ts(
            &line_traj(c + Point2::new(5.0, 0.0), Point2::new(0.5, 0.5)),
            &m,
        )
        .unwrap();
        assert!((off.anchor[0] - 0.5).abs() < 1e-15 && off.anchor[1] == 0.0);
    }

    #[test]
    fn static_trajectory_is_an_error() {
        let m = block_mask(0, 10, 10, 8, 6);
        let t = line_traj(Point2::new(3.0, 3.0), Point2::new(0.0, 0.0));
        assert_eq!(
            compute_modified_ts(&t, &m),
            Err(DescriptorError::StaticTrajectory(1))
        );
    }

    #[test]
    fn mask_frame_must_match_start() {
        let m = block_mask(4, 10, 10, 8, 6);
        let t = line_traj(Point2::new(3.0, 3.0), Point2::new(1.0, 0.0));
        assert!(matches!(
            compute_modified_ts(&t, &m),
            Err(DescriptorError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn one_cluster_center_is_global_mean() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let cb = build_codebook_from_vectors(&data, 1, 3).unwrap();
        assert!((cb.centers[0][0] - 4.5).abs() < 1e-12);
        assert!((cb.centers[0][1] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn two_separated_clusters_recover_means() {
        // exhaustive 2-means oracle: on linearly separable data with a wide gap the optimal
        // partition is the obvious split, whose means are computed directly here.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = Vec::new();
        let mut sums = [[0.0; 2]; 2];
        for k in 0..2 {
            for _ in 0..25 {
                let v = vec![
                    100.0 * k as f64 + rng.gen::<f64>(),
                    -50.0 * k as f64 + rng.gen::<f64>(),
                ];
                sums[k][0] += v[0];
                sums[k][1] += v[1];
                data.push(v);
            }
        }
        // check the planted split is the exhaustive optimum among all contiguous splits
        // along the separating axis (any other split mixes points 100 apart)
        let cb = build_codebook_from_vectors(&data, 2, 5).unwrap();
        let mut centers = cb.centers.clone();
        centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for k in 0..2 {
            assert!((centers[k][0] - sums[k][0] / 25.0).abs() < 1e-9);
            assert!((centers[k][1] - sums[k][1] / 25.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_descriptors_are_insufficient() {
        let data = vec![vec![1.0, 2.0]; 8];
        assert_eq!(
            build_codebook_from_vectors(&data, 2, 0),
            Err(DescriptorError::InsufficientData { needed: 2, got: 1 })
        );
        let data = vec![vec![1.0, 2.0]; 1];
        assert!(matches!(
            build_codebook_from_vectors(&data, 3, 0),
            Err(DescriptorError::InsufficientData { .. })
        ));
    }

    #[test]
    fn codebook_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let a = build_codebook_from_vectors(&data, 8, 42).unwrap();
        let b = build_codebook_from_vectors(&data, 8, 42).unwrap();
        assert_eq!(a, b);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(a.centers[i], a.centers[j]);
            }
        }
    }

    fn unit_codebook(k: usize) -> Codebook {
        let centers = (0..k)
            .map(|c| {
                let mut v = vec![0.0; 2 * (TRAJ_LEN - 1) + 2];
                v[0] = 10.0 * c as f64;
                v
            })
            .collect();
        Codebook {
            centers,
            k,
            seed: 0,
        }
    }

    fn desc_near(c: usize) -> TsDescriptor {
        let mut displacement = vec![0.0; 2 * (TRAJ_LEN - 1)];
        displacement[0] = 10.0 * c as f64 + 0.1;
        TsDescriptor {
            displacement,
            anchor: [0.0, 0.0],
        }
    }

    #[test]
    fn bow_examples() {
        let cb = unit_codebook(4);
        let all0 = frame_bow(&[desc_near(0), desc_near(0), desc_near(0)], &cb, 3);
        assert_eq!(all0.histogram, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(all0.frame_index, 3);
        let empty = frame_bow(&[], &cb, 0);
        assert_eq!(empty.histogram, vec![0.0; 4]);
        let split = frame_bow(&[desc_near(0), desc_near(1)], &cb, 0);
        assert_eq!(split.histogram, vec![0.5, 0.5, 0.0, 0.0]);
    }

    fn bow(h: Vec<f64>) -> FrameBow {
        FrameBow {
            histogram: h,
            frame_index: 0,
        }
    }

    #[test]
    fn intersection_examples() {
        let a = bow(vec![0.2, 0.3, 0.5]);
        assert!((histogram_intersection(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let d1 = bow(vec![0.5, 0.5, 0.0, 0.0]);
        let d2 = bow(vec![0.0, 0.0, 0.3, 0.7]);
        assert_eq!(histogram_intersection(&d1, &d2).unwrap(), 0.0);
        let x = bow(vec![0.5, 0.5]);
        let y = bow(vec![1.0, 0.0]);
        assert_eq!(histogram_intersection(&x, &y).unwrap(), 0.5);
        assert_eq!(
            histogram_intersection(&x, &d1),
            Err(DescriptorError::DimensionMismatch(2, 4))
        );
    }

    #[test]
    fn sequence_score_examples() {
        let ones = DMatrix::from_element(12, 12, 1.0);
        assert_eq!(score_sequence_pair(1, 2, &ones, 10).unwrap(), 10.0);
        let c = DMatrix::from_element(10, 10, 0.3);
        assert!((score_sequence_pair(0, 0, &c, 10).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(
            score_sequence_pair(1, 0, &c, 10),
            Err(DescriptorError::OutOfRange { .. })
        ));
    }

    #[test]
    fn sequence_score_matches_resummation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DMatrix::from_fn(23, 17, |_, _| rng.gen::<f64>());
        for i in 0..=13 {
            for j in 0..=7 {
                let mut oracle = 0.0;
                let (mut a, mut b) = (i, j);
                while a < i + 10 {
                    oracle += d[(a, b)];
                    a += 1;
                    b += 1;
                }
                assert_eq!(score_sequence_pair(i, j, &d, 10).unwrap(), oracle);
            }
        }
    }

    fn interval(shot: &str, hists: Vec<Vec<f64>>) -> IntervalBows {
        IntervalBows {
            shot_id: shot.into(),
            interval: 0,
            start_frame: 100,
            bows: hists
                .into_iter()
                .enumerate()
                .map(|(f, h)| FrameBow {
                    histogram: h,
                    frame_index: 100 + f,
                })
                .collect(),
        }
    }

    fn random_hist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(4)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn single_start_pair_when_lengths_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = interval("a", (0..10).map(|_| random_hist(&mut rng, 6)).collect());
        let q = interval("b", (0..10).map(|_| random_hist(&mut rng, 6)).collect());
        let cmps = extract_cmps(&p, &q, 10, 10).unwrap();
        assert_eq!(cmps.len(), 1);
        assert_eq!(cmps[0].seq_a.start_frame, 100);
        assert_eq!(cmps[0].rank, 0);
    }

    #[test]
    fn planted_subsequence_ranks_first_and_top_k_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p_h: Vec<Vec<f64>> = (0..30).map(|_| random_hist(&mut rng, 16)).collect();
        let mut q_h: Vec<Vec<f64>> = (0..25).map(|_| random_hist(&mut rng, 16)).collect();
        for t in 0..10 {
            q_h[7 + t] = p_h[12 + t].clone();
        }
        let p = interval("a", p_h);
        let q = interval("b", q_h);
        // exhaustive oracle
        let d = intersection_matrix(&p.bows, &q.bows).unwrap();
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..=20 {
            for j in 0..=15 {
                let s = score_sequence_pair(i, j, &d, 10).unwrap();
                if s > best.0 {
                    best = (s, i, j);
                }
            }
        }
        assert_eq!((best.1, best.2), (12, 7));
        let cmps = extract_cmps(&p, &q, 10, 1000).unwrap();
        assert_eq!(cmps.len(), 21 * 16);
        assert_eq!(cmps[0].seq_a.start_frame, 112);
        assert_eq!(cmps[0].seq_b.start_frame, 107);
        assert!(cmps.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn same_shot_and_short_intervals_rejected() {
        let p = interval("a", vec![vec![1.0]; 12]);
        assert!(matches!(
            extract_cmps(&p, &p, 10, 10),
            Err(DescriptorError::SameShot(_))
        ));
        let q = interval("b", vec![vec![1.0]; 9]);
        assert!(matches!(
            extract_cmps(&p, &q, 10, 10),
            Err(DescriptorError::IntervalTooShort { len: 9, .. })
        ));
    }

    #[test]
    fn ties_break_by_start_indices() {
        let p = interval("a", vec![vec![1.0]; 12]);
        let q = interval("b", vec![vec![1.0]; 11]);
        let cmps = extract_cmps(&p, &q, 10, 10).unwrap();
        let order: Vec<_> = cmps
            .iter()
            .map(|c| (c.seq_a.start_frame - 100, c.seq_b.start_frame - 100))
            .collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn hist(k: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..1.0, k).prop_map(|v| {
                let s: f64 = v.iter().sum::<f64>().max(1e-9);
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn intersection_symmetric_bounded(a in hist(8), b in hist(8)) {
                let (x, y) = (bow(a.clone()), bow(b.clone()));
                let ab = histogram_intersection(&x, &y).unwrap();
                let ba = histogram_intersection(&y, &x).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
                if a != b {
                    prop_assert!(ab < 1.0 + 1e-12);
                }
            }

            #[test]
            fn score_invariant_under_bin_permutation(
                seqs in proptest::collection::vec(hist(6), 24),
                perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
            ) {
                let p: Vec<FrameBow> = seqs[..12].iter().cloned().map(bow).collect();
                let q: Vec<FrameBow> = seqs[12..].iter().cloned().map(bow).collect();
                let permute = |b: &FrameBow| bow(perm.iter().map(|&k| b.histogram[k]).collect());
                let pp: Vec<FrameBow> = p.iter().map(permute).collect();
                let qp: Vec<FrameBow> = q.iter().map(permute).collect();
                let d = intersection_matrix(&p, &q).unwrap();
                let dp = intersection_matrix(&pp, &qp).unwrap();
                for i in 0..=2 {
                    for j in 0..=2 {
                        let s = score_sequence_pair(i, j, &d, 10).unwrap();
                        let sp = score_sequence_pair(i, j, &dp, 10).unwrap();
                        prop_assert!((s - sp).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn anchor_invariant_to_frame_scaling(s in 1usize..4, dx in 0.0f64..3.0, dy in 0.0f64..3.0) {
                let base = block_mask(0, 2, 2, 4, 6);
                let mut g = Grid::filled(64, 64, false);
                for r in 2 * s..(2 + 4) * s {
                    for c in 2 * s..(2 + 6) * s {
                        g.set(r, c, true);
                    }
                }
                let scaled = ForegroundMask::new(0, g).unwrap();
                let start = base.centroid() + Point2::new(dx, dy);
                let t1 = line_traj(start, Point2::new(0.3, 0.1));
                let t2 = line_traj(start * s as f64, Point2::new(0.3, 0.1) * s as f64);
                let a = compute_modified_ts(&t1, &base).unwrap();
                let b = compute_modified_ts(&t2, &scaled).unwrap();
                prop_assert!((a.anchor[0] - b.anchor[0]).abs() < 1e-12);
                prop_assert!((a.anchor[1] - b.anchor[1]).abs() < 1e-12);
                for (x, y) in a.displacement.iter().zip(&b.displacement) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

use nalgebra::Matrix3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    fit_homography_dlt, has_collinear_triple, hartley_transform, apply_matrix, symmetric_transfer_error, FgMatches,
    Homography, HomographyError, PointCorrespondence, TrajectoryMatch,
};
use crate::model::{ForegroundMask, TRAJ_LEN};

const SAMPLE_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub seed: u64,
    pub confidence: f64,
    pub max_iterations: usize,
    /// Inlier threshold as a fraction of the mean bounding-box diagonal of a frame.
    pub tau_scale: f64,
    /// Minimum number of inlier trajectory matches. Point-based RANSAC uses the number
    /// of point inliers this many matches imply at the acceptance rule (half of each).
    pub min_inlier_matches: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            seed: 0,
            confidence: 0.99,
            max_iterations: 2000,
            tau_scale: 0.05,
            min_inlier_matches: 8,
        }
    }
}

impl RansacParams {
    fn min_point_inliers(&self) -> usize {
        (self.min_inlier_matches * TRAJ_LEN).div_ceil(2).max(SAMPLE_SIZE)
    }
}

/// Inlier threshold on the symmetric transfer error, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum InlierThreshold {
    Fixed(f64),
    /// One threshold per sequence-relative frame; offsets past the end use the last one.
    PerFrame(Vec<f64>),
}

impl InlierThreshold {
    /// `tau_scale` times the mean of the two bounding-box diagonals in each frame.
    pub fn from_masks(masks_a: &[ForegroundMask], masks_b: &[ForegroundMask], tau_scale: f64) -> Self {
        InlierThreshold::PerFrame(
            masks_a
                .iter()
                .zip(masks_b)
                .map(|(a, b)| tau_scale * 0.5 * (a.bbox().diagonal() + b.bbox().diagonal()))
                .collect(),
        )
    }

    pub fn at(&self, frame_offset: usize) -> f64 {
        match self {
            InlierThreshold::Fixed(t) => *t,
            InlierThreshold::PerFrame(v) => match v.get(frame_offset) {
                Some(t) => *t,
                None => v.last().copied().unwrap_or(0.0),
            },
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match self {
            InlierThreshold::Fixed(t) => InlierThreshold::Fixed(t * s),
            InlierThreshold::PerFrame(v) => InlierThreshold::PerFrame(v.iter().map(|t| t * s).collect()),
        }
    }
}

fn inlier_flags(h: &Matrix3<f64>, corrs: &[PointCorrespondence], tau: &InlierThreshold) -> Vec<bool> {
    let Some(h_inv) = h.try_inverse() else {
        return vec![false; corrs.len()];
    };
    corrs
        .iter()
        .map(|c| symmetric_transfer_error(h, &h_inv, c) < tau.at(c.frame_offset))
        .collect()
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w = inlier_ratio.powi(SAMPLE_SIZE as i32);
    if w >= 1.0 {
        return 1;
    }
    if w <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Samples with a collinear triple (after normalization) in either image are discarded.
fn sample_is_degenerate(sample: &[PointCorrespondence]) -> bool {
    let check = |pts: Vec<crate::model::Point2>| match hartley_transform(pts.iter().copied()) {
        Some(t) => {
            let n: Vec<_> = pts.iter().map(|&p| apply_matrix(&t, p)).collect();
            has_collinear_triple(&n)
        }
        None => true,
    };
    check(sample.iter().map(|c| c.u).collect()) || check(sample.iter().map(|c| c.v).collect())
}

/// RANSAC that samples four point correspondences per hypothesis ("independent matching").
pub fn ransac_im(
    corrs: &[PointCorrespondence],
    tau: &InlierThreshold,
    params: &RansacParams,
) -> Result<Homography, HomographyError> {
    if corrs.len() < SAMPLE_SIZE {
        return Err(HomographyError::InsufficientCorrespondences(corrs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Matrix3<f64>, Vec<bool>)> = None;
    let mut needed = params.max_iterations;
    let (mut iters, mut attempts) = (0usize, 0usize);
    let mut buf = Vec::with_capacity(SAMPLE_SIZE);
    while iters < needed && attempts < 10 * params.max_iterations.max(1) {
        attempts += 1;
        buf.clear();
        buf.extend(sample(&mut rng, corrs.len(), SAMPLE_SIZE).iter().map(|i| corrs[i]));
        if sample_is_degenerate(&buf) {
            continue;
        }
        let Ok(hyp) = fit_homography_dlt(&buf) else {
            continue;
        };
        iters += 1;
        let flags = inlier_flags(&hyp.h, corrs, tau);
        let count = flags.iter().filter(|&&f| f).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            needed = adaptive_iterations(
                count as f64 / corrs.len() as f64,
                params.confidence,
                params.max_iterations,
            );
            best = Some((count, hyp.h, flags));
        }
    }
    let needed_inliers = params.min_point_inliers();
    let Some((count, h, flags)) = best else {
        return Err(HomographyError::NoConsensus {
            needed: needed_inliers,
            best: 0,
        });
    };
    if count < needed_inliers {
        return Err(HomographyError::NoConsensus {
            needed: needed_inliers,
            best: count,
        });
    }
    let inliers: Vec<PointCorrespondence> = corrs
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|(c, _)| *c)
        .collect();
    let h = fit_homography_dlt(&inliers).map(|f| f.h).unwrap_or(h);
    let final_count = inlier_flags(&h, corrs, tau).iter().filter(|&&f| f).count();
    Ok(Homography::from_matrix(h).with_inlier_fraction(final_count as f64 / corrs.len() as f64))
}

fn match_inliers(
    h: &Matrix3<f64>,
    per_match: &[Vec<PointCorrespondence>],
    tau: &InlierThreshold,
) -> Vec<bool> {
    per_match
        .iter()
        .map(|corrs| {
            let k = inlier_flags(h, corrs, tau).iter().filter(|&&f| f).count();
            2 * k >= corrs.len()
        })
        .collect()
}

/// RANSAC that samples four trajectory matches per hypothesis ("temporal matching").
///
/// A hypothesis is the least-squares DLT over all point correspondences of the sampled
/// matches. A match is an inlier when at least half of its correspondences are. With
/// `fg`, the final refit appends the corner correspondences weighted so the two groups
/// carry equal total weight; without any trajectory consensus it falls back to the
/// corners alone and sets [`Homography::fg_fallback`].
pub fn ransac_tm(
    matches: &[TrajectoryMatch],
    fg: Option<&FgMatches>,
    tau: &InlierThreshold,
    params: &RansacParams,
) -> Result<Homography, HomographyError> {
    let fallback = |err: HomographyError| match fg {
        Some(fg) => fit_homography_dlt(&fg.corrs).map(|h| Homography {
            fg_fallback: true,
            ..h.with_inlier_fraction(0.0)
        }),
        None => Err(err),
    };
    if matches.len() < SAMPLE_SIZE {
        return fallback(HomographyError::InsufficientMatches(matches.len()));
    }
    let per_match: Vec<Vec<PointCorrespondence>> =
        matches.iter().map(TrajectoryMatch::correspondences).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut needed = params.max_iterations;
    let (mut iters, mut attempts) = (0usize, 0usize);
    let mut buf = Vec::with_capacity(SAMPLE_SIZE * TRAJ_LEN);
    while iters < needed && attempts < 10 * params.max_iterations.max(1) {
        attempts += 1;
        buf.clear();
        for i in sample(&mut rng, matches.len(), SAMPLE_SIZE).iter() {
            buf.extend_from_slice(&per_match[i]);
        }
        let Ok(hyp) = fit_homography_dlt(&buf) else {
            continue;
        };
        iters += 1;
        let count = match_inliers(&hyp.h, &per_match, tau)
            .iter()
            .filter(|&&f| f)
            .count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            needed = adaptive_iterations(
                count as f64 / matches.len() as f64,
                params.confidence,
                params.max_iterations,
            );
            best = Some((count, hyp.h));
        }
    }
    let best_count = best.as_ref().map_or(0, |b| b.0);
    if best_count < params.min_inlier_matches.max(SAMPLE_SIZE) {
        return fallback(HomographyError::NoConsensus {
            needed: params.min_inlier_matches.max(SAMPLE_SIZE),
            best: best_count,
        });
    }
    let (_, h_best) = best.expect("best hypothesis exists when count > 0");
    let flags = match_inliers(&h_best, &per_match, tau);
    let mut refit: Vec<PointCorrespondence> = per_match
        .iter()
        .zip(&flags)
        .filter(|(_, &f)| f)
        .flat_map(|(c, _)| c.iter().copied())
        .collect();
    if let Some(fg) = fg {
        let w_fg = refit.len() as f64 / fg.corrs.len().max(1) as f64;
        refit.extend(fg.corrs.iter().map(|c| PointCorrespondence {
            weight: w_fg,
            ..*c
        }));
    }
    let h = fit_homography_dlt(&refit).map(|f| f.h).unwrap_or(h_best);
    let final_inliers = match_inliers(&h, &per_match, tau).iter().filter(|&&f| f).count();
    Ok(Homography::from_matrix(h).with_inlier_fraction(final_inliers as f64 / matches.len() as f64))
}

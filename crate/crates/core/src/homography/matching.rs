use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PointCorrespondence;
use crate::descriptors::{compute_modified_ts, TsDescriptor};
use crate::model::{FrameSequence, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMatch {
    /// Track in the first (source) sequence.
    pub traj_a: Trajectory,
    /// Nearest track in the second (target) sequence with the same relative start.
    pub traj_b: Trajectory,
    /// Sequence-relative start frame shared by both tracks.
    pub frame_offset: usize,
    pub descriptor_distance: f64,
}

impl TrajectoryMatch {
    /// One correspondence per frame of the two tracks.
    pub fn correspondences(&self) -> Vec<PointCorrespondence> {
        self.traj_a
            .points
            .iter()
            .zip(&self.traj_b.points)
            .enumerate()
            .map(|(k, (&v, &u))| PointCorrespondence::new(u, v, self.frame_offset + k))
            .collect()
    }
}

fn describe(seq: &FrameSequence) -> BTreeMap<usize, Vec<(&Trajectory, TsDescriptor)>> {
    let mut by_start: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for tr in &seq.trajectories {
        let Some(mask) = seq.mask_at(tr.start_frame) else {
            continue;
        };
        // static tracks have no shape descriptor and cannot be matched
        if let Ok(d) = compute_modified_ts(tr, mask) {
            by_start
                .entry(tr.start_frame - seq.start_frame)
                .or_default()
                .push((tr, d));
        }
    }
    by_start
}

/// Matches every trajectory of `seq_a` to its Euclidean nearest neighbour (in modified TS
/// descriptor space) among the trajectories of `seq_b` that start in the same
/// sequence-relative frame.
pub fn match_trajectories(seq_a: &FrameSequence, seq_b: &FrameSequence) -> Vec<TrajectoryMatch> {
    let a = describe(seq_a);
    let b = describe(seq_b);
    let mut out = Vec::new();
    for (offset, tracks_a) in &a {
        let Some(tracks_b) = b.get(offset) else {
            continue;
        };
        let cand: Vec<Vec<f64>> = tracks_b.iter().map(|(_, d)| d.to_vec()).collect();
        for (ta, da) in tracks_a {
            let va = da.to_vec();
            let mut best = (0usize, f64::INFINITY);
            for (k, vb) in cand.iter().enumerate() {
                let d: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            out.push(TrajectoryMatch {
                traj_a: (*ta).clone(),
                traj_b: tracks_b[best.0].0.clone(),
                frame_offset: *offset,
                descriptor_distance: best.1.sqrt(),
            });
        }
    }
    out
}

//! Converter stub for externally annotated footage.
//!
//! The released animal annotations list, per shot and frame, 19 landmarks in a fixed order
//! with a visibility flag. Export them as CSV rows
//!
//! ```text
//! shot,frame,landmark,x,y,visible
//! tiger_017,0,1,312.5,140.0,1
//! ```
//!
//! with a 1-based `landmark` index in the released order and 0-based `frame`, and
//! [`convert_rows`] produces landmark records in the corpus format (0-based ids, one record
//! per shot and frame). The id order matches [`crate::synth::LANDMARK_NAMES`]. Masks, edges,
//! flows and trajectories must come from separate tools; no footage is bundled.

use std::collections::BTreeMap;

use cmpalign_core::NUM_LANDMARKS;
use serde::Deserialize;

use crate::formats::LandmarkRecord;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AnnotationRow {
    pub shot: String,
    pub frame: usize,
    /// 1-based index in the released landmark order.
    pub landmark: u8,
    pub x: f64,
    pub y: f64,
    pub visible: u8,
}

/// Groups rows into per-frame landmark records, ordered by shot then frame.
pub fn convert_rows(rows: &[AnnotationRow]) -> Result<Vec<LandmarkRecord>, String> {
    let mut by_frame: BTreeMap<(String, usize), LandmarkRecord> = BTreeMap::new();
    for (k, r) in rows.iter().enumerate() {
        if r.landmark == 0 || r.landmark > NUM_LANDMARKS {
            return Err(format!("row {}: landmark {} outside 1..={NUM_LANDMARKS}", k + 1, r.landmark));
        }
        let id = r.landmark - 1;
        let rec = by_frame
            .entry((r.shot.clone(), r.frame))
            .or_insert_with(|| LandmarkRecord {
                shot: r.shot.clone(),
                frame: r.frame,
                points: BTreeMap::new(),
                visible: Default::default(),
            });
        if rec.points.insert(id, [r.x, r.y]).is_some() {
            return Err(format!("row {}: duplicate landmark {} in {} frame {}", k + 1, r.landmark, r.shot, r.frame));
        }
        if r.visible != 0 {
            rec.visible.insert(id);
        }
    }
    Ok(by_frame.into_values().collect())
}

/// Reads annotation rows from CSV with a header line.
pub fn read_annotation_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<AnnotationRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

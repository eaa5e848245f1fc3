//! Precision-recall report: one CSV row per operating point plus a JSON summary.

use std::io::{Read, Write};

use cmpalign_core::evaluation::{average_precision, precision_recall, EvalConfig, PrCurve, PrPoint, ScoredAlignment};
use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::pipeline::EvaluationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub methods: Vec<Method>,
    pub n_cmps: usize,
    pub n_failed: usize,
    pub n_evaluated: usize,
    pub n_correct: usize,
    pub n_alignable: usize,
    pub mean_error: Option<f64>,
    pub average_precision: f64,
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub curve: PrCurve,
    pub summary: Summary,
}

pub fn scored(records: &[EvaluationRecord]) -> Vec<ScoredAlignment> {
    records
        .iter()
        .map(|r| ScoredAlignment {
            outlier_fraction: if r.failure.is_none() { r.outlier_fraction } else { None },
            error: r.error.clone(),
            alignable: r.alignable.unwrap_or(false),
        })
        .collect()
}

pub fn emit_report(records: &[EvaluationRecord], operating_points: &[f64], cfg: &EvalConfig) -> Report {
    let mut ops = operating_points.to_vec();
    ops.sort_by(f64::total_cmp);
    ops.dedup();
    let curve = precision_recall(&scored(records), &ops, cfg);
    let errors: Vec<f64> = records.iter().filter_map(|r| r.error.as_ref().map(|e| e.mean_error)).collect();
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let summary = Summary {
        methods,
        n_cmps: records.len(),
        n_failed: records.iter().filter(|r| r.failure.is_some()).count(),
        n_evaluated: errors.len(),
        n_correct: records.iter().filter(|r| r.correct).count(),
        n_alignable: records.iter().filter(|r| r.alignable == Some(true)).count(),
        mean_error: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
        average_precision: average_precision(&curve.points),
        recall_undefined: curve.recall_undefined,
    };
    Report { curve, summary }
}

pub fn write_pr_csv<W: Write>(w: W, points: &[PrPoint]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pr_csv<R: Read>(r: R) -> csv::Result<Vec<PrPoint>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_round_trip() {
        let pts = vec![
            PrPoint {
                operating_point: 0.1,
                precision: 2.0 / 3.0,
                recall: 0.1 + 0.2,
                n_returned: 3,
                n_correct: 2,
                n_alignable: 7,
            },
            PrPoint {
                operating_point: 1.0,
                precision: 0.0,
                recall: 0.0,
                n_returned: 0,
                n_correct: 0,
                n_alignable: 7,
            },
        ];
        let mut buf = Vec::new();
        write_pr_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("operating_point,precision,recall,n_returned,n_correct,n_alignable\n"));
        assert_eq!(read_pr_csv(buf.as_slice()).unwrap(), pts);
    }
}

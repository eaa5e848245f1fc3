//! Batch orchestration: mine CMPs within clusters, align each with the configured method,
//! and evaluate against landmarks when the corpus has them.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};

use cmpalign_core::descriptors::{
    build_codebook_from_vectors, compute_modified_ts, extract_cmps, frame_bow, Cmp, IntervalBows, TsDescriptor,
};
use cmpalign_core::evaluation::{alignable_oracle, alignment_error, is_correct, AlignmentError, FrameMapping};
use cmpalign_core::homography::{
    fit_fg_only, match_trajectories, ransac_im, ransac_tm, FgMatches, Homography, InlierThreshold,
    PointCorrespondence, TrajectoryMatch,
};
use cmpalign_core::ttps::{fit_ttps, TtpsMapping};
use cmpalign_core::{FrameSequence, Interval, LandmarkSet};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Method, PipelineConfig};
use crate::corpus::{Corpus, Shot};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no trajectory in the corpus has a shape descriptor")]
    NoDescriptors,
    #[error("codebook: {0}")]
    Codebook(String),
    #[error("mining intervals {0} and {1}: {2}")]
    Mining(usize, usize, String),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// A mined CMP with its position in the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmpRecord {
    pub index: usize,
    pub cluster: u32,
    pub cmp: Cmp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignmentModel {
    Homography {
        forward: Homography,
        reverse: Homography,
    },
    Ttps {
        forward: TtpsMapping,
        reverse: TtpsMapping,
        init_forward: Homography,
        init_reverse: Homography,
    },
}

impl AlignmentModel {
    fn error(&self, lm_a: &[LandmarkSet], lm_b: &[LandmarkSet]) -> Result<AlignmentError, String> {
        let r = match self {
            AlignmentModel::Homography { forward, reverse } => alignment_error(forward, reverse, lm_a, lm_b),
            AlignmentModel::Ttps { forward, reverse, .. } => alignment_error(forward, reverse, lm_a, lm_b),
        };
        r.map_err(|e| e.to_string())
    }

    /// Forward mapping of sequence A into sequence B.
    pub fn forward(&self) -> &dyn FrameMapping {
        match self {
            AlignmentModel::Homography { forward, .. } => forward,
            AlignmentModel::Ttps { forward, .. } => forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub cmp_index: usize,
    pub cmp: Cmp,
    pub method: Method,
    pub model: Option<AlignmentModel>,
    /// Outlier fraction of the homography fit (the initialization, for TTPS).
    pub outlier_fraction: Option<f64>,
    pub fg_fallback: bool,
    /// TTPS energy of the forward fit.
    pub energy: Option<f64>,
    pub failure: Option<String>,
}

/// One line of the record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub cmp_index: usize,
    pub shot_a: String,
    pub start_a: usize,
    pub shot_b: String,
    pub start_b: usize,
    pub length: usize,
    pub score: f64,
    pub rank: usize,
    pub method: Method,
    pub outlier_fraction: Option<f64>,
    pub fg_fallback: bool,
    pub energy: Option<f64>,
    pub failure: Option<String>,
    pub error: Option<AlignmentError>,
    pub correct: bool,
    /// Mean error of the TTPS initialization.
    pub init_error: Option<f64>,
    /// Whether the ground-truth homography passes the correctness rule; `None` without landmarks.
    pub alignable: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub intervals: Vec<Interval>,
    pub cmps: Vec<CmpRecord>,
    pub alignments: Vec<AlignmentRecord>,
    pub records: Vec<EvaluationRecord>,
}

fn descriptors_by_frame(shot: &Shot) -> BTreeMap<usize, Vec<TsDescriptor>> {
    let mut out: BTreeMap<usize, Vec<TsDescriptor>> = BTreeMap::new();
    for tr in &shot.trajectories {
        // static tracks have no descriptor
        if let Ok(d) = compute_modified_ts(tr, &shot.masks[tr.start_frame]) {
            out.entry(tr.start_frame).or_default().push(d);
        }
    }
    out
}

fn distinct(data: &[Vec<f64>]) -> usize {
    data.iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Mines CMPs between intervals of different shots that share a cluster. Pairs with an
/// interval shorter than `t_len` are skipped.
pub fn mine_cmps(corpus: &Corpus, cfg: &PipelineConfig) -> Result<(Vec<Interval>, Vec<CmpRecord>), PipelineError> {
    let intervals = corpus.effective_intervals(cfg.interval_length, cfg.interval_stride);
    let descs: BTreeMap<&str, BTreeMap<usize, Vec<TsDescriptor>>> = corpus
        .shots
        .iter()
        .map(|s| (s.id.as_str(), descriptors_by_frame(s)))
        .collect();

    let mut data: Vec<Vec<f64>> = descs
        .values()
        .flat_map(|by_frame| by_frame.values().flatten().map(TsDescriptor::to_vec))
        .collect();
    if data.is_empty() {
        return Err(PipelineError::NoDescriptors);
    }
    if data.len() > cfg.codebook_sample {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut keep = sample(&mut rng, data.len(), cfg.codebook_sample).into_vec();
        keep.sort_unstable();
        data = keep.into_iter().map(|i| std::mem::take(&mut data[i])).collect();
    }
    let k = cfg.codebook_k.min(distinct(&data));
    let codebook =
        build_codebook_from_vectors(&data, k, cfg.seed).map_err(|e| PipelineError::Codebook(e.to_string()))?;

    let empty = BTreeMap::new();
    let bows: Vec<IntervalBows> = intervals
        .iter()
        .enumerate()
        .map(|(idx, iv)| {
            let by_frame = descs.get(iv.shot_id.as_str()).unwrap_or(&empty);
            IntervalBows {
                shot_id: iv.shot_id.clone(),
                interval: idx,
                start_frame: iv.start_frame,
                bows: (iv.start_frame..iv.end_frame())
                    .map(|f| frame_bow(by_frame.get(&f).map_or(&[][..], Vec::as_slice), &codebook, f))
                    .collect(),
            }
        })
        .collect();

    let mut seen = BTreeSet::new();
    let mut cmps = Vec::new();
    for (cluster, members) in corpus.effective_clusters(intervals.len()) {
        for (x, &p) in members.iter().enumerate() {
            for &q in &members[x + 1..] {
                let (p, q) = (p.min(q), p.max(q));
                if intervals[p].shot_id == intervals[q].shot_id
                    || intervals[p].length < cfg.t_len
                    || intervals[q].length < cfg.t_len
                    || !seen.insert((p, q))
                {
                    continue;
                }
                let mined = extract_cmps(&bows[p], &bows[q], cfg.t_len, cfg.top_k_cmps)
                    .map_err(|e| PipelineError::Mining(p, q, e.to_string()))?;
                for cmp in mined {
                    cmps.push(CmpRecord {
                        index: cmps.len(),
                        cluster,
                        cmp,
                    });
                }
            }
        }
    }
    Ok((intervals, cmps))
}

struct Pair {
    seq_a: FrameSequence,
    seq_b: FrameSequence,
}

fn resolve(corpus: &Corpus, cmp: &Cmp) -> Result<Pair, String> {
    let get = |id: &str| corpus.shot(id).ok_or_else(|| format!("unknown shot {id}"));
    let shot_a = get(&cmp.seq_a.shot_id)?;
    let shot_b = get(&cmp.seq_b.shot_id)?;
    let window = |shot: &Shot, r: &cmpalign_core::descriptors::SequenceRef| {
        shot.sequence(r.start_frame, r.length).ok_or_else(|| {
            format!(
                "frames {}..{} outside shot {} ({} frames)",
                r.start_frame,
                r.start_frame + r.length,
                shot.id,
                shot.frame_count()
            )
        })
    };
    Ok(Pair {
        seq_a: window(shot_a, &cmp.seq_a)?,
        seq_b: window(shot_b, &cmp.seq_b)?,
    })
}

fn homography_fit(method: Method, pair: &Pair, cfg: &PipelineConfig) -> Result<Homography, String> {
    let (ma, mb) = (&pair.seq_a.masks, &pair.seq_b.masks);
    let params = cfg.ransac_params();
    let tau = || InlierThreshold::from_masks(ma, mb, params.tau_scale);
    let matches = || match_trajectories(&pair.seq_a, &pair.seq_b);
    let fg = || FgMatches::from_masks(ma, mb).map_err(|e| e.to_string());
    let r = match method {
        Method::Fg => fit_fg_only(ma, mb),
        Method::Im => {
            let corrs: Vec<PointCorrespondence> =
                matches().iter().flat_map(TrajectoryMatch::correspondences).collect();
            ransac_im(&corrs, &tau(), &params)
        }
        Method::Tm => ransac_tm(&matches(), None, &tau(), &params),
        Method::TmFg | Method::TtpsFg => ransac_tm(&matches(), Some(&fg()?), &tau(), &params),
    };
    r.map_err(|e| e.to_string())
}

fn invert(h: &Homography) -> Result<Homography, String> {
    h.inverse().ok_or_else(|| "homography is singular".to_string())
}

fn align_pair(pair: &Pair, method: Method, cfg: &PipelineConfig) -> Result<(AlignmentModel, f64, bool, Option<f64>), String> {
    let h = homography_fit(method, pair, cfg)?;
    let h_inv = invert(&h)?;
    let (of, fb) = (h.outlier_fraction, h.fg_fallback);
    if method != Method::TtpsFg {
        return Ok((AlignmentModel::Homography { forward: h, reverse: h_inv }, of, fb, None));
    }
    let params = cfg.ttps_params();
    let forward = fit_ttps(&pair.seq_a, &pair.seq_b, &h, &params).map_err(|e| format!("TTPS forward: {e}"))?;
    let reverse = fit_ttps(&pair.seq_b, &pair.seq_a, &h_inv, &params).map_err(|e| format!("TTPS reverse: {e}"))?;
    let energy = forward.energy;
    Ok((
        AlignmentModel::Ttps {
            forward,
            reverse,
            init_forward: h,
            init_reverse: h_inv,
        },
        of,
        fb,
        Some(energy),
    ))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Aligns one CMP. Failures, including panics, are captured in the record.
pub fn align_cmp(corpus: &Corpus, rec: &CmpRecord, cfg: &PipelineConfig) -> AlignmentRecord {
    let method = cfg.method;
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        let pair = resolve(corpus, &rec.cmp)?;
        align_pair(&pair, method, cfg)
    }))
    .unwrap_or_else(|p| Err(format!("internal error: {}", panic_message(p))));
    let base = AlignmentRecord {
        cmp_index: rec.index,
        cmp: rec.cmp.clone(),
        method,
        model: None,
        outlier_fraction: None,
        fg_fallback: false,
        energy: None,
        failure: None,
    };
    match outcome {
        Ok((model, of, fb, energy)) => AlignmentRecord {
            model: Some(model),
            outlier_fraction: Some(of),
            fg_fallback: fb,
            energy,
            ..base
        },
        Err(msg) => AlignmentRecord {
            failure: Some(msg),
            ..base
        },
    }
}

/// Scores one alignment against the corpus landmarks.
pub fn evaluate_alignment(corpus: &Corpus, a: &AlignmentRecord, cfg: &PipelineConfig) -> EvaluationRecord {
    let mut rec = EvaluationRecord {
        cmp_index: a.cmp_index,
        shot_a: a.cmp.seq_a.shot_id.clone(),
        start_a: a.cmp.seq_a.start_frame,
        shot_b: a.cmp.seq_b.shot_id.clone(),
        start_b: a.cmp.seq_b.start_frame,
        length: a.cmp.seq_a.length,
        score: a.cmp.score,
        rank: a.cmp.rank,
        method: a.method,
        outlier_fraction: a.outlier_fraction,
        fg_fallback: a.fg_fallback,
        energy: a.energy,
        failure: a.failure.clone(),
        error: None,
        correct: false,
        init_error: None,
        alignable: None,
        note: None,
    };
    let lms = corpus.shot(&rec.shot_a).zip(corpus.shot(&rec.shot_b)).and_then(|(sa, sb)| {
        Some((
            sa.landmark_window(a.cmp.seq_a.start_frame, a.cmp.seq_a.length)?,
            sb.landmark_window(a.cmp.seq_b.start_frame, a.cmp.seq_b.length)?,
        ))
    });
    let Some((lm_a, lm_b)) = lms else {
        rec.note = Some("no landmarks".into());
        return rec;
    };
    let oracle = alignable_oracle(lm_a, lm_b, &cfg.eval);
    rec.alignable = Some(oracle.alignable);
    let mut notes = Vec::new();
    if let Some(flag) = oracle.flag {
        notes.push(format!("oracle: {flag}"));
    }
    if let Some(model) = &a.model {
        match model.error(lm_a, lm_b) {
            Ok(err) => {
                rec.correct = is_correct(&err, &cfg.eval);
                rec.error = Some(err);
            }
            Err(e) => notes.push(format!("error: {e}")),
        }
        if let AlignmentModel::Ttps {
            init_forward,
            init_reverse,
            ..
        } = model
        {
            rec.init_error = alignment_error(init_forward, init_reverse, lm_a, lm_b)
                .ok()
                .map(|e| e.mean_error);
        }
    }
    if !notes.is_empty() {
        rec.note = Some(notes.join("; "));
    }
    rec
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Aligns every CMP on a pool of `cfg.workers` threads; output order follows the input.
pub fn align_all(corpus: &Corpus, cmps: &[CmpRecord], cfg: &PipelineConfig) -> Result<Vec<AlignmentRecord>, PipelineError> {
    Ok(pool(cfg.workers)?.install(|| cmps.par_iter().map(|c| align_cmp(corpus, c, cfg)).collect()))
}

pub fn evaluate_all(
    corpus: &Corpus,
    alignments: &[AlignmentRecord],
    cfg: &PipelineConfig,
) -> Result<Vec<EvaluationRecord>, PipelineError> {
    Ok(pool(cfg.workers)?.install(|| alignments.par_iter().map(|a| evaluate_alignment(corpus, a, cfg)).collect()))
}

pub fn run_pipeline(cfg: &PipelineConfig, corpus: &Corpus) -> Result<RunOutput, PipelineError> {
    let (intervals, cmps) = mine_cmps(corpus, cfg)?;
    let alignments = align_all(corpus, &cmps, cfg)?;
    let records = evaluate_all(corpus, &alignments, cfg)?;
    Ok(RunOutput {
        intervals,
        cmps,
        alignments,
        records,
    })
}

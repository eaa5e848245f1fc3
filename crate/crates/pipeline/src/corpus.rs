//! Loading and saving corpora: a manifest plus per-shot feature files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cmpalign_core::{
    EdgeMap, FlowField, ForegroundMask, FrameSequence, Grid, Interval, LandmarkSet, Point2, Trajectory,
    NUM_LANDMARKS,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::formats::{
    decode_edges, decode_flows, decode_masks, encode_edges, encode_flows, encode_masks, CorpusManifest,
    FormatError, LandmarkRecord, RasterHeader, ShotEntry, TrajectoryRecord,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },
    #[error("{location}: {message}")]
    Schema { location: String, message: String },
    #[error("shot {shot}: {what} has {got} frames, expected {expected}")]
    FrameCount {
        shot: String,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CorpusError::MissingFile { .. } => "missing_file",
            CorpusError::Schema { .. } => "schema",
            CorpusError::FrameCount { .. } => "frame_count",
            CorpusError::Io { .. } => "io",
        }
    }

    fn schema(location: impl Into<String>, message: impl ToString) -> Self {
        CorpusError::Schema {
            location: location.into(),
            message: message.to_string(),
        }
    }
}

/// One shot with all of its features in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub masks: Vec<ForegroundMask>,
    pub edges: Vec<EdgeMap>,
    /// `flows[t]` maps frame `t` to `t + 1`.
    pub flows: Vec<FlowField>,
    /// `backward_flows[t]` maps frame `t + 1` to `t`.
    pub backward_flows: Option<Vec<FlowField>>,
    pub trajectories: Vec<Trajectory>,
    /// One entry per frame; frames without annotations have nothing visible.
    pub landmarks: Option<Vec<LandmarkSet>>,
}

impl Shot {
    pub fn frame_count(&self) -> usize {
        self.masks.len()
    }

    /// The `length`-frame window starting at `start`, or `None` when it does not fit.
    pub fn sequence(&self, start: usize, length: usize) -> Option<FrameSequence> {
        let end = start.checked_add(length)?;
        if length == 0 || end > self.frame_count() {
            return None;
        }
        let trajectories = self
            .trajectories
            .iter()
            .filter(|t| (start..end).contains(&t.start_frame))
            .cloned()
            .collect();
        Some(FrameSequence {
            shot_id: self.id.clone(),
            start_frame: start,
            length,
            trajectories,
            masks: self.masks[start..end].to_vec(),
            edge_maps: self.edges[start..end].to_vec(),
            flows: self.flows[start..end - 1].to_vec(),
            backward_flows: self.backward_flows.as_ref().map(|b| b[start..end - 1].to_vec()),
        })
    }

    pub fn landmark_window(&self, start: usize, length: usize) -> Option<&[LandmarkSet]> {
        self.landmarks.as_ref()?.get(start..start.checked_add(length)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub shots: Vec<Shot>,
    pub intervals: Vec<Interval>,
    /// Cluster id to indices into `intervals`; empty means a single cluster.
    pub clusters: BTreeMap<u32, Vec<usize>>,
}

impl Corpus {
    pub fn shot(&self, id: &str) -> Option<&Shot> {
        self.shots.iter().find(|s| s.id == id)
    }

    /// The declared intervals, or fixed-stride windows over every shot when none are.
    pub fn effective_intervals(&self, length: usize, stride: usize) -> Vec<Interval> {
        if !self.intervals.is_empty() {
            return self.intervals.clone();
        }
        let stride = stride.max(1);
        let mut out = Vec::new();
        for shot in &self.shots {
            let n = shot.frame_count();
            let len = length.min(n).min(Interval::MAX_LEN);
            if len < Interval::MIN_LEN {
                continue;
            }
            let mut start = 0;
            loop {
                out.push(Interval {
                    shot_id: shot.id.clone(),
                    start_frame: start,
                    length: len,
                    cluster_id: 0,
                });
                if start + len >= n {
                    break;
                }
                // the last window is pulled back to end at the final frame
                start = (start + stride).min(n - len);
            }
        }
        out
    }

    /// Groups of interval indices to mine within, ordered by cluster id.
    pub fn effective_clusters(&self, n_intervals: usize) -> Vec<(u32, Vec<usize>)> {
        if self.clusters.is_empty() {
            vec![(0, (0..n_intervals).collect())]
        } else {
            self.clusters.iter().map(|(k, v)| (*k, v.clone())).collect()
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CorpusError> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::MissingFile { path: path.to_owned() }
        } else {
            CorpusError::Io {
                path: path.to_owned(),
                source,
            }
        }
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let bytes = read_bytes(path)?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CorpusError::schema(format!("{}:{}", path.display(), k + 1), e))?;
        out.push((k + 1, rec));
    }
    Ok(out)
}

fn check_raster(
    entry: &ShotEntry,
    path: &Path,
    what: &'static str,
    header: &RasterHeader,
    expected_frames: usize,
) -> Result<(), CorpusError> {
    if (header.width, header.height) != (entry.width, entry.height) {
        return Err(CorpusError::schema(
            path.display().to_string(),
            format!(
                "raster is {}x{}, shot {} is {}x{}",
                header.width, header.height, entry.id, entry.width, entry.height
            ),
        ));
    }
    if header.frames != expected_frames {
        return Err(CorpusError::FrameCount {
            shot: entry.id.clone(),
            what,
            got: header.frames,
            expected: expected_frames,
        });
    }
    Ok(())
}

fn raster_err(path: &Path) -> impl Fn(FormatError) -> CorpusError + '_ {
    move |e| CorpusError::schema(path.display().to_string(), e)
}

fn load_flows(entry: &ShotEntry, path: &Path, what: &'static str) -> Result<Vec<FlowField>, CorpusError> {
    let (h, grids) = decode_flows(&read_bytes(path)?).map_err(raster_err(path))?;
    check_raster(entry, path, what, &h, entry.frame_count.saturating_sub(1))?;
    grids
        .into_iter()
        .enumerate()
        .map(|(t, g)| {
            FlowField::new(g)
                .map_err(|e| CorpusError::schema(format!("{} frame {t}", path.display()), e))
        })
        .collect()
}

fn load_shot(base: &Path, entry: &ShotEntry) -> Result<Shot, CorpusError> {
    let n = entry.frame_count;
    let loc = |what: &str| format!("shot {}: {what}", entry.id);
    if n == 0 {
        return Err(CorpusError::schema(loc("frame_count"), "must be positive"));
    }

    let path = base.join(&entry.masks);
    let (h, grids) = decode_masks(&read_bytes(&path)?).map_err(raster_err(&path))?;
    check_raster(entry, &path, "masks", &h, n)?;
    let masks = grids
        .into_iter()
        .enumerate()
        .map(|(t, g)| {
            ForegroundMask::new(t, g)
                .map_err(|e| CorpusError::schema(format!("{} frame {t}", path.display()), e))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let path = base.join(&entry.edges);
    let (h, grids) = decode_edges(&read_bytes(&path)?).map_err(raster_err(&path))?;
    check_raster(entry, &path, "edges", &h, n)?;
    let edges = grids
        .into_iter()
        .enumerate()
        .map(|(t, g)| {
            EdgeMap::new(g).map_err(|e| CorpusError::schema(format!("{} frame {t}", path.display()), e))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let flows = load_flows(entry, &base.join(&entry.flows), "flows")?;
    let backward_flows = match &entry.backward_flows {
        Some(p) => Some(load_flows(entry, &base.join(p), "backward flows")?),
        None => None,
    };

    let path = base.join(&entry.trajectories);
    let mut trajectories = Vec::new();
    for (line, rec) in read_jsonl::<TrajectoryRecord>(&path)? {
        let at = || format!("{}:{line}", path.display());
        if rec.shot != entry.id {
            return Err(CorpusError::schema(
                at(),
                format!("trajectory {} names shot {}, file belongs to {}", rec.id, rec.shot, entry.id),
            ));
        }
        let points = rec.points.iter().map(|p| Point2::new(p[0], p[1])).collect();
        let tr = Trajectory::new(rec.id, rec.start_frame, points)
            .map_err(|e| CorpusError::schema(at(), format!("trajectory {}: {e}", rec.id)))?;
        if tr.end_frame() >= n {
            return Err(CorpusError::schema(
                at(),
                format!(
                    "trajectory {} spans frames {}..={}, beyond shot length {n}",
                    rec.id,
                    tr.start_frame,
                    tr.end_frame()
                ),
            ));
        }
        trajectories.push(tr);
    }

    let landmarks = match &entry.landmarks {
        None => None,
        Some(p) => {
            let path = base.join(p);
            let mut frames: Vec<Option<LandmarkSet>> = vec![None; n];
            for (line, rec) in read_jsonl::<LandmarkRecord>(&path)? {
                let at = format!("{}:{line}", path.display());
                if rec.shot != entry.id {
                    return Err(CorpusError::schema(at, format!("record names shot {}", rec.shot)));
                }
                if rec.frame >= n {
                    return Err(CorpusError::schema(
                        at,
                        format!("frame {} beyond shot length {n}", rec.frame),
                    ));
                }
                if let Some(id) = rec.points.keys().chain(&rec.visible).find(|&&id| id >= NUM_LANDMARKS) {
                    return Err(CorpusError::schema(
                        at,
                        format!("landmark id {id} out of range 0..{NUM_LANDMARKS}"),
                    ));
                }
                if frames[rec.frame].is_some() {
                    return Err(CorpusError::schema(at, format!("duplicate frame {}", rec.frame)));
                }
                let points: BTreeMap<u8, Point2> =
                    rec.points.iter().map(|(&k, p)| (k, Point2::new(p[0], p[1]))).collect();
                let set = LandmarkSet::new(rec.frame, points, rec.visible)
                    .map_err(|e| CorpusError::schema(at, e))?;
                frames[rec.frame] = Some(set);
            }
            Some(
                frames
                    .into_iter()
                    .enumerate()
                    .map(|(t, f)| {
                        f.unwrap_or(LandmarkSet {
                            frame_index: t,
                            ..LandmarkSet::default()
                        })
                    })
                    .collect(),
            )
        }
    };

    Ok(Shot {
        id: entry.id.clone(),
        width: entry.width,
        height: entry.height,
        masks,
        edges,
        flows,
        backward_flows,
        trajectories,
        landmarks,
    })
}

/// Reads and validates a manifest and every file it references.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus, CorpusError> {
    let bytes = read_bytes(manifest_path)?;
    let manifest: CorpusManifest = serde_json::from_slice(&bytes).map_err(|e| {
        CorpusError::schema(
            format!("{}:{}:{}", manifest_path.display(), e.line(), e.column()),
            e,
        )
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut seen = BTreeSet::new();
    let mut shots = Vec::with_capacity(manifest.shots.len());
    for (k, entry) in manifest.shots.iter().enumerate() {
        if !seen.insert(entry.id.as_str()) {
            return Err(CorpusError::schema(format!("shots[{k}]"), format!("duplicate shot id {}", entry.id)));
        }
        shots.push(load_shot(base, entry)?);
    }

    for (k, iv) in manifest.intervals.iter().enumerate() {
        let at = format!("intervals[{k}]");
        let Some(shot) = shots.iter().find(|s| s.id == iv.shot_id) else {
            return Err(CorpusError::schema(at, format!("unknown shot {}", iv.shot_id)));
        };
        if !(Interval::MIN_LEN..=Interval::MAX_LEN).contains(&iv.length) {
            return Err(CorpusError::schema(
                at,
                format!("length {} outside {}..={}", iv.length, Interval::MIN_LEN, Interval::MAX_LEN),
            ));
        }
        if iv.end_frame() > shot.frame_count() {
            return Err(CorpusError::schema(
                at,
                format!(
                    "frames {}..{} exceed shot {} with {} frames",
                    iv.start_frame,
                    iv.end_frame(),
                    shot.id,
                    shot.frame_count()
                ),
            ));
        }
    }
    for (cid, members) in &manifest.clusters {
        if let Some(bad) = members.iter().find(|&&i| i >= manifest.intervals.len()) {
            return Err(CorpusError::schema(
                format!("clusters[{cid}]"),
                format!("interval index {bad} out of range"),
            ));
        }
    }

    Ok(Corpus {
        shots,
        intervals: manifest.intervals,
        clusters: manifest.clusters,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.to_owned(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

fn jsonl<T: Serialize>(records: impl Iterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r).expect("records serialize");
        out.write_all(b"\n").expect("write to Vec");
    }
    out
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn encoded(r: Result<Vec<u8>, FormatError>, what: &str) -> Result<Vec<u8>, CorpusError> {
    r.map_err(|e| CorpusError::schema(what.to_string(), e))
}

/// Writes `corpus` under `dir` and returns the manifest path.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    let mut entries = Vec::with_capacity(corpus.shots.len());
    for (k, shot) in corpus.shots.iter().enumerate() {
        let rel = PathBuf::from("shots").join(format!("{k:03}_{}", file_stem(&shot.id)));
        let p = |name: &str| rel.join(name);

        let masks: Vec<Grid<bool>> = shot.masks.iter().map(|m| m.grid().clone()).collect();
        write_file(&dir.join(p("masks.bin")), &encoded(encode_masks(&masks), "masks")?)?;
        let edges: Vec<Grid<f32>> = shot.edges.iter().map(|e| e.grid().clone()).collect();
        write_file(&dir.join(p("edges.bin")), &encoded(encode_edges(&edges), "edges")?)?;
        let flows: Vec<Grid<[f32; 2]>> = shot.flows.iter().map(|f| f.grid().clone()).collect();
        write_file(&dir.join(p("flows.bin")), &encoded(encode_flows(&flows), "flows")?)?;
        if let Some(back) = &shot.backward_flows {
            let back: Vec<Grid<[f32; 2]>> = back.iter().map(|f| f.grid().clone()).collect();
            write_file(&dir.join(p("backward_flows.bin")), &encoded(encode_flows(&back), "backward flows")?)?;
        }
        let trajs = shot.trajectories.iter().map(|t| TrajectoryRecord {
            shot: shot.id.clone(),
            id: t.id,
            start_frame: t.start_frame,
            points: t.points.iter().map(|p| [p.x, p.y]).collect(),
        });
        write_file(&dir.join(p("trajectories.jsonl")), &jsonl(trajs))?;
        if let Some(lms) = &shot.landmarks {
            let recs = lms
                .iter()
                .filter(|l| !l.points.is_empty() || !l.visible.is_empty())
                .map(|l| LandmarkRecord {
                    shot: shot.id.clone(),
                    frame: l.frame_index,
                    points: l.points.iter().map(|(&k, p)| (k, [p.x, p.y])).collect(),
                    visible: l.visible.clone(),
                });
            write_file(&dir.join(p("landmarks.jsonl")), &jsonl(recs))?;
        }
        entries.push(ShotEntry {
            id: shot.id.clone(),
            frame_count: shot.frame_count(),
            width: shot.width,
            height: shot.height,
            masks: p("masks.bin"),
            edges: p("edges.bin"),
            flows: p("flows.bin"),
            backward_flows: shot.backward_flows.as_ref().map(|_| p("backward_flows.bin")),
            trajectories: p("trajectories.jsonl"),
            landmarks: shot.landmarks.as_ref().map(|_| p("landmarks.jsonl")),
        });
    }
    let manifest = CorpusManifest {
        shots: entries,
        intervals: corpus.intervals.clone(),
        clusters: corpus.clusters.clone(),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    write_file(&path, &text)?;
    Ok(path)
}

//! Pipeline configuration, read from TOML. Every key is optional.
//!
//! ```toml
//! method = "TTPS+FG"
//! seed = 7
//! workers = 4
//! operating_points = [0.0, 0.25, 0.5, 0.75, 1.0]
//!
//! [ransac]
//! tau_scale = 0.05
//!
//! [tps_rpm]
//! anneal_rate = 0.8
//!
//! [edges]
//! max_points = 120
//!
//! [synthetic]
//! n_shots = 6
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cmpalign_core::descriptors::{DEFAULT_CODEBOOK_K, DEFAULT_TOP_K, DEFAULT_T_LEN};
use cmpalign_core::evaluation::EvalConfig;
use cmpalign_core::homography::RansacParams;
use cmpalign_core::tps::TpsRpmParams;
use cmpalign_core::ttps::{EdgeParams, TtpsParams};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::synth::SyntheticSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Alignment method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Bounding-box corners only.
    Fg,
    /// RANSAC over independent point correspondences.
    Im,
    /// RANSAC over whole trajectory matches.
    Tm,
    /// Trajectory RANSAC regularized by the bounding-box corners.
    TmFg,
    /// Time-varying thin plate spline initialized by `TM+FG`.
    TtpsFg,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fg, Method::Im, Method::Tm, Method::TmFg, Method::TtpsFg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fg => "FG",
            Method::Im => "IM",
            Method::Tm => "TM",
            Method::TmFg => "TM+FG",
            Method::TtpsFg => "TTPS+FG",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == up)
            .ok_or_else(|| format!("unknown method {s:?}; expected one of FG, IM, TM, TM+FG, TTPS+FG"))
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// RANSAC settings; the seed comes from [`PipelineConfig::seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacSection {
    pub confidence: f64,
    pub max_iterations: usize,
    pub tau_scale: f64,
    pub min_inlier_matches: usize,
}

impl Default for RansacSection {
    fn default() -> Self {
        let p = RansacParams::default();
        Self {
            confidence: p.confidence,
            max_iterations: p.max_iterations,
            tau_scale: p.tau_scale,
            min_inlier_matches: p.min_inlier_matches,
        }
    }
}

/// TPS-RPM settings used by TTPS. Defaults trade some precision for speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpsRpmSection {
    pub t_init_factor: f64,
    pub anneal_rate: f64,
    pub t_final_factor: f64,
    pub lambda_init: f64,
    pub lambda_affine_init: f64,
    pub sinkhorn_iters: usize,
    pub outlier_temperature: Option<f64>,
    pub iterations_per_temperature: usize,
    pub sinkhorn_tolerance: f64,
    pub max_sinkhorn_iters: usize,
}

impl Default for TpsRpmSection {
    fn default() -> Self {
        let lib = TpsRpmParams::default();
        Self {
            t_init_factor: lib.t_init_factor,
            anneal_rate: 0.5,
            t_final_factor: 0.1,
            lambda_init: 1000.0,
            lambda_affine_init: lib.lambda_affine_init,
            sinkhorn_iters: lib.sinkhorn_iters,
            outlier_temperature: lib.outlier_temperature,
            iterations_per_temperature: lib.iterations_per_temperature,
            sinkhorn_tolerance: 1e-3,
            max_sinkhorn_iters: lib.max_sinkhorn_iters,
        }
    }
}

impl From<&TpsRpmSection> for TpsRpmParams {
    fn from(s: &TpsRpmSection) -> Self {
        TpsRpmParams {
            t_init_factor: s.t_init_factor,
            anneal_rate: s.anneal_rate,
            t_final_factor: s.t_final_factor,
            lambda_init: s.lambda_init,
            lambda_affine_init: s.lambda_affine_init,
            sinkhorn_iters: s.sinkhorn_iters,
            outlier_temperature: s.outlier_temperature,
            iterations_per_temperature: s.iterations_per_temperature,
            sinkhorn_tolerance: s.sinkhorn_tolerance,
            max_sinkhorn_iters: s.max_sinkhorn_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSection {
    pub sigma_factor: f64,
    pub prune_threshold: f64,
    pub max_points: usize,
}

impl Default for EdgeSection {
    fn default() -> Self {
        let lib = EdgeParams::default();
        Self {
            sigma_factor: lib.sigma_factor,
            prune_threshold: lib.prune_threshold,
            max_points: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub t_len: usize,
    pub top_k_cmps: usize,
    /// Codebook size; clamped to the number of distinct descriptors.
    pub codebook_k: usize,
    /// At most this many descriptors, sampled under the seed, train the codebook.
    pub codebook_sample: usize,
    /// Fixed-stride interval fallback for corpora that declare no intervals.
    pub interval_length: usize,
    pub interval_stride: usize,
    pub operating_points: Vec<f64>,
    pub ransac: RansacSection,
    pub tps_rpm: TpsRpmSection,
    pub edges: EdgeSection,
    pub eval: EvalConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::TmFg,
            seed: 0,
            workers: 1,
            t_len: DEFAULT_T_LEN,
            top_k_cmps: DEFAULT_TOP_K,
            codebook_k: DEFAULT_CODEBOOK_K,
            codebook_sample: 20_000,
            interval_length: 100,
            interval_stride: 50,
            operating_points: (0..=20).map(|k| k as f64 / 20.0).collect(),
            ransac: RansacSection::default(),
            tps_rpm: TpsRpmSection::default(),
            edges: EdgeSection::default(),
            eval: EvalConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.t_len == 0 {
            return bad("t_len must be positive".into());
        }
        if self.top_k_cmps == 0 {
            return bad("top_k_cmps must be positive".into());
        }
        if self.codebook_k == 0 || self.codebook_sample == 0 {
            return bad("codebook_k and codebook_sample must be positive".into());
        }
        if self.interval_length < self.t_len || self.interval_stride == 0 {
            return bad("interval_length must be at least t_len and interval_stride positive".into());
        }
        if self.operating_points.iter().any(|o| !o.is_finite()) {
            return bad("operating points must be finite".into());
        }
        self.eval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ttps_params().edges.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ttps_params().rpm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) || !(self.ransac.tau_scale > 0.0) {
            return bad("ransac confidence must lie in (0, 1) and tau_scale be positive".into());
        }
        self.synthetic.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn ransac_params(&self) -> RansacParams {
        RansacParams {
            seed: self.seed,
            confidence: self.ransac.confidence,
            max_iterations: self.ransac.max_iterations,
            tau_scale: self.ransac.tau_scale,
            min_inlier_matches: self.ransac.min_inlier_matches,
        }
    }

    pub fn ttps_params(&self) -> TtpsParams {
        TtpsParams {
            rpm: (&self.tps_rpm).into(),
            edges: EdgeParams {
                sigma_factor: self.edges.sigma_factor,
                prune_threshold: self.edges.prune_threshold,
                max_points: self.edges.max_points,
            },
            seed: self.seed,
        }
    }
}

/// Parses a comma-separated list of operating points.
pub fn parse_operating_points(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad operating point {t:?}: {e}"))
        })
        .collect()
}

//! Pipeline configuration, read from TOML. Unknown keys are rejected and
//! relative paths are resolved against the configuration file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ThetaLongMode, DEFAULT_THETA_LONG, DEFAULT_THETA_SHORT, DEFAULT_THETA_T};
use crate::fusion::FusionConfig;
use crate::io::PEDESTRIAN_CLASS;
use crate::triplets::DEFAULT_RETRY_BUDGET;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoInput {
    pub id: u32,
    /// Used for output file names; defaults to the numeric id.
    #[serde(default)]
    pub name: Option<String>,
    /// One detection file per source.
    pub detections: Vec<PathBuf>,
    /// Embeddings used for short-term association and threshold estimation.
    pub embeddings: PathBuf,
    /// Embeddings from the fine-tuned model for tracklet merging. Falls back
    /// to `embeddings`.
    #[serde(default)]
    pub merge_embeddings: Option<PathBuf>,
    /// Directory of `<f>_<f+1>.flo` files.
    #[serde(default)]
    pub flows: Option<PathBuf>,
    /// Ground-truth labels of a training video; enables batch planning.
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
}

impl VideoInput {
    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{:04}", self.id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub theta_t: u32,
    pub fallback_theta_short: f64,
    pub fallback_theta_long: f64,
    pub theta_long_mode: ThetaLongMode,
    /// Skip estimation and use this value.
    pub theta_short: Option<f64>,
    pub theta_long: Option<f64>,
    /// Estimate one pair of thresholds from all videos together.
    pub pooled: bool,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            theta_t: DEFAULT_THETA_T,
            fallback_theta_short: DEFAULT_THETA_SHORT,
            fallback_theta_long: DEFAULT_THETA_LONG,
            theta_long_mode: ThetaLongMode::GaussianCrossing,
            theta_short: None,
            theta_long: None,
            pooled: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub intra_count: usize,
    pub inter_count: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub reuse_smaller_pool: bool,
    pub retry_budget: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            intra_count: 1000,
            inter_count: 1000,
            seed: 0,
            batch_size: 32,
            reuse_smaller_pool: false,
            retry_budget: DEFAULT_RETRY_BUDGET,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    /// Treat a missing flow file as zero motion instead of failing.
    pub identity_flow_fallback: bool,
    /// Average unit-normalized embeddings in cluster centroids.
    pub normalize_centroid: bool,
    /// Write histogram data and text charts.
    pub histograms: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            identity_flow_fallback: false,
            normalize_centroid: false,
            histograms: true,
        }
    }
}

/// Everything but the input and output paths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Settings {
    pub class_id: Option<u32>,
    pub fusion: FusionConfig,
    pub thresholds: ThresholdConfig,
    pub sampler: SamplerConfig,
    pub flags: Flags,
}

impl Settings {
    pub fn class_id(&self) -> u32 {
        self.class_id.unwrap_or(PEDESTRIAN_CLASS)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.thresholds;
        if t.theta_t < 1 {
            return Err(Error::Config("thresholds.theta_t must be at least 1".into()));
        }
        for (name, v) in [
            ("fallback_theta_short", Some(t.fallback_theta_short)),
            ("fallback_theta_long", Some(t.fallback_theta_long)),
            ("theta_short", t.theta_short),
            ("theta_long", t.theta_long),
        ] {
            if let Some(v) = v {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("thresholds.{name} = {v} outside [-1, 1]")));
                }
            }
        }
        let s = &self.sampler;
        if s.intra_count == 0 || s.inter_count == 0 {
            return Err(Error::Config("sampler counts must be at least 1".into()));
        }
        if s.batch_size == 0 || !s.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sampler.batch_size = {} must be even and positive",
                s.batch_size
            )));
        }
        if s.retry_budget == 0 {
            return Err(Error::Config("sampler.retry_budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub class_id: Option<u32>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub videos: Vec<VideoInput>,
}

impl PipelineConfig {
    pub fn new(output_dir: impl Into<PathBuf>, videos: Vec<VideoInput>, settings: Settings) -> Self {
        Self {
            output_dir: output_dir.into(),
            class_id: settings.class_id,
            fusion: settings.fusion,
            thresholds: settings.thresholds,
            sampler: settings.sampler,
            flags: settings.flags,
            videos,
        }
    }

    pub fn settings(&self) -> Settings {
        Settings {
            class_id: self.class_id,
            fusion: self.fusion,
            thresholds: self.thresholds,
            sampler: self.sampler,
            flags: self.flags,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::parse(text, None)
    }

    fn parse(text: &str, origin: Option<&Path>) -> Result<Self> {
        let prefix = origin.map(|p| format!("{}: ", p.display())).unwrap_or_default();
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{prefix}{e}")))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{prefix}{m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    /// Reads and validates a configuration file, resolving relative paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, Some(path))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for v in &mut self.videos {
            v.detections.iter_mut().for_each(fix);
            fix(&mut v.embeddings);
            for p in [&mut v.merge_embeddings, &mut v.flows, &mut v.train_labels]
                .into_iter()
                .flatten()
            {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        let mut ids = std::collections::BTreeSet::new();
        let mut names = std::collections::BTreeSet::new();
        for v in &self.videos {
            if !ids.insert(v.id) || !names.insert(v.display_name()) {
                return Err(Error::Config(format!("video {} listed twice", v.id)));
            }
            if v.detections.is_empty() {
                return Err(Error::Config(format!("video {} has no detection sources", v.id)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

//! Experiment configuration: one TOML document describing data generation,
//! operators, fusion, architecture, training, detection and outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cdgan::TrainConfig;
use crate::datagen::{GenerationConfig, ReferenceConfig};
use crate::detect::ThresholdMode;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::nn::ArchConfig;
use crate::operators::OperatorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    #[serde(default)]
    pub threshold: ThresholdSetting,
    /// Median filter radius applied to the energy map (0 = plain CVA).
    #[serde(default = "default_radius")]
    pub smooth_radius: usize,
}

fn default_radius() -> usize {
    1
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdSetting::default(),
            smooth_radius: default_radius(),
        }
    }
}

/// `"otsu"` or `{ fixed = τ }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSetting {
    #[default]
    Otsu,
    Fixed(f64),
}

impl From<ThresholdSetting> for ThresholdMode {
    fn from(t: ThresholdSetting) -> Self {
        match t {
            ThresholdSetting::Otsu => ThresholdMode::Otsu,
            ThresholdSetting::Fixed(v) => ThresholdMode::Fixed(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Run directory; relative paths resolve against the config file.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: GenerationConfig,
    #[serde(default)]
    pub operators: OperatorConfig,
    pub fusion: FusionConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub detect: DetectConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parse, resolve relative paths against the file's directory and validate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.eval.output_dir.is_relative() {
            self.eval.output_dir = base.join(&self.eval.output_dir);
        }
        if let ReferenceConfig::Files { paths } = &mut self.data.references {
            for p in paths.iter_mut() {
                if Path::new(p).is_relative() {
                    *p = base.join(&*p).to_string_lossy().into_owned();
                }
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, output directory excluded so
    /// that a moved run directory keeps its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.eval.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn latent_bands(&self) -> usize {
        match &self.data.references {
            ReferenceConfig::Procedural { bands, .. } => *bands,
            ReferenceConfig::Files { .. } => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.k == 0 {
            return Err(Error::Config("data.k must be >= 1".into()));
        }
        if d.rules.is_empty() || d.directions.is_empty() {
            return Err(Error::Config("data.rules and data.directions must be non-empty".into()));
        }
        if d.test_pairs == 0 || d.test_pairs >= d.total_pairs() {
            return Err(Error::Config(format!(
                "data.test_pairs must lie in 1..{} (got {})",
                d.total_pairs(),
                d.test_pairs
            )));
        }
        if !(0.0 < d.min_change_fraction && d.min_change_fraction <= d.max_change_fraction && d.max_change_fraction < 0.5) {
            return Err(Error::Config("change fractions must satisfy 0 < min <= max < 0.5".into()));
        }
        match &d.references {
            ReferenceConfig::Procedural {
                count,
                bands,
                rows,
                cols,
                materials,
            } => {
                if *count == 0 || *materials < d.k {
                    return Err(Error::Config("procedural references need count >= 1 and materials >= k".into()));
                }
                let f = self.operators.subsample_factor;
                if f == 0 || rows % f != 0 || cols % f != 0 {
                    return Err(Error::Config(format!(
                        "latent size {rows}x{cols} must be divisible by the subsample factor {f}"
                    )));
                }
                let w = self.operators.spectral_width;
                if w == 0 || bands % w != 0 {
                    return Err(Error::Config(format!("{bands} bands are not divisible by spectral width {w}")));
                }
            }
            ReferenceConfig::Files { paths } => {
                if paths.is_empty() {
                    return Err(Error::Config("data.references.paths is empty".into()));
                }
                for p in paths {
                    if !Path::new(p).exists() {
                        return Err(Error::Config(format!("reference file {p} does not exist")));
                    }
                }
            }
        }
        if !(self.operators.blur_sigma > 0.0) {
            return Err(Error::Config("operators.blur_sigma must be > 0".into()));
        }
        self.train.validate()?;
        if self.arch.feature_width == 0 || self.arch.trunk_width == 0 || self.arch.disc_width == 0 {
            return Err(Error::Config("arch widths must be >= 1".into()));
        }
        if let ThresholdSetting::Fixed(t) = self.detect.threshold {
            if !t.is_finite() {
                return Err(Error::Config("detect.threshold.fixed must be finite".into()));
            }
        }
        if let Some(a) = &self.ablation {
            if a.betas.is_empty() || a.betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
                return Err(Error::Config("ablation.betas must be non-empty and >= 0".into()));
            }
        }
        Ok(())
    }
}

//! Run configuration: a single TOML document with strict validation.
//! Unknown keys are rejected, the seed is mandatory, and every referenced
//! path must exist before any work starts.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use uird_core::classifier::ClassifierArch;
use uird_core::madegan::{MadeGanArch, MadeGanConfig};
use uird_core::pipeline::{PipelineConfig, ReplaySource};
use uird_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; required so no run is silently nondeterministic.
    pub seed: u64,
    /// Output directory; relative paths resolve under `UIRD_OUT_ROOT`
    /// (or the working directory when unset).
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub classes: ClassConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ewc: EwcConfig,
    #[serde(default)]
    pub filter: FilterConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Beatset CSV (`label,v1,...,v320`) for run subcommands.
    pub beatset: Option<PathBuf>,
    /// WFDB format-212 binary record for `ingest`.
    pub record: Option<PathBuf>,
    /// Plain-text `sample_index,symbol` annotation sidecar for `ingest`.
    pub annotations: Option<PathBuf>,
    pub sampling_rate_hz: Option<f64>,
    pub n_channels: Option<usize>,
    pub gains: Option<Vec<f64>>,
    pub baselines: Option<Vec<f64>>,
    /// Which channel to analyze (default 0).
    #[serde(default)]
    pub channel: usize,
    /// R-peak source: run the detector or trust the annotations.
    #[serde(default)]
    pub r_peaks: RPeakSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RPeakSource {
    #[default]
    Detector,
    Annotations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    /// Class alphabet as single-character strings.
    pub alphabet: Vec<String>,
    #[serde(default)]
    pub order: ClassOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    /// Descending sample count, ties by symbol.
    #[default]
    BySampleSize,
    /// Exactly the order listed in `alphabet`.
    Given,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `desk` (CPU-sized) or `paper` (full-scale, 2000 memory slots).
    pub preset: String,
    pub memory_slots: Option<usize>,
    pub latent_dim: Option<usize>,
    pub lambda_rec: f64,
    pub lambda_fm: f64,
    pub lambda_sp: f64,
    pub madegan_lr: f64,
    pub madegan_batch: usize,
    pub tau_percentile: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            memory_slots: None,
            latent_dim: None,
            lambda_rec: 1.0,
            lambda_fm: 1.0,
            lambda_sp: 1.0,
            madegan_lr: 1e-3,
            madegan_batch: 32,
            tau_percentile: 95.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub madegan_epochs_init: usize,
    pub madegan_epochs_finetune: usize,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub split_ratio: f64,
    pub calib_fraction: f64,
    pub min_novel_count: usize,
    pub smote_k: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            madegan_epochs_init: 15,
            madegan_epochs_finetune: 6,
            classifier_epochs: 25,
            classifier_batch: 32,
            classifier_lr: 1e-3,
            split_ratio: 0.8,
            calib_fraction: 0.2,
            min_novel_count: 20,
            smote_k: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwcConfig {
    pub lambda: f64,
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            fisher_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub highpass_cutoff_hz: f64,
    pub highpass_order: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            highpass_cutoff_hz: 0.5,
            highpass_order: 101,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.alphabet.is_empty() {
            return Err(Error::Config("classes.alphabet must not be empty".into()));
        }
        for s in &self.classes.alphabet {
            if s.chars().count() != 1 {
                return Err(Error::Config(format!("class symbol {s:?} must be a single character")));
            }
        }
        let t = &self.training;
        if !(0.0 < t.split_ratio && t.split_ratio < 1.0) {
            return Err(Error::Config(format!("training.split_ratio {} outside (0,1)", t.split_ratio)));
        }
        if !(0.0 < t.calib_fraction && t.calib_fraction < 1.0) {
            return Err(Error::Config(format!(
                "training.calib_fraction {} outside (0,1)",
                t.calib_fraction
            )));
        }
        if t.smote_k == 0 {
            return Err(Error::Config("training.smote_k must be >= 1".into()));
        }
        if t.madegan_epochs_init == 0 || t.classifier_epochs == 0 {
            return Err(Error::Config("epoch counts must be >= 1".into()));
        }
        if !(0.0..=100.0).contains(&self.model.tau_percentile) {
            return Err(Error::Config(format!(
                "model.tau_percentile {} outside [0,100]",
                self.model.tau_percentile
            )));
        }
        match self.model.preset.as_str() {
            "desk" | "paper" => {}
            other => return Err(Error::Config(format!("model.preset {other:?} (expected desk or paper)"))),
        }
        if let Some(f) = &self.dataset.gains {
            if f.iter().any(|&g| !(g > 0.0)) {
                return Err(Error::Config("dataset.gains must be positive".into()));
            }
        }
        if self.filter.highpass_order % 2 == 0 || self.filter.highpass_order < 3 {
            return Err(Error::Config("filter.highpass_order must be odd and >= 3".into()));
        }
        Ok(())
    }

    /// Validate that every path a subcommand needs exists.
    pub fn require_beatset(&self) -> Result<&PathBuf> {
        let p = self
            .dataset
            .beatset
            .as_ref()
            .ok_or_else(|| Error::Config("dataset.beatset is required for this command".into()))?;
        if !p.exists() {
            return Err(Error::Config(format!("dataset.beatset {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_record(&self) -> Result<(&PathBuf, &PathBuf)> {
        let rec = self
            .dataset
            .record
            .as_ref()
            .ok_or_else(|| Error::Config("dataset.record is required for ingest".into()))?;
        let ann = self
            .dataset
            .annotations
            .as_ref()
            .ok_or_else(|| Error::Config("dataset.annotations is required for ingest".into()))?;
        for p in [rec, ann] {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok((rec, ann))
    }

    pub fn alphabet_chars(&self) -> Vec<char> {
        self.classes
            .alphabet
            .iter()
            .map(|s| s.chars().next().expect("validated single char"))
            .collect()
    }

    /// Resolve the output directory: explicit config value, else
    /// `UIRD_OUT_ROOT/<fallback>`, else `./<fallback>`.
    pub fn resolve_out_dir(&self, fallback: &str) -> PathBuf {
        match &self.out_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => out_root().join(p),
            None => out_root().join(fallback),
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut arch = match self.model.preset.as_str() {
            "paper" => MadeGanArch::paper(),
            _ => MadeGanArch::desk(),
        };
        if let Some(k) = self.model.memory_slots {
            arch.memory_slots = k;
        }
        if let Some(d) = self.model.latent_dim {
            arch.latent_dim = d;
        }
        let madegan = MadeGanConfig {
            lambda_rec: self.model.lambda_rec,
            lambda_fm: self.model.lambda_fm,
            lambda_sp: self.model.lambda_sp,
            lr: self.model.madegan_lr,
            batch_size: self.model.madegan_batch,
            tau_percentile: self.model.tau_percentile,
            use_memory: true,
            adversarial: true,
        };
        let cfg = PipelineConfig {
            madegan_arch: arch,
            madegan,
            classifier_arch: ClassifierArch::desk(),
            smote_k: self.training.smote_k,
            split_ratio: self.training.split_ratio,
            calib_fraction: self.training.calib_fraction,
            madegan_epochs_init: self.training.madegan_epochs_init,
            madegan_epochs_finetune: self.training.madegan_epochs_finetune,
            classifier_epochs: self.training.classifier_epochs,
            classifier_batch: self.training.classifier_batch,
            classifier_lr: self.training.classifier_lr,
            min_novel_count: self.training.min_novel_count,
            replay: ReplaySource::Pseudo,
            master_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn out_root() -> PathBuf {
    std::env::var_os("UIRD_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

//! Experiment configuration: one TOML document covering data, model,
//! training, sampling, encoder, metrics, interpretation and ablations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::sampler::SampleConfig;
use crate::schedule::ScheduleConfig;
use crate::synth::{SyntheticAtlasConfig, HIGH_LEVEL_LABEL, LOW_LEVEL_LABEL};
use crate::train::TrainConfig;

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Archive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Archive directory, required when `source = "archive"`.
    pub archive: Option<PathBuf>,
    /// Atlas manifest overriding the archive's own `atlas.tsv`.
    pub atlas: Option<PathBuf>,
    /// Seed of the synthetic brain and stimuli; independent of the run seed
    /// so that reseeding a run keeps its data.
    pub seed: u64,
    pub train_items: usize,
    /// Held-out items; for archives, the last `test_items` stimuli.
    pub test_items: usize,
    pub noise_std: f64,
    pub repetitions: usize,
    pub layout: SyntheticAtlasConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            archive: None,
            atlas: None,
            seed: 0,
            train_items: 200,
            test_items: 100,
            noise_std: 0.5,
            repetitions: 3,
            layout: SyntheticAtlasConfig::default(),
        }
    }
}

/// Image feature map used by a metric column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    Pixels,
    Gabor,
    EncoderBackbone,
    ShapeClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub low_a: ExtractorKind,
    pub low_b: ExtractorKind,
    pub high_a: ExtractorKind,
    pub high_b: ExtractorKind,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            low_a: ExtractorKind::Pixels,
            low_b: ExtractorKind::Gabor,
            high_a: ExtractorKind::EncoderBackbone,
            high_b: ExtractorKind::ShapeClassifier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    /// How many decoded samples get a full attention trace written.
    pub trace_samples: usize,
    /// Timestep columns in the ROI heatmap grids.
    pub heatmap_timesteps: usize,
    /// Opacity of heatmaps drawn over decoded images.
    pub overlay_alpha: f32,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self { trace_samples: 4, heatmap_timesteps: 5, overlay_alpha: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Parcels per hemisphere compared by the `parcels_p` ablation.
    pub parcels_k: Vec<usize>,
    /// Token dimensions compared by the `dim_f` ablation.
    pub token_dims: Vec<usize>,
    /// Candidate counts compared by the `n_candidates` ablation.
    pub candidates: Vec<usize>,
    /// ROI labels masked by the low-level row of the `roi_masking` ablation.
    pub low_level_rois: Vec<String>,
    /// ROI labels masked by the high-level row.
    pub high_level_rois: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            parcels_k: vec![25, 50, 100],
            token_dims: vec![256, 512, 768],
            candidates: vec![1, 2, 4, 8],
            low_level_rois: vec![LOW_LEVEL_LABEL.to_string()],
            high_level_rois: vec![HIGH_LEVEL_LABEL.to_string()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives model initialisation, training, sampling and the encoder.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Highest-SNR parcels kept per hemisphere.
    pub k: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub encoder: EncoderConfig,
    pub metrics: MetricsConfig,
    pub interpret: InterpretConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            k: 100,
            data: DataConfig {
                layout: SyntheticAtlasConfig { parcels_per_hemisphere: 120, ..Default::default() },
                ..Default::default()
            },
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            encoder: EncoderConfig::default(),
            metrics: MetricsConfig::default(),
            interpret: InterpretConfig::default(),
            ablate: AblateConfig::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

impl ExperimentConfig {
    /// Parses TOML without validating; paths stay relative to the caller.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| snippet_field(text, s.start)).unwrap_or_default();
            config_err(if field.is_empty() { "<document>" } else { &field }, e.message().to_string())
        })?;
        let seed = cfg.seed;
        cfg.set_seed(seed);
        Ok(cfg)
    }

    /// Reads a config file, resolving relative data paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.archive, &mut cfg.data.atlas].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the run seed and every component seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.sample.seed = seed;
        self.encoder.seed = seed;
    }

    /// Parcels in the selected atlas.
    pub fn num_parcels(&self) -> usize {
        2 * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config_err("k", "must be at least 1"));
        }
        if !(self.schedule.gamma > 0.0 && self.schedule.gamma.is_finite()) {
            return Err(config_err("schedule.gamma", "must be a positive number"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Archive => {
                let dir = d.archive.as_ref().ok_or_else(|| config_err("data.archive", "required for archive data"))?;
                if !dir.is_dir() {
                    return Err(config_err("data.archive", format!("{} is not a directory", dir.display())));
                }
            }
            DataSource::Synthetic => {
                if d.train_items == 0 {
                    return Err(config_err("data.train_items", "must be positive"));
                }
                if d.repetitions == 0 {
                    return Err(config_err("data.repetitions", "must be positive"));
                }
                if !(d.noise_std.is_finite() && d.noise_std >= 0.0) {
                    return Err(config_err("data.noise_std", "must be finite and non-negative"));
                }
                if d.layout.parcels_per_hemisphere < self.k {
                    return Err(config_err(
                        "k",
                        format!("exceeds the {} synthetic parcels per hemisphere", d.layout.parcels_per_hemisphere),
                    ));
                }
            }
        }
        if let Some(atlas) = &d.atlas {
            if !atlas.is_file() {
                return Err(config_err("data.atlas", format!("{} does not exist", atlas.display())));
            }
        }
        if d.test_items < 2 {
            return Err(config_err("data.test_items", "metrics need at least two held-out items"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.encoder.validate()?;
        let i = &self.interpret;
        if i.heatmap_timesteps == 0 || i.heatmap_timesteps > self.sample.steps {
            return Err(config_err("interpret.heatmap_timesteps", "must be between 1 and sample.steps"));
        }
        if !(0.0..=1.0).contains(&i.overlay_alpha) {
            return Err(config_err("interpret.overlay_alpha", "must lie in [0, 1]"));
        }
        let a = &self.ablate;
        if a.parcels_k.contains(&0) || a.token_dims.contains(&0) || a.candidates.contains(&0) {
            return Err(config_err("ablate", "ablation values must be positive"));
        }
        Ok(())
    }

    /// Stable digest of the effective configuration, independent of the
    /// output root.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let stripped = Self { output_dir: PathBuf::new(), ..self.clone() };
        h.update(stripped.to_toml().as_bytes());
        hex::encode(h.finalize())
    }
}

/// Dotted key path of the TOML key enclosing byte `offset`, best effort.
fn snippet_field(text: &str, offset: usize) -> String {
    let head = &text[..offset.min(text.len())];
    let mut table = String::new();
    let mut key = String::new();
    for line in head.lines() {
        let line = line.trim();
        if line.starts_with('[') {
            table = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = line.split_once('=') {
            key = k.trim().to_string();
        }
    }
    let current = text[head.len()..].lines().next().unwrap_or("");
    if let Some((k, _)) = current.split_once('=') {
        key = k.trim().to_string();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

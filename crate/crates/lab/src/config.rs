//! Run configuration: one TOML file describes dataset, detector,
//! optimizer, training arm, and corruption schedule. Every constant a
//! run depends on lives here so arms differ only by `mode` and `seed`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use sdgod_core::augment::AugmentConfig;
use sdgod_core::corruption::{CorruptionType, Severity, ALL_CORRUPTIONS};
use sdgod_core::data::DatasetSpec;
use sdgod_core::detector::DetectorConfig;
use sdgod_core::select::PromptTemplates;

use crate::LabError;

/// Ablation arm. The fourth combination (proposal mixing without the
/// region-interaction loss) is deliberately not expressible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Crfi,
    CrfiCprm,
}

impl Mode {
    pub fn uses_crfi(self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn uses_cprm(self) -> bool {
        matches!(self, Mode::CrfiCprm)
    }

    pub fn all() -> [Mode; 3] {
        [Mode::Baseline, Mode::Crfi, Mode::CrfiCprm]
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Baseline => "baseline",
            Mode::Crfi => "crfi",
            Mode::CrfiCprm => "crfi_cprm",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "crfi" => Ok(Mode::Crfi),
            "crfi_cprm" => Ok(Mode::CrfiCprm),
            other => Err(LabError::Config(format!(
                "unknown mode {other:?}; expected baseline, crfi, or crfi_cprm"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub categories: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_box_area: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 100,
            image_size: 64,
            categories: 3,
            min_objects: 1,
            max_objects: 3,
            min_box_area: 100.0,
        }
    }
}

impl DataSection {
    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_images: self.train_images,
            image_size: self.image_size,
            categories: self.categories,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_box_area: self.min_box_area,
        }
    }

    pub fn test_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_images: self.test_images,
            ..self.train_spec()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub mode: Mode,
    pub iterations: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Weight of the region-interaction term in the total objective.
    pub alpha: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Offset weight of the condition component in pseudo embeddings.
    pub lambda: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: Mode::CrfiCprm,
            iterations: 2000,
            batch_size: 4,
            crop_size: 32,
            alpha: 0.01,
            tau: 0.1,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Corruption names to evaluate; empty means the full suite of 15.
    pub corruptions: Vec<String>,
    /// Severity levels to evaluate, each in 1..=5.
    pub severities: Vec<u8>,
    pub iou_thr: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Severity at which the similarity report is computed.
    pub cosine_severity: u8,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            corruptions: Vec::new(),
            severities: vec![1, 2, 3, 4, 5],
            iou_thr: 0.5,
            score_thresh: 0.05,
            nms_iou: 0.5,
            cosine_severity: 5,
        }
    }
}

impl EvalSection {
    pub fn corruption_types(&self) -> Result<Vec<CorruptionType>, LabError> {
        if self.corruptions.is_empty() {
            return Ok(ALL_CORRUPTIONS.to_vec());
        }
        self.corruptions
            .iter()
            .map(|n| CorruptionType::from_name(n).map_err(|e| LabError::Config(e.to_string())))
            .collect()
    }

    pub fn severity_levels(&self) -> Result<Vec<Severity>, LabError> {
        self.severities
            .iter()
            .map(|&s| Severity::new(s).map_err(|e| LabError::Config(e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSection {
    pub original: String,
    pub augmented: String,
}

impl Default for PromptSection {
    fn default() -> Self {
        let t = PromptTemplates::default();
        Self {
            original: t.original,
            augmented: t.augmented,
        }
    }
}

impl PromptSection {
    pub fn templates(&self) -> PromptTemplates {
        PromptTemplates {
            original: self.original.clone(),
            augmented: self.augmented.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub detector: DetectorConfig,
    pub train: TrainSection,
    /// Magnitudes of the augmented-domain view used by the crfi and
    /// crfi_cprm arms.
    pub augment: AugmentConfig,
    pub eval: EvalSection,
    pub prompts: PromptSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            detector: DetectorConfig::default(),
            train: TrainSection::default(),
            augment: AugmentConfig::default(),
            eval: EvalSection::default(),
            prompts: PromptSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), LabError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| LabError::Config(format!("serialize config: {e}")))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|e| LabError::Io(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(path, text).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if !self.train.alpha.is_finite() || self.train.alpha < 0.0 {
            return Err(LabError::Config(format!(
                "alpha must be non-negative, got {}",
                self.train.alpha
            )));
        }
        if !(self.train.tau.is_finite() && self.train.tau > 0.0) {
            return Err(LabError::Config(format!(
                "tau must be positive, got {}",
                self.train.tau
            )));
        }
        if self.train.iterations == 0 || self.train.batch_size == 0 {
            return Err(LabError::Config("zero iteration or batch budget".into()));
        }
        if self.data.image_size < 48 {
            return Err(LabError::Config(format!(
                "image_size must be at least 48, got {}",
                self.data.image_size
            )));
        }
        if self.data.categories < 2 {
            return Err(LabError::Config("need at least 2 categories".into()));
        }
        for s in &self.eval.severities {
            if !(1..=5).contains(s) {
                return Err(LabError::Config(format!("severity {s} outside 1..=5")));
            }
        }
        if !(1..=5).contains(&self.eval.cosine_severity) {
            return Err(LabError::Config("cosine_severity outside 1..=5".into()));
        }
        self.eval.corruption_types()?;
        for (name, v) in [
            ("gain_mag", self.augment.gain_mag),
            ("bias_mag", self.augment.bias_mag),
            ("hue_mag", self.augment.hue_mag),
            ("freq_gain", self.augment.freq_gain),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LabError::Config(format!(
                    "augment.{name} must be non-negative, got {v}"
                )));
            }
        }
        self.detector
            .validate()
            .map_err(|e| LabError::Config(e.to_string()))?;
        if self.detector.n_categories != self.data.categories {
            return Err(LabError::Config(format!(
                "detector has {} categories, dataset has {}",
                self.detector.n_categories, self.data.categories
            )));
        }
        Ok(())
    }
}

//! Experiment configuration: one TOML file per experiment.

use std::path::{Path, PathBuf};

use maml_core::backbone::BackboneConfig;
use maml_core::data::{generate_synthetic, preprocess_case, Manifest, SynthSpec};
use maml_core::engine::{EvalMode, TrainConfig};
use maml_core::fusion::FusionConfig;
use maml_core::{Error, ModalityId, MultiModalCase, Result};
use serde::{Deserialize, Serialize};

/// Where cases come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// A `manifest.csv`; relative paths resolve against the config file.
    Manifest { path: PathBuf },
}

/// Which network `train` fits: the fused model or a one-modality baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelKind {
    Maml,
    Single(ModalityId),
}

impl TryFrom<String> for ModelKind {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "maml" => Ok(ModelKind::Maml),
            other => match other.strip_prefix("single:") {
                Some(m) => m.parse().map(ModelKind::Single).map_err(|e: Error| e.to_string()),
                None => Err(format!("model must be `maml` or `single:<ID>`, got `{other}`")),
            },
        }
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        match k {
            ModelKind::Maml => "maml".into(),
            ModelKind::Single(m) => format!("single:{m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct EvalSettings {
    /// Sliding-window size; defaults to the training patch.
    pub window: Option<[usize; 3]>,
    /// The last `test_cases` cases (by case id) are held out from training
    /// and used for evaluation. Zero trains and evaluates on everything.
    pub test_cases: usize,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modalities: Vec<ModalityId>,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Keep a numbered checkpoint every this many epochs (0: only `last.json`).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    pub data: DataSource,
}

fn default_checkpoint_every() -> usize {
    10
}

fn default_model() -> ModelKind {
    ModelKind::Maml
}

impl ExperimentConfig {
    /// Reads and validates; relative paths are anchored at the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let DataSource::Manifest { path: p } = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.modalities.len() || sorted.len() < 2 {
            return Err(Error::Config(format!(
                "modalities must be at least two distinct ids, got {:?}",
                self.modalities
            )));
        }
        if let ModelKind::Single(m) = &self.model {
            if !sorted.contains(m) {
                return Err(Error::Config(format!("model modality {m} is not in {sorted:?}")));
            }
        }
        self.backbone.validate()?;
        self.fusion.validate(self.backbone.feature_channels)?;
        let divisor = self.backbone.divisor();
        self.train.validate(divisor)?;
        let window = self.window();
        if window.iter().any(|&w| w == 0 || w % divisor != 0) {
            return Err(Error::Config(format!("eval window {window:?} must be a positive multiple of {divisor}")));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.modalities() != sorted {
                return Err(Error::Config(format!(
                    "synthetic data provides {:?} but the experiment lists {sorted:?}",
                    spec.modalities()
                )));
            }
            if self.eval.test_cases >= spec.num_cases {
                return Err(Error::Config(format!(
                    "test_cases {} leaves no training cases out of {}",
                    self.eval.test_cases, spec.num_cases
                )));
            }
            let patch = self.train.patch.size;
            if (0..3).any(|k| patch[k] > spec.shape[k]) {
                return Err(Error::Config(format!(
                    "patch {patch:?} exceeds synthetic volume shape {:?}",
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> [usize; 3] {
        self.eval.window.unwrap_or(self.train.patch.size)
    }

    /// Modalities in canonical (sorted) order.
    pub fn canonical_modalities(&self) -> Vec<ModalityId> {
        let mut m = self.modalities.clone();
        m.sort();
        m
    }

    /// All preprocessed cases, sorted by case id.
    pub fn load_cases(&self) -> Result<Vec<MultiModalCase>> {
        let mut cases = match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?
                .iter()
                .map(|s| preprocess_case(&s.case))
                .collect::<Result<Vec<_>>>()?,
            DataSource::Manifest { path } => {
                let manifest = Manifest::read(path)?;
                if manifest.modalities != self.canonical_modalities() {
                    return Err(Error::Config(format!(
                        "manifest provides {:?} but the experiment lists {:?}",
                        manifest.modalities,
                        self.canonical_modalities()
                    )));
                }
                manifest.load_all()?
            }
        };
        cases.sort_by(|a, b| a.case_id().cmp(b.case_id()));
        if self.eval.test_cases >= cases.len() {
            return Err(Error::Config(format!(
                "test_cases {} leaves no training cases out of {}",
                self.eval.test_cases,
                cases.len()
            )));
        }
        Ok(cases)
    }

    /// Splits sorted cases into (train, test).
    pub fn split(&self, mut cases: Vec<MultiModalCase>) -> (Vec<MultiModalCase>, Vec<MultiModalCase>) {
        if self.eval.test_cases == 0 {
            return (cases.clone(), cases);
        }
        let test = cases.split_off(cases.len() - self.eval.test_cases);
        (cases, test)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("last.json")
    }

    pub fn report_stem(mode: &EvalMode) -> String {
        mode.to_string().replace(':', "_")
    }
}

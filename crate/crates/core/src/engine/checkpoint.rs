use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::engine::model::{MamlModel, Network, SingleModel};
use crate::engine::optim::Adam;
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::nn::Parameters;
use crate::tensor::Tensor;
use crate::volume::ModalityId;

pub const CHECKPOINT_FORMAT: &str = "maml-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Maml {
        modalities: Vec<ModalityId>,
        backbone: BackboneConfig,
        fusion: FusionConfig,
    },
    Single {
        modality: ModalityId,
        backbone: BackboneConfig,
    },
}

impl Architecture {
    pub fn modalities(&self) -> Vec<ModalityId> {
        match self {
            Architecture::Maml { modalities, .. } => modalities.clone(),
            Architecture::Single { modality, .. } => vec![modality.clone()],
        }
    }

    pub fn backbone(&self) -> &BackboneConfig {
        match self {
            Architecture::Maml { backbone, .. } | Architecture::Single { backbone, .. } => backbone,
        }
    }
}

/// A trained network ready for inference.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Maml(MamlModel<f32>),
    Single(SingleModel<f32>),
}

impl TrainedModel {
    /// Untrained instance (weights from a fixed-seed initialisation).
    pub fn build(arch: &Architecture) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(match arch {
            Architecture::Maml {
                modalities,
                backbone,
                fusion,
            } => TrainedModel::Maml(MamlModel::new(modalities, backbone, fusion, &mut rng)?),
            Architecture::Single { modality, backbone } => {
                TrainedModel::Single(SingleModel::new(modality, backbone, &mut rng)?)
            }
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            TrainedModel::Maml(m) => m.architecture(),
            TrainedModel::Single(m) => m.architecture(),
        }
    }

    pub fn modalities(&self) -> &[ModalityId] {
        match self {
            TrainedModel::Maml(m) => m.modalities(),
            TrainedModel::Single(m) => m.modalities(),
        }
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        match self {
            TrainedModel::Maml(m) => m.backbone_config(),
            TrainedModel::Single(m) => m.backbone_config(),
        }
    }

    /// Probabilities from one modality's backbone and head alone.
    pub fn predict_intra(&self, modality: &ModalityId, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            TrainedModel::Maml(m) => m.predict_intra(modality, input),
            TrainedModel::Single(m) if m.modality() == modality => m.predict(input),
            TrainedModel::Single(m) => Err(Error::UnknownModality(format!(
                "{modality} (baseline trained on {})",
                m.modality()
            ))),
        }
    }
}

impl Parameters<f32> for TrainedModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f32])) {
        match self {
            TrainedModel::Maml(m) => m.visit(prefix, f),
            TrainedModel::Single(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f32])) {
        match self {
            TrainedModel::Maml(m) => m.visit_mut(prefix, f),
            TrainedModel::Single(m) => m.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedBuffer {
    pub name: String,
    pub len: usize,
    /// Little-endian values, base64.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: String,
    v: String,
}

fn encode<const N: usize, I: IntoIterator<Item = [u8; N]>>(bytes: I) -> String {
    STANDARD.encode(bytes.into_iter().flatten().collect::<Vec<u8>>())
}

fn decode<const N: usize>(s: &str, what: &str) -> Result<Vec<[u8; N]>> {
    let raw = STANDARD
        .decode(s)
        .map_err(|e| Error::Config(format!("checkpoint buffer {what}: {e}")))?;
    if raw.len() % N != 0 {
        return Err(Error::Config(format!("checkpoint buffer {what} has a ragged length")));
    }
    Ok(raw.chunks_exact(N).map(|c| c.try_into().expect("chunk size")).collect())
}

/// Versioned, self-describing snapshot of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub train: TrainConfig,
    /// Snapshot of the experiment configuration that produced the run.
    pub config: serde_json::Value,
    /// Metrics recorded alongside the weights, e.g. validation Dice.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub params: Vec<NamedBuffer>,
    optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture<M: Network<f32>>(
        model: &M,
        optimizer: Option<&Adam>,
        epoch: usize,
        step: u64,
        train: &TrainConfig,
        config: serde_json::Value,
    ) -> Self {
        let mut params = Vec::new();
        model.visit("", &mut |name, p| {
            params.push(NamedBuffer {
                name: name.to_owned(),
                len: p.len(),
                data: encode(p.iter().map(|v| v.to_le_bytes())),
            })
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: model.architecture(),
            epoch,
            step,
            train: train.clone(),
            config,
            metrics: BTreeMap::new(),
            params,
            optimizer: optimizer.map(|o| OptimizerState {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m: encode(o.m.iter().map(|v| v.to_le_bytes())),
                v: encode(o.v.iter().map(|v| v.to_le_bytes())),
            }),
        }
    }

    /// Rebuilds the network; every buffer must match by name and length.
    pub fn model(&self) -> Result<TrainedModel> {
        let mut model = TrainedModel::build(&self.architecture)?;
        let mut buffers = self.params.iter();
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match buffers.next() {
                Some(b) if b.name == name && b.len == p.len() => match decode::<4>(&b.data, name) {
                    Ok(vals) if vals.len() == p.len() => {
                        for (w, bytes) in p.iter_mut().zip(vals) {
                            *w = f32::from_le_bytes(bytes);
                        }
                    }
                    Ok(_) => failure = Some(format!("buffer {name} length disagrees with its header")),
                    Err(e) => failure = Some(e.to_string()),
                },
                Some(b) => failure = Some(format!("expected buffer {name}[{}], found {}[{}]", p.len(), b.name, b.len)),
                None => failure = Some(format!("missing buffer {name}")),
            }
        });
        if let Some(f) = failure {
            return Err(Error::Config(format!("checkpoint does not fit its architecture: {f}")));
        }
        if buffers.next().is_some() {
            return Err(Error::Config("checkpoint has more buffers than its architecture".into()));
        }
        Ok(model)
    }

    pub fn optimizer(&self) -> Result<Option<Adam>> {
        let Some(o) = &self.optimizer else { return Ok(None) };
        let moments = |s: &str, what| -> Result<Vec<f64>> {
            Ok(decode::<8>(s, what)?.into_iter().map(f64::from_le_bytes).collect())
        };
        Ok(Some(Adam {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
            m: moments(&o.m, "adam.m")?,
            v: moments(&o.v, "adam.v")?,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).expect("checkpoint serialises");
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            ));
        }
        Ok(ckpt)
    }
}

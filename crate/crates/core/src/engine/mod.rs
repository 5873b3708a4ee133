//! Training, checkpointing and inference.

mod checkpoint;
mod eval;
mod infer;
mod model;
mod optim;
mod train;

pub use checkpoint::{Architecture, Checkpoint, NamedBuffer, TrainedModel, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use eval::{evaluate, kfold, CaseResult, EvalMode, Report, REPORT_COLUMNS};
pub use infer::{predict_multimodal, predict_single, window_starts, MultimodalPrediction};
pub use model::{LossWeights, MamlForward, MamlModel, Network, SingleModel};
pub use optim::Adam;
pub use train::{train, Flow, JsonlLog, NoopObserver, StepRecord, TrainObserver, TrainOutcome, TrainState};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, PatchSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - step / total_steps)^power`
    Poly { power: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub patch: PatchSpec,
    pub seed: u64,
    /// Run samples of a batch sequentially. Results do not depend on this
    /// flag (gradients are always reduced in a fixed order); it only rules
    /// out scheduling effects.
    pub deterministic: bool,
    pub augment: AugmentConfig,
    /// Weight of the optional peer KL term; zero keeps the plain objective.
    pub mimicry_weight: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 200,
            batch_size: 2,
            lambda: 0.5,
            patch: PatchSpec::default(),
            seed: 0,
            deterministic: false,
            augment: AugmentConfig::default(),
            mimicry_weight: 0.0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.mimicry_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if let LrSchedule::Poly { power } = self.lr_schedule {
            if !(power > 0.0) {
                return Err(Error::Config(format!("poly power must be positive, got {power}")));
            }
        }
        self.patch.validate(divisor)?;
        self.augment.validate()
    }

    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly { power } => {
                let frac = step as f64 / total_steps.max(1) as f64;
                self.lr * (1.0 - frac).max(0.0).powf(power)
            }
        }
    }
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

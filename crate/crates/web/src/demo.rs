//! Plain-Rust state behind the page; `lib.rs` only adapts it to JS.

use maml_core::backbone::BackboneConfig;
use maml_core::data::{case_rng, generate_synthetic, preprocess_case, region, PatchSpec, SynthCase, SynthSpec};
use maml_core::engine::{evaluate, predict_multimodal, train, EvalMode, MamlModel, MultimodalPrediction, NoopObserver, TrainConfig, TrainedModel};
use maml_core::fusion::FusionConfig;
use maml_core::metrics::{assd, dice_score};
use maml_core::{Error, Mask, ModalityId, MultiModalCase, Result};
use ndarray::{Array3, Axis};

/// Layers a slice can be rendered from.
pub const LAYERS: [&str; 4] = ["AP", "VP", "mask", "regions"];

fn slice_z<T: Copy>(vol: &Array3<T>, z: usize) -> Result<Vec<T>> {
    if z >= vol.shape()[0] {
        return Err(Error::Shape(format!("slice {z} outside depth {}", vol.shape()[0])));
    }
    Ok(vol.index_axis(Axis(0), z).iter().copied().collect())
}

/// Min-max scaled grey levels using the range of the whole volume.
fn grey(values: &[f32], vol: &Array3<f32>) -> Vec<u8> {
    let (lo, hi) = vol.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f32::EPSILON);
    values
        .iter()
        .flat_map(|&v| {
            let g = (255.0 * (v - lo) / span).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn region_colour(r: u8) -> [u8; 4] {
    match r {
        region::INTERIOR => [236, 148, 52, 255],
        region::RIM => [64, 200, 224, 255],
        region::BODY_DISTRACTOR => [120, 80, 40, 255],
        region::RIM_DISTRACTOR => [40, 96, 110, 255],
        _ => [16, 16, 20, 255],
    }
}

/// Blue-white-red ramp over [0, 1].
pub fn heat(v: f32) -> [u8; 4] {
    let t = v.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = t * 2.0;
        (s, s, 1.0)
    } else {
        let s = (1.0 - t) * 2.0;
        (1.0, s, s)
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8, 255]
}

/// One synthetic case, raw and preprocessed.
pub struct Phantom {
    pub raw: SynthCase,
    pub case: MultiModalCase,
}

impl Phantom {
    pub fn new(seed: u64, noise_sigma: f64, size: usize) -> Result<Self> {
        let spec = SynthSpec { num_cases: 1, shape: [size; 3], noise_sigma, seed, ..SynthSpec::default() };
        let raw = generate_synthetic(&spec)?.remove(0);
        let case = preprocess_case(&raw.case)?;
        Ok(Self { raw, case })
    }

    pub fn size(&self) -> [usize; 3] {
        self.case.shape()
    }

    /// RGBA pixels (row-major H x W) of slice `z` of a [`LAYERS`] entry.
    pub fn slice(&self, layer: &str, z: usize) -> Result<Vec<u8>> {
        match layer {
            "mask" => Ok(slice_z(self.case.mask().data(), z)?
                .into_iter()
                .flat_map(|m| if m == 1 { [250, 250, 250, 255] } else { [16, 16, 20, 255] })
                .collect()),
            "regions" => Ok(slice_z(&self.raw.regions, z)?.into_iter().flat_map(region_colour).collect()),
            m => {
                let vol = self.raw.case.volume(&ModalityId::new(m)?)?.data();
                Ok(grey(&slice_z(vol, z)?, vol))
            }
        }
    }

    /// Dice and ASSD of the ground truth against a copy shifted by
    /// `offset` voxels, with anisotropic spacing `[spacing_z, 1, 1]`.
    /// ASSD is NaN when the shifted mask leaves the grid.
    pub fn shifted_metrics(&self, offset: [i64; 3], spacing_z: f64) -> Result<(f64, f64)> {
        let gt = self.case.mask();
        let shifted = Mask::new(shift(gt.data(), offset))?;
        let d = dice_score(&shifted, gt)?;
        let a = assd(&shifted, gt, [spacing_z, 1.0, 1.0])?;
        Ok((d, a.unwrap_or(f64::NAN)))
    }
}

/// Translates a volume by `offset`, filling vacated voxels with zero.
pub fn shift(m: &Array3<u8>, offset: [i64; 3]) -> Array3<u8> {
    let s = m.shape();
    Array3::from_shape_fn((s[0], s[1], s[2]), |(z, y, x)| {
        let src = [z as i64 - offset[0], y as i64 - offset[1], x as i64 - offset[2]];
        if (0..3).all(|k| src[k] >= 0 && src[k] < s[k] as i64) {
            m[[src[0] as usize, src[1] as usize, src[2] as usize]]
        } else {
            0
        }
    })
}

/// A small fused model trained in the page on a handful of phantoms.
pub struct Trainer {
    model: MamlModel<f32>,
    cases: Vec<MultiModalCase>,
    cfg: TrainConfig,
    epochs: usize,
    prediction: Option<MultimodalPrediction>,
}

pub const TRAINER_SIZE: usize = 24;
const TRAINER_WINDOW: [usize; 3] = [TRAINER_SIZE; 3];

impl Trainer {
    pub fn new(seed: u64) -> Result<Self> {
        let spec = SynthSpec {
            num_cases: 4,
            shape: TRAINER_WINDOW,
            lesion_count_range: [1, 1],
            lesion_radius_range: [3.0, 4.5],
            distractor_count_range: [1, 1],
            seed,
            ..SynthSpec::default()
        };
        let cases = generate_synthetic(&spec)?
            .iter()
            .map(|s| preprocess_case(&s.case))
            .collect::<Result<Vec<_>>>()?;
        let backbone = BackboneConfig { levels: 2, base_channels: 4, feature_channels: 8, ..BackboneConfig::default() };
        let model = MamlModel::new(&spec.modalities(), &backbone, &FusionConfig::default(), &mut case_rng(seed, 1))?;
        let cfg = TrainConfig {
            lr: 3e-3,
            seed,
            patch: PatchSpec { size: [16; 3], foreground_bias: 0.5 },
            ..TrainConfig::default()
        };
        Ok(Self { model, cases, cfg, epochs: 0, prediction: None })
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn cases(&self) -> &[MultiModalCase] {
        &self.cases
    }

    /// Runs `epochs` more epochs and returns the last epoch's mean loss.
    /// Each call starts a fresh optimizer; the weights carry over.
    pub fn run(&mut self, epochs: usize) -> Result<f64> {
        let cfg = TrainConfig { epochs, seed: self.cfg.seed.wrapping_add(self.epochs as u64), ..self.cfg.clone() };
        let outcome = train(&mut self.model, &self.cases, &cfg, &mut NoopObserver)?;
        self.epochs += outcome.epochs;
        self.prediction = None;
        Ok(outcome.epoch_losses.last().copied().unwrap_or(f64::NAN))
    }

    /// Mean fused Dice over the training phantoms.
    pub fn dice(&self) -> Result<f64> {
        let model = TrainedModel::Maml(self.model.clone());
        Ok(evaluate(&self.cases, &model, &EvalMode::Multimodal, TRAINER_WINDOW)?.dice.0)
    }

    fn prediction(&mut self) -> Result<&MultimodalPrediction> {
        if self.prediction.is_none() {
            self.prediction = Some(predict_multimodal(&self.cases[0], &self.model, TRAINER_WINDOW)?);
        }
        Ok(self.prediction.as_ref().expect("just computed"))
    }

    /// Attention of `modality` on slice `z` of the first phantom, as RGBA.
    pub fn attention_slice(&mut self, modality: &str, z: usize) -> Result<Vec<u8>> {
        let id = ModalityId::new(modality)?;
        let pred = self.prediction()?;
        let att = pred.attention.get(&id).ok_or_else(|| Error::UnknownModality(modality.into()))?;
        let vol = Array3::from_shape_vec(att.data.spatial(), att.data.data().to_vec()).expect("attention grid");
        Ok(slice_z(&vol, z)?.into_iter().flat_map(heat).collect())
    }

    /// Fused prediction on slice `z`: white is predicted foreground, red marks errors.
    pub fn prediction_slice(&mut self, z: usize) -> Result<Vec<u8>> {
        let gt = slice_z(self.cases[0].mask().data(), z)?;
        let pred = slice_z(self.prediction()?.mask.data(), z)?;
        Ok(pred
            .into_iter()
            .zip(gt)
            .flat_map(|(p, g)| match (p, g) {
                (1, 1) => [250, 250, 250, 255],
                (0, 0) => [16, 16, 20, 255],
                _ => [220, 50, 50, 255],
            })
            .collect())
    }
}

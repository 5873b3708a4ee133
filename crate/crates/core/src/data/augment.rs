use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, MultiModalCase, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Per-axis mirroring probability.
    pub mirror_prob: f64,
    /// Probability of one 90-degree rotation (random plane, random multiple).
    pub rotate_prob: f64,
    /// Per-modality probability of gamma correction.
    pub gamma_prob: f64,
    pub gamma_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mirror_prob: 0.5,
            rotate_prob: 0.5,
            gamma_prob: 0.3,
            gamma_range: [0.7, 1.5],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.mirror_prob, self.rotate_prob, self.gamma_prob];
        let [lo, hi] = self.gamma_range;
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// Axis mirrors followed by an optional rotation by `k * 90` degrees in the
/// plane of two axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpatialTransform {
    pub flips: [bool; 3],
    pub rotation: Option<(usize, usize, u8)>,
}

impl SpatialTransform {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let flips = std::array::from_fn(|_| rng.random::<f64>() < cfg.mirror_prob);
        let rotation = (rng.random::<f64>() < cfg.rotate_prob).then(|| {
            let (a, b) = [(0, 1), (0, 2), (1, 2)][rng.random_range(0..3)];
            (a, b, rng.random_range(1..=3u8))
        });
        Self { flips, rotation }
    }

    pub fn apply<A: Clone>(&self, a: &Array3<A>) -> Array3<A> {
        let mut v = a.view();
        for (k, &f) in self.flips.iter().enumerate() {
            if f {
                v.invert_axis(Axis(k));
            }
        }
        if let Some((p, q, k)) = self.rotation {
            for _ in 0..k % 4 {
                v.swap_axes(p, q);
                v.invert_axis(Axis(p));
            }
        }
        v.as_standard_layout().into_owned()
    }

    pub fn apply_case(&self, case: &MultiModalCase) -> Result<MultiModalCase> {
        let volumes = case
            .volumes()
            .iter()
            .map(|(id, v)| {
                let data = self.apply(v.data());
                // a quarter turn swaps the spacing of the two axes
                let mut spacing = v.spacing();
                if let Some((p, q, k)) = self.rotation {
                    if k % 2 == 1 {
                        spacing.swap(p, q);
                    }
                }
                Ok((id.clone(), Volume::new(data, spacing, id.clone())?))
            })
            .collect::<Result<_>>()?;
        MultiModalCase::new(case.case_id(), volumes, Mask::new(self.apply(case.mask().data()))?)
    }
}

/// `x -> lo + (hi - lo) * ((x - lo) / (hi - lo))^gamma` with `lo`/`hi` the
/// volume's own range.
pub fn gamma_correct(vol: &Volume, gamma: f64) -> Result<Volume> {
    let (lo, hi) = vol
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let (lo, hi) = (lo as f64, hi as f64);
    if !(hi > lo) {
        return Ok(vol.clone());
    }
    let range = hi - lo;
    vol.with_data(vol.data().mapv(|x| (lo + range * ((x as f64 - lo) / range).powf(gamma)) as f32))
}

/// One random spatial transform shared by all modalities and the mask, then
/// independent per-modality gamma correction.
pub fn augment<R: Rng + ?Sized>(case: &MultiModalCase, rng: &mut R, cfg: &AugmentConfig) -> Result<MultiModalCase> {
    if !cfg.enabled {
        return Ok(case.clone());
    }
    let moved = SpatialTransform::random(rng, cfg).apply_case(case)?;
    let [glo, ghi] = cfg.gamma_range;
    let volumes = moved
        .volumes()
        .iter()
        .map(|(id, v)| {
            let v = if rng.random::<f64>() < cfg.gamma_prob {
                gamma_correct(v, rng.random_range(glo..=ghi))?
            } else {
                v.clone()
            };
            Ok((id.clone(), v))
        })
        .collect::<Result<_>>()?;
    MultiModalCase::new(moved.case_id(), volumes, moved.mask().clone())
}

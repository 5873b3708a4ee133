//! Synthetic complementary datasets, ingestion, patch sampling and
//! augmentation.
//!
//! The generator places ellipsoidal lesions on a smooth background. One
//! modality brightens only the lesion interior, the other only a thin boundary
//! shell, and the mask covers both. Each modality also carries distractors that
//! look like its half of a lesion (bright blobs without a shell, shells without
//! a bright core), so neither modality alone identifies the lesions.

mod augment;
mod manifest;
mod patch;

pub use augment::{augment, gamma_correct, AugmentConfig, SpatialTransform};
pub use manifest::{load_case, load_case_raw, write_dataset, Manifest, ManifestEntry};
pub use patch::{crop, sample_patch, PatchSpec};

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::preprocess;
use crate::volume::{Mask, ModalityId, MultiModalCase, Volume};

/// Voxel classes recorded alongside each synthetic case.
pub mod region {
    pub const BACKGROUND: u8 = 0;
    pub const INTERIOR: u8 = 1;
    pub const RIM: u8 = 2;
    /// Bright core without a shell (body-contrast modality only).
    pub const BODY_DISTRACTOR: u8 = 3;
    /// Shell without a core (rim-contrast modality only).
    pub const RIM_DISTRACTOR: u8 = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_cases: usize,
    pub shape: [usize; 3],
    /// Inclusive range of lesions per case.
    pub lesion_count_range: [usize; 2],
    /// Per-axis semi-axis range in voxels.
    pub lesion_radius_range: [f64; 2],
    pub body_contrast_modality: ModalityId,
    pub rim_contrast_modality: ModalityId,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Shell thickness in voxels, within [1, 2].
    #[serde(default = "default_rim")]
    pub rim_thickness: f64,
    /// Inclusive range of distractors of each kind per case.
    #[serde(default = "default_distractors")]
    pub distractor_count_range: [usize; 2],
    /// Intensity added inside lesion structures.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Amplitude of the smooth background field.
    #[serde(default = "default_background")]
    pub background_amplitude: f64,
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
}

fn default_rim() -> f64 {
    1.5
}
fn default_distractors() -> [usize; 2] {
    [1, 2]
}
fn default_contrast() -> f64 {
    1.0
}
fn default_background() -> f64 {
    0.1
}
fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_cases: 8,
            shape: [32; 3],
            lesion_count_range: [1, 2],
            lesion_radius_range: [3.5, 6.0],
            body_contrast_modality: ModalityId::new("AP").expect("valid id"),
            rim_contrast_modality: ModalityId::new("VP").expect("valid id"),
            noise_sigma: 0.1,
            seed: 0,
            rim_thickness: default_rim(),
            distractor_count_range: default_distractors(),
            contrast: default_contrast(),
            background_amplitude: default_background(),
            spacing: default_spacing(),
        }
    }
}

impl SynthSpec {
    pub fn modalities(&self) -> Vec<ModalityId> {
        let mut m = vec![self.body_contrast_modality.clone(), self.rim_contrast_modality.clone()];
        m.sort();
        m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_cases == 0 {
            return bad("synthetic dataset needs at least one case".into());
        }
        if self.body_contrast_modality == self.rim_contrast_modality {
            return bad("body and rim contrast modalities must differ".into());
        }
        let [lo, hi] = self.lesion_count_range;
        let [dlo, dhi] = self.distractor_count_range;
        if lo > hi || dlo > dhi || hi == 0 {
            return bad(format!(
                "count ranges must be ordered with at least one lesion: lesions {:?}, distractors {:?}",
                self.lesion_count_range, self.distractor_count_range
            ));
        }
        if !(1.0..=2.0).contains(&self.rim_thickness) {
            return bad(format!("rim thickness {} outside [1, 2]", self.rim_thickness));
        }
        let [rlo, rhi] = self.lesion_radius_range;
        if !(rlo <= rhi) || rlo < self.rim_thickness + 1.0 {
            return bad(format!(
                "radius range {:?} must be ordered and exceed rim thickness + 1",
                self.lesion_radius_range
            ));
        }
        if let Some(&n) = self.shape.iter().find(|&&n| (n as f64) < 2.0 * rhi + 4.0) {
            return bad(format!("shape extent {n} cannot hold a lesion of radius {rhi}"));
        }
        if !(self.noise_sigma >= 0.0 && self.contrast > 0.0 && self.background_amplitude >= 0.0) {
            return bad("noise, contrast and background amplitude must be non-negative".into());
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel index coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Voxel `v` belongs to the ellipsoid iff `sum(((v - c) / r)^2) <= 1`.
    pub fn contains(&self, v: [usize; 3]) -> bool {
        let mut s = 0.0;
        for k in 0..3 {
            let d = (v[k] as f64 - self.center[k]) / self.radii[k];
            s += d * d;
        }
        s <= 1.0
    }

    pub fn shrunk(&self, by: f64) -> Self {
        Self {
            center: self.center,
            radii: self.radii.map(|r| r - by),
        }
    }

    fn max_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }

    /// Inclusive voxel bounding box.
    fn bounds(&self, shape: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|k| {
            let lo = (self.center[k] - self.radii[k]).floor().max(0.0) as usize;
            let hi = ((self.center[k] + self.radii[k]).ceil() as usize).min(shape[k] - 1);
            (lo, hi)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub case: MultiModalCase,
    /// Per-voxel [`region`] labels.
    pub regions: Array3<u8>,
    pub lesions: Vec<Ellipsoid>,
    pub body_distractors: Vec<Ellipsoid>,
    pub rim_distractors: Vec<Ellipsoid>,
}

/// Stream-separated generator for case `index` under `seed`.
pub fn case_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// FNV-1a of the case id, used to derive per-case streams independent of
/// dataset order.
pub fn case_stream(case_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in case_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

fn place<R: Rng>(rng: &mut R, spec: &SynthSpec, placed: &[Ellipsoid]) -> Result<Ellipsoid> {
    let [rlo, rhi] = spec.lesion_radius_range;
    for _ in 0..1000 {
        let radii: [f64; 3] = std::array::from_fn(|_| if rhi > rlo { rng.random_range(rlo..=rhi) } else { rlo });
        let center: [f64; 3] = std::array::from_fn(|k| {
            let lo = radii[k] + 1.0;
            let hi = spec.shape[k] as f64 - 2.0 - radii[k];
            rng.random_range(lo..=hi)
        });
        let e = Ellipsoid { center, radii };
        let clear = placed.iter().all(|o| {
            let d2: f64 = (0..3).map(|k| (o.center[k] - center[k]).powi(2)).sum();
            d2.sqrt() >= o.max_radius() + e.max_radius() + 2.0
        });
        if clear {
            return Ok(e);
        }
    }
    Err(Error::Config(format!(
        "infeasible geometry: cannot place {} non-overlapping objects in {:?}",
        placed.len() + 1,
        spec.shape
    )))
}

fn paint(regions: &mut Array3<u8>, e: &Ellipsoid, thickness: f64, core: Option<u8>, shell: Option<u8>) {
    let inner = e.shrunk(thickness);
    let shape = crate::volume::shape3(regions);
    let [(z0, z1), (y0, y1), (x0, x1)] = e.bounds(shape);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let v = [z, y, x];
                if !e.contains(v) {
                    continue;
                }
                let label = if inner.contains(v) { core } else { shell };
                if let Some(l) = label {
                    regions[v] = l;
                }
            }
        }
    }
}

fn background<R: Rng>(rng: &mut R, shape: [usize; 3], amplitude: f64) -> Array3<f64> {
    use std::f64::consts::TAU;
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
    let freq: [f64; 3] = std::array::from_fn(|k| rng.random_range(0.5..1.5) / shape[k] as f64);
    Array3::from_shape_fn(shape, |(z, y, x)| {
        let a = (TAU * freq[0] * z as f64 + phase[0]).sin() * (TAU * freq[1] * y as f64 + phase[1]).cos();
        let b = (TAU * freq[2] * x as f64 + phase[2]).sin();
        amplitude * 0.5 * (a + b)
    })
}

fn generate_one(spec: &SynthSpec, index: usize) -> Result<SynthCase> {
    let mut rng = case_rng(spec.seed, index as u64);
    let count = |rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]| rng.random_range(lo..=hi);
    let n_lesions = count(&mut rng, spec.lesion_count_range);
    let n_body = count(&mut rng, spec.distractor_count_range);
    let n_rim = count(&mut rng, spec.distractor_count_range);
    let mut placed = Vec::new();
    for _ in 0..n_lesions + n_body + n_rim {
        let e = place(&mut rng, spec, &placed)?;
        placed.push(e);
    }
    let rim_distractors = placed.split_off(n_lesions + n_body);
    let body_distractors = placed.split_off(n_lesions);
    let lesions = placed;

    let t = spec.rim_thickness;
    let mut regions = Array3::zeros(spec.shape);
    for e in &lesions {
        paint(&mut regions, e, t, Some(region::INTERIOR), Some(region::RIM));
    }
    for e in &body_distractors {
        paint(&mut regions, e, t, Some(region::BODY_DISTRACTOR), None);
    }
    for e in &rim_distractors {
        paint(&mut regions, e, t, None, Some(region::RIM_DISTRACTOR));
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut volumes = BTreeMap::new();
    for (id, lit) in [
        (&spec.body_contrast_modality, [region::INTERIOR, region::BODY_DISTRACTOR]),
        (&spec.rim_contrast_modality, [region::RIM, region::RIM_DISTRACTOR]),
    ] {
        let bg = background(&mut rng, spec.shape, spec.background_amplitude);
        let mut data = Array3::<f32>::zeros(spec.shape);
        for ((v, &b), &r) in data.iter_mut().zip(&bg).zip(&regions) {
            let signal = if lit.contains(&r) { spec.contrast } else { 0.0 };
            *v = (b + signal + noise.sample(&mut rng)) as f32;
        }
        volumes.insert(id.clone(), Volume::new(data, spec.spacing, id.clone())?);
    }
    let mask = Mask::new(regions.mapv(|r| u8::from(r == region::INTERIOR || r == region::RIM)))?;
    Ok(SynthCase {
        case: MultiModalCase::new(case_id(index), volumes, mask)?,
        regions,
        lesions,
        body_distractors,
        rim_distractors,
    })
}

/// Deterministic in `spec` alone; case `i` depends only on `(seed, i)`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthCase>> {
    spec.validate()?;
    (0..spec.num_cases).map(|i| generate_one(spec, i)).collect()
}

/// Applies the standard intensity preprocessing to every modality.
pub fn preprocess_case(case: &MultiModalCase) -> Result<MultiModalCase> {
    let volumes = case
        .volumes()
        .iter()
        .map(|(id, v)| Ok((id.clone(), preprocess(v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    MultiModalCase::new(case.case_id(), volumes, case.mask().clone())
}

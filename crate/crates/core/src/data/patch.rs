use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, MultiModalCase, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub size: [usize; 3],
    /// Probability of forcing the window onto a foreground voxel.
    #[serde(default = "default_bias")]
    pub foreground_bias: f64,
}

fn default_bias() -> f64 {
    0.5
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: [32; 3],
            foreground_bias: default_bias(),
        }
    }
}

impl PatchSpec {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return Err(Error::Config(format!(
                "foreground bias {} outside [0, 1]",
                self.foreground_bias
            )));
        }
        if self.size.iter().any(|&n| n == 0 || n % divisor != 0) {
            return Err(Error::Config(format!(
                "patch size {:?} must be positive multiples of {divisor}",
                self.size
            )));
        }
        Ok(())
    }
}

fn crop_array<A: Clone>(a: &Array3<A>, start: [usize; 3], size: [usize; 3]) -> Array3<A> {
    a.slice(s![
        start[0]..start[0] + size[0],
        start[1]..start[1] + size[1],
        start[2]..start[2] + size[2]
    ])
    .to_owned()
}

/// The same window cut from every modality and the mask.
pub fn crop(case: &MultiModalCase, start: [usize; 3], size: [usize; 3]) -> Result<MultiModalCase> {
    let shape = case.shape();
    if (0..3).any(|k| start[k] + size[k] > shape[k] || size[k] == 0) {
        return Err(Error::Shape(format!(
            "window {size:?} at {start:?} does not fit volume {shape:?}"
        )));
    }
    let volumes = case
        .volumes()
        .iter()
        .map(|(id, v)| Ok((id.clone(), Volume::new(crop_array(v.data(), start, size), v.spacing(), id.clone())?)))
        .collect::<Result<_>>()?;
    let mask = Mask::new(crop_array(case.mask().data(), start, size))?;
    MultiModalCase::new(case.case_id(), volumes, mask)
}

/// Draws a window start; with probability `foreground_bias` (and when the
/// case has any foreground) the window covers a random foreground voxel.
pub fn sample_start<R: Rng + ?Sized>(case: &MultiModalCase, spec: &PatchSpec, rng: &mut R) -> Result<[usize; 3]> {
    let shape = case.shape();
    if (0..3).any(|k| spec.size[k] > shape[k]) {
        return Err(Error::Shape(format!(
            "patch {:?} larger than volume {shape:?}",
            spec.size
        )));
    }
    let biased = rng.random::<f64>() < spec.foreground_bias;
    let anchor = if biased && !case.mask().is_empty() {
        let k = rng.random_range(0..case.mask().count());
        let (flat, _) = case.mask().as_slice().iter().enumerate().filter(|(_, &m)| m != 0).nth(k).unwrap();
        let (hw, w) = (shape[1] * shape[2], shape[2]);
        Some([flat / hw, flat % hw / w, flat % w])
    } else {
        None
    };
    Ok(std::array::from_fn(|k| {
        let (mut lo, mut hi) = (0, shape[k] - spec.size[k]);
        if let Some(a) = anchor {
            lo = lo.max((a[k] + 1).saturating_sub(spec.size[k]));
            hi = hi.min(a[k]);
        }
        rng.random_range(lo..=hi)
    }))
}

pub fn sample_patch<R: Rng + ?Sized>(case: &MultiModalCase, spec: &PatchSpec, rng: &mut R) -> Result<MultiModalCase> {
    let start = sample_start(case, spec, rng)?;
    crop(case, start, spec.size)
}

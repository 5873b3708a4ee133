//! Domain types shared by every stage: modalities, volumes, masks, cases and
//! probability maps.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Short tag naming an imaging modality or contrast phase, e.g. `AP` or `VP`.
///
/// Ordering is lexicographic; that order is the canonical modality order used
/// for channel concatenation and is recorded in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityId(String);

impl ModalityId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!(
                "modality tag `{name}` must be non-empty ASCII alphanumeric"
            )));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

pub(crate) fn shape3<A>(a: &Array3<A>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// A single-modality scalar image, indexed `[depth, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    modality: ModalityId,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], modality: ModalityId) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::Shape(format!(
                "volume dimensions must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::DataQuality(format!(
                "{modality} volume contains non-finite value {bad}"
            )));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            modality,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> &ModalityId {
        &self.modality
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.data)
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    /// Same grid and modality, new intensities.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        if shape3(&data) != self.shape() {
            return Err(Error::Shape("replacement data changes the grid".into()));
        }
        Volume::new(data, self.spacing, self.modality.clone())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape();
        let data = self.as_slice().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::from_vec([1, d, h, w], data).expect("volume tensor shape")
    }
}

/// Binary label volume: 0 background, 1 foreground (tumor).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    data: Array3<u8>,
}

impl Mask {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::DataQuality(format!("mask label {bad} is not in {{0, 1}}")));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    /// Thresholds any numeric volume at 0.5.
    pub fn from_f32(data: ArrayView3<'_, f32>) -> Self {
        Self {
            data: data.mapv(|v| u8::from(v >= 0.5)).as_standard_layout().into_owned(),
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        shape3(&self.data)
    }

    pub fn as_slice(&self) -> &[u8] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_f32(&self) -> Array3<f32> {
        self.data.mapv(f32::from)
    }
}

/// Aligned set of volumes (one per modality) with their ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalCase {
    case_id: String,
    volumes: BTreeMap<ModalityId, Volume>,
    mask: Mask,
}

impl MultiModalCase {
    /// Validates that every volume shares one grid with the mask.
    pub fn new(
        case_id: impl Into<String>,
        volumes: BTreeMap<ModalityId, Volume>,
        mask: Mask,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let Some(first) = volumes.values().next() else {
            return Err(Error::Empty(format!("case `{case_id}` has no volumes")));
        };
        for (id, vol) in &volumes {
            if vol.modality() != id {
                return Err(Error::Config(format!(
                    "volume tagged {} stored under key {id}",
                    vol.modality()
                )));
            }
            if vol.shape() != first.shape() || vol.spacing() != first.spacing() {
                return Err(Error::RegistrationRequired {
                    case_id,
                    detail: format!(
                        "{id} grid {:?} @ {:?} differs from {} grid {:?} @ {:?}",
                        vol.shape(),
                        vol.spacing(),
                        first.modality(),
                        first.shape(),
                        first.spacing()
                    ),
                });
            }
        }
        if mask.shape() != first.shape() {
            return Err(Error::RegistrationRequired {
                case_id,
                detail: format!(
                    "mask shape {:?} differs from volume shape {:?}",
                    mask.shape(),
                    first.shape()
                ),
            });
        }
        Ok(Self {
            case_id,
            volumes,
            mask,
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn volumes(&self) -> &BTreeMap<ModalityId, Volume> {
        &self.volumes
    }

    pub fn volume(&self, id: &ModalityId) -> Result<&Volume> {
        self.volumes
            .get(id)
            .ok_or_else(|| Error::UnknownModality(id.to_string()))
    }

    pub fn modalities(&self) -> Vec<ModalityId> {
        self.volumes.keys().cloned().collect()
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn shape(&self) -> [usize; 3] {
        self.mask.shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.volumes.values().next().expect("non-empty").spacing()
    }

    pub fn into_parts(self) -> (String, BTreeMap<ModalityId, Volume>, Mask) {
        (self.case_id, self.volumes, self.mask)
    }
}

/// Per-voxel two-class distribution (`2 x D x H x W`): channel 0 background,
/// channel 1 foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T = f32> {
    data: Tensor<T>,
}

impl<T: Real> ProbMap<T> {
    pub const CLASSES: usize = 2;

    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.channels() != Self::CLASSES {
            return Err(Error::Shape(format!(
                "probability map needs {} channels, got {}",
                Self::CLASSES,
                data.channels()
            )));
        }
        Ok(Self { data })
    }

    /// Checks that every voxel holds a distribution within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let bg = self.data.channel(0);
        let fg = self.data.channel(1);
        for (i, (&b, &f)) in bg.iter().zip(fg).enumerate() {
            let (b, f) = (b.as_f64(), f.as_f64());
            if !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&f) || ((b + f) - 1.0).abs() > tol {
                return Err(Error::DataQuality(format!(
                    "voxel {i} is not a distribution: ({b}, {f})"
                )));
            }
        }
        Ok(())
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.data.spatial()
    }

    pub fn foreground(&self) -> &[T] {
        self.data.channel(1)
    }

    /// Per-voxel argmax; ties resolve to background.
    pub fn argmax(&self) -> Mask {
        let labels: Vec<u8> = self
            .data
            .channel(0)
            .iter()
            .zip(self.data.channel(1))
            .map(|(&b, &f)| u8::from(f > b))
            .collect();
        let data = Array3::from_shape_vec(self.spatial(), labels).expect("prob map shape");
        Mask { data }
    }
}

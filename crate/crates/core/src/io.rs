//! Volume and mask files.
//!
//! Two formats are supported:
//!
//! - NIfTI-1 (`.nii`, `.nii.gz`), voxel spacing taken from `pixdim[1..=3]`.
//! - Raw: little-endian `f32` voxels in C order (`depth`, `height`, `width`,
//!   width fastest) in `<name>.raw`, with a JSON sidecar `<name>.json`:
//!
//!   ```json
//!   {"format": "maml-raw", "version": 1, "shape": [32, 32, 32],
//!    "spacing": [1.0, 1.0, 1.0], "modality": "AP"}
//!   ```
//!
//! Masks use the same formats with voxel values 0.0 / 1.0 (NIfTI masks are
//! stored as `u8`).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, ModalityId, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".raw") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::format(path, "unrecognised volume extension (want .nii, .nii.gz or .raw)"))
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Nifti => "nii.gz",
            VolumeFormat::Raw => "raw",
        }
    }
}

pub const RAW_FORMAT_TAG: &str = "maml-raw";
pub const RAW_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub format: String,
    pub version: u32,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub modality: String,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn write_raw(path: &Path, data: &Array3<f32>, spacing: [f64; 3], modality: &str) -> Result<()> {
    let s = data.shape();
    let meta = RawSidecar {
        format: RAW_FORMAT_TAG.into(),
        version: RAW_FORMAT_VERSION,
        shape: [s[0], s[1], s[2]],
        spacing,
        modality: modality.into(),
    };
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serialises");
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

fn read_raw(path: &Path) -> Result<(Array3<f32>, RawSidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RawSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e))?;
    if meta.format != RAW_FORMAT_TAG || meta.version != RAW_FORMAT_VERSION {
        return Err(Error::format(
            &side,
            format!("unsupported sidecar {} v{}", meta.format, meta.version),
        ));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for shape {:?}, found {}", n * 4, meta.shape, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec(meta.shape, values).expect("length checked");
    Ok((data, meta))
}

fn nifti_header(spacing: [f64; 3]) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim[1] = spacing[0] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header.pixdim[3] = spacing[2] as f32;
    header.xyzt_units = 2; // millimetres
    header
}

fn read_nifti(path: &Path) -> Result<(Array3<f32>, [f64; 3])> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e))?;
    let header = obj.header();
    let spacing = [
        header.pixdim[1] as f64,
        header.pixdim[2] as f64,
        header.pixdim[3] as f64,
    ];
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::format(path, e))?;
    let arr = match arr.ndim() {
        3 => arr,
        4 if arr.shape()[3] == 1 => arr.index_axis_move(ndarray::Axis(3), 0),
        n => return Err(Error::format(path, format!("expected a 3D volume, got {n} dimensions"))),
    };
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::format(path, e))?
        .as_standard_layout()
        .into_owned();
    Ok((arr, spacing))
}

pub fn write_volume(path: &Path, vol: &Volume, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Raw => write_raw(path, vol.data(), vol.spacing(), vol.modality().as_str()),
        VolumeFormat::Nifti => {
            let header = nifti_header(vol.spacing());
            WriterOptions::new(path)
                .reference_header(&header)
                .write_nifti(vol.data())
                .map_err(|e| nifti_write_error(path, e))
        }
    }
}

fn nifti_write_error(path: &Path, e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        other => Error::format(path, other),
    }
}

/// Reads a volume; for raw files the sidecar modality must equal `modality`.
pub fn read_volume(path: &Path, modality: &ModalityId) -> Result<Volume> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => {
            let (data, meta) = read_raw(path)?;
            if meta.modality != modality.as_str() {
                return Err(Error::format(
                    path,
                    format!("sidecar says modality {} but {modality} was expected", meta.modality),
                ));
            }
            Volume::new(data, meta.spacing, modality.clone())
        }
        VolumeFormat::Nifti => {
            let (data, spacing) = read_nifti(path)?;
            Volume::new(data, spacing, modality.clone())
        }
    }
}

pub const MASK_TAG: &str = "mask";

pub fn write_mask(path: &Path, mask: &Mask, spacing: [f64; 3], format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Raw => write_raw(path, &mask.to_f32(), spacing, MASK_TAG),
        VolumeFormat::Nifti => {
            let header = nifti_header(spacing);
            WriterOptions::new(path)
                .reference_header(&header)
                .write_nifti(mask.data())
                .map_err(|e| nifti_write_error(path, e))
        }
    }
}

/// Reads a binary mask; any voxel other than 0 or 1 is rejected.
pub fn read_mask(path: &Path) -> Result<(Mask, [f64; 3])> {
    let (data, spacing) = match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => {
            let (d, meta) = read_raw(path)?;
            (d, meta.spacing)
        }
        VolumeFormat::Nifti => read_nifti(path)?,
    };
    if let Some(bad) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::format(path, format!("mask value {bad} is not 0 or 1")));
    }
    Ok((Mask::new(data.mapv(|v| v as u8))?, spacing))
}

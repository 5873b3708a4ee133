use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::preprocess_case;
use crate::error::{Error, Result};
use crate::io::{read_mask, read_volume, write_mask, write_volume, VolumeFormat};
use crate::volume::{ModalityId, MultiModalCase};

const CASE_COLUMN: &str = "case_id";
const MASK_COLUMN: &str = "mask";
const LESIONS_COLUMN: &str = "lesions";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub volumes: BTreeMap<ModalityId, PathBuf>,
    pub mask: PathBuf,
    /// Number of lesions, when the producer knows it.
    pub lesions: Option<usize>,
}

/// Table mapping each case to its per-modality files and mask.
///
/// CSV columns: `case_id`, one column per modality, `mask`, and optionally
/// `lesions`. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub modalities: Vec<ModalityId>,
    pub entries: Vec<ManifestEntry>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_owned).collect();
        let has_lesions = header.last().map(String::as_str) == Some(LESIONS_COLUMN);
        let mask_col = header.len() - 1 - usize::from(has_lesions);
        if header.len() < 3 + usize::from(has_lesions) || header[0] != CASE_COLUMN || header[mask_col] != MASK_COLUMN {
            return Err(Error::format(
                path,
                format!("expected header `case_id,<modalities...>,mask[,lesions]`, got {header:?}"),
            ));
        }
        let modalities = header[1..mask_col]
            .iter()
            .map(|m| ModalityId::new(m.as_str()))
            .collect::<Result<Vec<_>>>()?;
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_err(path, e))?;
            let resolve = |i: usize| base.join(&record[i]);
            let lesions = if has_lesions {
                let raw = &record[header.len() - 1];
                Some(raw.parse().map_err(|_| Error::format(path, format!("bad lesion count `{raw}`")))?)
            } else {
                None
            };
            entries.push(ManifestEntry {
                case_id: record[0].to_owned(),
                volumes: modalities.iter().enumerate().map(|(i, m)| (m.clone(), resolve(i + 1))).collect(),
                mask: resolve(mask_col),
                lesions,
            });
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!("manifest {} lists no cases", path.display())));
        }
        Ok(Self { modalities, entries })
    }

    /// Writes paths relative to `path`'s directory where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        let with_lesions = self.entries.iter().all(|e| e.lesions.is_some());
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec![CASE_COLUMN.to_owned()];
        header.extend(self.modalities.iter().map(ToString::to_string));
        header.push(MASK_COLUMN.into());
        if with_lesions {
            header.push(LESIONS_COLUMN.into());
        }
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for e in &self.entries {
            let mut row = vec![e.case_id.clone()];
            for m in &self.modalities {
                let p = e.volumes.get(m).ok_or_else(|| Error::UnknownModality(m.to_string()))?;
                row.push(rel(p));
            }
            row.push(rel(&e.mask));
            if let (true, Some(n)) = (with_lesions, e.lesions) {
                row.push(n.to_string());
            }
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn entry(&self, case_id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.case_id == case_id)
            .ok_or_else(|| Error::Config(format!("unknown case id `{case_id}`")))
    }

    /// Loads and preprocesses every case, in manifest order, on the current
    /// rayon pool.
    pub fn load_all(&self) -> Result<Vec<MultiModalCase>> {
        self.entries.par_iter().map(|e| load_case(&e.case_id, &e.volumes, &e.mask)).collect()
    }
}

/// Reads a case without any intensity preprocessing.
pub fn load_case_raw(case_id: &str, paths: &BTreeMap<ModalityId, PathBuf>, mask_path: &Path) -> Result<MultiModalCase> {
    let volumes = paths
        .iter()
        .map(|(id, p)| Ok((id.clone(), read_volume(p, id)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let (mask, mask_spacing) = read_mask(mask_path)?;
    let case = MultiModalCase::new(case_id, volumes, mask)?;
    if case.spacing() != mask_spacing {
        return Err(Error::RegistrationRequired {
            case_id: case_id.into(),
            detail: format!("mask spacing {mask_spacing:?} differs from volume spacing {:?}", case.spacing()),
        });
    }
    Ok(case)
}

/// Reads a case and applies percentile clipping plus z-scoring per modality.
pub fn load_case(case_id: &str, paths: &BTreeMap<ModalityId, PathBuf>, mask_path: &Path) -> Result<MultiModalCase> {
    preprocess_case(&load_case_raw(case_id, paths, mask_path)?)
}

/// Writes cases as `<case>_<modality>` / `<case>_mask` files plus
/// `manifest.csv` in `dir`, returning the manifest.
pub fn write_dataset<'a>(
    dir: &Path,
    cases: impl IntoIterator<Item = (&'a MultiModalCase, Option<usize>)>,
    format: VolumeFormat,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = format.extension();
    let mut modalities: Option<Vec<ModalityId>> = None;
    let mut entries = Vec::new();
    for (case, lesions) in cases {
        let mods = case.modalities();
        match &modalities {
            Some(m) if *m != mods => {
                return Err(Error::Config(format!(
                    "case {} has modalities {mods:?}, expected {m:?}",
                    case.case_id()
                )))
            }
            _ => modalities = Some(mods),
        }
        let mut volumes = BTreeMap::new();
        for (id, vol) in case.volumes() {
            let p = dir.join(format!("{}_{id}.{ext}", case.case_id()));
            write_volume(&p, vol, format)?;
            volumes.insert(id.clone(), p);
        }
        let mask = dir.join(format!("{}_mask.{ext}", case.case_id()));
        write_mask(&mask, case.mask(), case.spacing(), format)?;
        entries.push(ManifestEntry {
            case_id: case.case_id().into(),
            volumes,
            mask,
            lesions,
        });
    }
    let manifest = Manifest {
        modalities: modalities.ok_or_else(|| Error::Empty("no cases to write".into()))?,
        entries,
    };
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

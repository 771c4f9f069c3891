//! `manifest.jsonl`: one JSON object per patient, paths relative to the
//! dataset root.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    /// Class index: benign 0, malignant 1.
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }
}

/// Resolved image (and optional mask) path of one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewFiles {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub transverse: Option<ViewFiles>,
    pub longitudinal: Option<ViewFiles>,
    pub label: Label,
}

impl PatientRecord {
    /// Transverse presence indicator.
    pub fn a(&self) -> u8 {
        self.transverse.is_some() as u8
    }

    /// Longitudinal presence indicator.
    pub fn b(&self) -> u8 {
        self.longitudinal.is_some() as u8
    }

    pub fn is_paired(&self) -> bool {
        self.transverse.is_some() && self.longitudinal.is_some()
    }

    pub fn num_views(&self) -> usize {
        (self.a() + self.b()) as usize
    }

    pub fn has_masks(&self) -> bool {
        [&self.transverse, &self.longitudinal]
            .into_iter()
            .flatten()
            .all(|v| v.mask.is_some())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    patient_id: String,
    transverse_path: Option<String>,
    longitudinal_path: Option<String>,
    label: Label,
    transverse_mask_path: Option<String>,
    longitudinal_mask_path: Option<String>,
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Writes `<root>/manifest.jsonl`.
pub fn write_manifest(root: impl AsRef<Path>, records: &[PatientRecord]) -> Result<()> {
    let root = root.as_ref();
    let path = root.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for r in records {
        let line = ManifestLine {
            patient_id: r.patient_id.clone(),
            transverse_path: r.transverse.as_ref().map(|v| relative(root, &v.image)),
            longitudinal_path: r.longitudinal.as_ref().map(|v| relative(root, &v.image)),
            label: r.label,
            transverse_mask_path: r.transverse.as_ref().and_then(|v| v.mask.as_ref()).map(|m| relative(root, m)),
            longitudinal_mask_path: r.longitudinal.as_ref().and_then(|v| v.mask.as_ref()).map(|m| relative(root, m)),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))
}

/// Reads a manifest (a file, or a dataset directory containing one).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(&file, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", file.display())))?;
        if !seen.insert(m.patient_id.clone()) {
            return Err(Error::Data(format!(
                "{}:{lineno}: duplicate patient_id {}",
                file.display(),
                m.patient_id
            )));
        }
        let resolve = |rel: &Option<String>| -> Result<Option<PathBuf>> {
            match rel {
                None => Ok(None),
                Some(r) => {
                    let p = root.join(r);
                    if !p.exists() {
                        return Err(Error::Data(format!(
                            "{}:{lineno}: missing referenced file {}",
                            file.display(),
                            p.display()
                        )));
                    }
                    Ok(Some(p))
                }
            }
        };
        let view = |img: &Option<String>, mask: &Option<String>| -> Result<Option<ViewFiles>> {
            match resolve(img)? {
                Some(image) => Ok(Some(ViewFiles { image, mask: resolve(mask)? })),
                None if mask.is_some() => Err(Error::Data(format!(
                    "{}:{lineno}: mask given for a missing view",
                    file.display()
                ))),
                None => Ok(None),
            }
        };
        let transverse = view(&m.transverse_path, &m.transverse_mask_path)?;
        let longitudinal = view(&m.longitudinal_path, &m.longitudinal_mask_path)?;
        if transverse.is_none() && longitudinal.is_none() {
            return Err(Error::Data(format!(
                "{}:{lineno}: patient {} has no views",
                file.display(),
                m.patient_id
            )));
        }
        records.push(PatientRecord {
            patient_id: m.patient_id,
            transverse,
            longitudinal,
            label: m.label,
        });
    }
    if records.is_empty() {
        log::warn!("manifest {} holds no records", file.display());
    }
    Ok(records)
}

/// One view's pixels and optional mask.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub image: GrayImage,
    pub mask: Option<GrayImage>,
}

/// A patient with images loaded into memory.
#[derive(Clone, Debug)]
pub struct Patient {
    pub id: String,
    pub label: Label,
    pub transverse: Option<ViewData>,
    pub longitudinal: Option<ViewData>,
}

impl Patient {
    pub fn is_paired(&self) -> bool {
        self.transverse.is_some() && self.longitudinal.is_some()
    }

    /// Present views, transverse first.
    pub fn views(&self) -> impl Iterator<Item = &ViewData> {
        self.transverse.iter().chain(self.longitudinal.iter())
    }
}

/// Loads every image referenced by `records`.
pub fn load_patients(records: &[PatientRecord]) -> Result<Vec<Patient>> {
    let load = |v: &Option<ViewFiles>| -> Result<Option<ViewData>> {
        v.as_ref()
            .map(|v| {
                Ok(ViewData {
                    image: GrayImage::load_png(&v.image)?,
                    mask: v.mask.as_ref().map(GrayImage::load_mask_png).transpose()?,
                })
            })
            .transpose()
    };
    records
        .iter()
        .map(|r| {
            Ok(Patient {
                id: r.patient_id.clone(),
                label: r.label,
                transverse: load(&r.transverse)?,
                longitudinal: load(&r.longitudinal)?,
            })
        })
        .collect()
}

//! Datasets: the synthetic generator, manifest I/O, splits and batching.

pub mod manifest;
pub mod sampler;
pub mod splits;
pub mod synthetic;

pub use manifest::{load_manifest, load_patients, write_manifest, Label, Patient, PatientRecord, ViewData, ViewFiles, MANIFEST_FILE};
pub use sampler::batch_sampler;
pub use splits::{make_splits, SplitPlan, Splits, PROPORTIONS};
pub use synthetic::{generate_synthetic, label_rule, synthesize_patient, GenerationSummary, NoduleLatent, View};

use std::path::{Path, PathBuf};

use crate::error::Result;

/// Records plus loaded pixels of a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<PatientRecord>,
    pub patients: Vec<Patient>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let records = load_manifest(&root)?;
        let patients = load_patients(&records)?;
        Ok(Dataset { root, records, patients })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// SHA-256 of the manifest bytes, hex encoded.
    pub fn manifest_hash(&self) -> Result<String> {
        let path = self.root.join(manifest::MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| crate::error::Error::io(&path, e))?;
        Ok(crate::analysis::sha256_hex(&bytes))
    }
}

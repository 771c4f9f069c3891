//! Run configuration: every module config under its own TOML section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{sha256_hex, ActivationMapConfig};
use crate::augment::AugmentSpec;
use crate::data::SplitPlan;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::models::EncoderConfig;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. When set it replaces the pre-training and fine-tuning
    /// seeds; splits always derive from `split_seed`.
    pub seed: Option<u64>,
    pub split_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub augment: AugmentSpec,
    pub splits: SplitPlan,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub activation: ActivationMapConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Copy with the root seed pushed into the section seeds.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.pretrain.seed = s;
            c.finetune.seed = s;
        }
        c
    }

    /// Every violation in every section, prefixed with the section name.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut section = |name: &str, r: Result<()>| {
            match r {
                Ok(()) => {}
                Err(Error::Config(m)) => out.push(format!("[{name}] {m}")),
                Err(e) => out.push(format!("[{name}] {e}")),
            }
        };
        section("encoder", self.encoder.validate());
        section("augment", self.augment.validate());
        section("activation", self.activation.validate());
        out.extend(self.pretrain.problems().into_iter().map(|p| format!("[pretrain] {p}")));
        out.extend(self.finetune.problems().into_iter().map(|p| format!("[finetune] {p}")));
        if !self.splits.proportions.contains(&self.finetune.proportion) {
            out.push(format!(
                "[finetune] proportion {} is not one of the split proportions {:?}",
                self.finetune.proportion, self.splits.proportions
            ));
        }
        if self.augment.output_size != self.encoder.input_size {
            out.push(format!(
                "[augment] output_size {} differs from encoder input_size {}",
                self.augment.output_size, self.encoder.input_size
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("\n")))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

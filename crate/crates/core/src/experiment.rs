//! Desk-scale protocol shared by the examples and the acceptance suite:
//! generate a synthetic cohort, pre-train, fine-tune, score on the test split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{mean_actmap_dice, ActivationMapConfig};
use crate::augment::AugmentSpec;
use crate::data::{generate_synthetic, make_splits, Dataset, SplitPlan, Splits};
use crate::error::Result;
use crate::finetune::{evaluate, run_finetune, FinetuneConfig, FinetuneOutcome};
use crate::image::GrayImage;
use crate::models::{Checkpoint, EncoderConfig};
use crate::pretrain::{run_pretraining, PretrainConfig, RunOutputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub patients: usize,
    pub missing_rate: f32,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            patients: 400,
            missing_rate: 0.15,
            image_size: 32,
            seed: 7,
        }
    }
}

/// A loaded cohort and its splits.
pub struct Cohort {
    pub data: Dataset,
    pub splits: Splits,
}

impl Cohort {
    /// Generates the cohort under `dir` (reusing it if already present) and
    /// splits it with `plan`.
    pub fn create(dir: impl AsRef<Path>, spec: &CohortSpec, plan: &SplitPlan) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.join(crate::data::manifest::MANIFEST_FILE).exists() {
            generate_synthetic(dir, spec.patients, spec.missing_rate, spec.image_size, spec.seed)?;
        }
        let data = Dataset::load(dir)?;
        let splits = make_splits(&data.records, plan, spec.seed)?;
        Ok(Cohort { data, splits })
    }

    /// Pre-trains on the train+validation pool plus `cfg.unpaired_fraction`
    /// of the unpaired patients.
    pub fn pretrain(&self, cfg: &PretrainConfig, encoder: &EncoderConfig, augment: &AugmentSpec) -> Result<Checkpoint> {
        let pool = self.splits.pretrain(cfg.unpaired_fraction);
        let out = run_pretraining(cfg, encoder, augment, &self.data.patients, &pool, &RunOutputs::default())?;
        Ok(out.checkpoint())
    }

    pub fn finetune(
        &self,
        cfg: &FinetuneConfig,
        encoder: &EncoderConfig,
        augment: &AugmentSpec,
        init: Option<&Checkpoint>,
    ) -> Result<FinetuneOutcome> {
        run_finetune(cfg, encoder, augment, &self.data.patients, &self.splits, init)
    }

    /// Fine-tunes and returns the test-split metric of the best-validation
    /// weights.
    pub fn finetune_test_metric(
        &self,
        cfg: &FinetuneConfig,
        encoder: &EncoderConfig,
        augment: &AugmentSpec,
        init: Option<&Checkpoint>,
    ) -> Result<f64> {
        let out = self.finetune(cfg, encoder, augment, init)?;
        evaluate(&out.model, &self.data.patients, &self.splits.test)
    }

    /// Test-split views that carry masks, as `(image, mask)` lists.
    pub fn test_views_with_masks(&self) -> (Vec<GrayImage>, Vec<GrayImage>) {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for &i in &self.splits.test {
            for v in self.data.patients[i].views() {
                if let Some(m) = &v.mask {
                    images.push(v.image.clone());
                    masks.push(m.clone());
                }
            }
        }
        (images, masks)
    }

    /// Mean activation-map Dice per threshold of a checkpoint's backbone on
    /// the test split.
    pub fn actmap_dice(&self, ckpt: &Checkpoint, encoder: &EncoderConfig, config: &ActivationMapConfig) -> Result<Vec<f64>> {
        let (arch, mut store) = crate::models::EncoderArch::build(encoder, 0)?;
        ckpt.verify(encoder.fingerprint(), false)?;
        ckpt.load_into(&mut store, "", "backbone.")?;
        let (images, masks) = self.test_views_with_masks();
        mean_actmap_dice(&arch.backbone, &store, &images, &masks, config)
    }
}

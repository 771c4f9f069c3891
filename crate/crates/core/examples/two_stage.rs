//! Two-stage pre-training: a single-view stage on paired patients only
//! (lambda = 0, no unpaired data), then the multi-view stage initialized
//! from it. Fine-tunes NC from both checkpoints.
//!
//! cargo run --release --example two_stage -- [epochs per stage] [seed]

use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::data::SplitPlan;
use multiview_ssl::experiment::{Cohort, CohortSpec};
use multiview_ssl::finetune::FinetuneConfig;
use multiview_ssl::models::EncoderConfig;
use multiview_ssl::pretrain::PretrainConfig;

fn main() -> multiview_ssl::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let dir = std::env::temp_dir().join("mvssl-example-cohort");
    let cohort = Cohort::create(&dir, &CohortSpec::default(), &SplitPlan::default())?;
    let encoder = EncoderConfig::desk();
    let augment = AugmentSpec::default();

    let stage1_cfg = PretrainConfig { epochs, seed, lambda: 0.0, unpaired_fraction: 0.0, ..Default::default() };
    let stage1 = cohort.pretrain(&stage1_cfg, &encoder, &augment)?;
    let path = std::env::temp_dir().join("mvssl-example-stage1.ckpt");
    stage1.save(&path)?;

    let mut stage2_cfg = PretrainConfig { epochs, seed, init_checkpoint: Some(path), ..Default::default() };
    stage2_cfg.two_stage.bank_size = 256;
    let stage2 = cohort.pretrain(&stage2_cfg, &encoder, &augment)?;

    let ft = FinetuneConfig { seed, ..Default::default() };
    let a = cohort.finetune_test_metric(&ft, &encoder, &augment, Some(&stage1))?;
    let b = cohort.finetune_test_metric(&ft, &encoder, &augment, Some(&stage2))?;
    println!("stage 1 only   NC AUC {:.2}", 100.0 * a);
    println!("stage 1 -> 2   NC AUC {:.2}", 100.0 * b);
    Ok(())
}

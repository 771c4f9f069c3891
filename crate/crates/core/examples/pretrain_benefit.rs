//! Fine-tunes nodule classification on 10% of the labels from a random
//! initialization and from a multi-view pre-trained checkpoint, and prints
//! the test AUC of both.
//!
//! cargo run --release --example pretrain_benefit -- [seeds] [pretrain epochs]

use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::data::SplitPlan;
use multiview_ssl::experiment::{Cohort, CohortSpec};
use multiview_ssl::finetune::FinetuneConfig;
use multiview_ssl::models::EncoderConfig;
use multiview_ssl::pretrain::PretrainConfig;

fn main() -> multiview_ssl::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(30);

    let dir = std::env::temp_dir().join("mvssl-example-cohort");
    let cohort = Cohort::create(&dir, &CohortSpec::default(), &SplitPlan::default())?;
    let encoder = EncoderConfig::desk();
    let augment = AugmentSpec::default();
    for seed in 0..seeds {
        let t = std::time::Instant::now();
        let ckpt = cohort.pretrain(&PretrainConfig { epochs, seed, ..Default::default() }, &encoder, &augment)?;
        let pre_time = t.elapsed();
        let ft = FinetuneConfig { seed, ..Default::default() };
        let random = cohort.finetune_test_metric(&ft, &encoder, &augment, None)?;
        let pretrained = cohort.finetune_test_metric(&ft, &encoder, &augment, Some(&ckpt))?;
        println!(
            "seed {seed}: random {:.2}  pretrained {:.2}  (pretrain {:.0?}, total {:.0?})",
            100.0 * random,
            100.0 * pretrained,
            pre_time,
            t.elapsed()
        );
    }
    Ok(())
}

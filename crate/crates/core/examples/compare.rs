//! Repeats NC fine-tuning over several seeds from random and from
//! pre-trained initializations and compares the two with a paired t-test.
//!
//! cargo run --release --example compare -- [seeds] [pretrain epochs]

use multiview_ssl::analysis::MetricsReport;
use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::data::SplitPlan;
use multiview_ssl::experiment::{Cohort, CohortSpec};
use multiview_ssl::finetune::FinetuneConfig;
use multiview_ssl::models::EncoderConfig;
use multiview_ssl::pretrain::PretrainConfig;

fn main() -> multiview_ssl::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);

    let dir = std::env::temp_dir().join("mvssl-example-cohort");
    let cohort = Cohort::create(&dir, &CohortSpec::default(), &SplitPlan::default())?;
    let encoder = EncoderConfig::desk();
    let augment = AugmentSpec::default();
    let (mut random, mut pretrained) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let ckpt = cohort.pretrain(&PretrainConfig { epochs, seed, ..Default::default() }, &encoder, &augment)?;
        let ft = FinetuneConfig { seed, ..Default::default() };
        random.push(cohort.finetune_test_metric(&ft, &encoder, &augment, None)?);
        pretrained.push(cohort.finetune_test_metric(&ft, &encoder, &augment, Some(&ckpt))?);
        println!("seed {seed}: random {:.4}  pretrained {:.4}", random[seed as usize], pretrained[seed as usize]);
    }
    let hash = cohort.data.manifest_hash()?;
    let baseline = MetricsReport::new("nc", "auc", random, String::new(), hash.clone());
    let mut report = MetricsReport::new("nc", "auc", pretrained, String::new(), hash);
    let t = report.compare(&baseline)?;
    println!("mean {:.4} vs {:.4}: t = {:.3}, dof {}, p = {:.4}", report.mean, baseline.mean, t.t, t.dof, t.p);
    Ok(())
}

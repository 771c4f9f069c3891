//! Layer-wise CKA between a randomly initialized and a pre-trained encoder
//! on the test images, written as CSV and a heat-map PNG.
//!
//! cargo run --release --example cka -- [pretrain epochs] [out dir]

use multiview_ssl::analysis::checkpoint_cka;
use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::data::SplitPlan;
use multiview_ssl::experiment::{Cohort, CohortSpec};
use multiview_ssl::models::EncoderConfig;
use multiview_ssl::pretrain::{PretrainConfig, TrainState};

fn main() -> multiview_ssl::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mvssl-example-cka"));
    std::fs::create_dir_all(&out).map_err(|e| multiview_ssl::Error::io(&out, e))?;

    let dir = std::env::temp_dir().join("mvssl-example-cohort");
    let cohort = Cohort::create(&dir, &CohortSpec::default(), &SplitPlan::default())?;
    let encoder = EncoderConfig::desk();
    let cfg = PretrainConfig { epochs, ..Default::default() };
    let random = TrainState::new(&encoder, &cfg)?.to_checkpoint();
    let trained = cohort.pretrain(&cfg, &encoder, &AugmentSpec::default())?;

    let (images, _) = cohort.test_views_with_masks();
    let grid = checkpoint_cka(&encoder, &random, &trained, &images[..images.len().min(256)])?;
    for row in &grid.scores {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("{}", cells.join("  "));
    }
    grid.write_csv(out.join("cka.csv"))?;
    grid.write_png(out.join("cka.png"), 16)?;
    println!("grid in {}", out.display());
    Ok(())
}

//! Generates a small synthetic dataset and pre-trains the multi-view encoder
//! on it, printing the per-epoch loss.
//!
//! cargo run --release --example pretrain -- [epochs] [patients]

use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::data::{generate_synthetic, make_splits, Dataset, SplitPlan};
use multiview_ssl::models::EncoderConfig;
use multiview_ssl::pretrain::{run_pretraining, PretrainConfig, RunOutputs};

fn main() -> multiview_ssl::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let patients = args.next().and_then(|a| a.parse().ok()).unwrap_or(120);

    let dir = std::env::temp_dir().join("mvssl-example-pretrain");
    let _ = std::fs::remove_dir_all(&dir);
    generate_synthetic(&dir, patients, 0.15, 32, 7)?;
    let data = Dataset::load(&dir)?;
    let splits = make_splits(&data.records, &SplitPlan::default(), 7)?;

    let cfg = PretrainConfig { epochs, ..Default::default() };
    let encoder = EncoderConfig::desk();
    let start = std::time::Instant::now();
    let out = run_pretraining(
        &cfg,
        &encoder,
        &AugmentSpec::default(),
        &data.patients,
        &splits.pretrain(cfg.unpaired_fraction),
        &RunOutputs::default(),
    )?;
    for e in &out.history {
        println!("epoch {:>3}  loss {:.4}  lr {:.4}  bank {}", e.epoch, e.mean_loss, e.lr, e.bank_occupancy);
    }
    println!("{} steps in {:.1?}", out.state.step, start.elapsed());
    Ok(())
}

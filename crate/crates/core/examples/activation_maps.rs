//! Pre-trains briefly, then scores channel-mean activation maps against the
//! nodule masks of the test split over a threshold sweep and saves a few
//! maps as PNGs.
//!
//! cargo run --release --example activation_maps -- [pretrain epochs] [out dir]

use multiview_ssl::analysis::{activation_maps, ActivationMapConfig};
use multiview_ssl::augment::AugmentSpec;
use multiview_ssl::data::SplitPlan;
use multiview_ssl::experiment::{Cohort, CohortSpec};
use multiview_ssl::models::{EncoderArch, EncoderConfig};
use multiview_ssl::pretrain::PretrainConfig;

fn main() -> multiview_ssl::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mvssl-example-actmap"));
    std::fs::create_dir_all(&out).map_err(|e| multiview_ssl::Error::io(&out, e))?;

    let dir = std::env::temp_dir().join("mvssl-example-cohort");
    let cohort = Cohort::create(&dir, &CohortSpec::default(), &SplitPlan::default())?;
    let encoder = EncoderConfig::desk();
    let config = ActivationMapConfig::default();
    let ckpt = cohort.pretrain(&PretrainConfig { epochs, ..Default::default() }, &encoder, &AugmentSpec::default())?;

    let dice = cohort.actmap_dice(&ckpt, &encoder, &config)?;
    println!("threshold  dice");
    for (t, d) in config.thresholds.iter().zip(&dice) {
        println!("{t:<9}  {d:.4}");
    }

    let (arch, mut store) = EncoderArch::build(&encoder, 0)?;
    ckpt.load_into(&mut store, "", "backbone.")?;
    let (images, masks) = cohort.test_views_with_masks();
    let maps = activation_maps(&arch.backbone, &store, &images[..4.min(images.len())], &config)?;
    for (i, m) in maps.iter().enumerate() {
        images[i].save_png(out.join(format!("{i}-image.png")))?;
        masks[i].save_png(out.join(format!("{i}-mask.png")))?;
        m.map.save_png(out.join(format!("{i}-map.png")))?;
    }
    println!("maps in {}", out.display());
    Ok(())
}

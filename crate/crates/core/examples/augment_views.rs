//! Saves one synthetic patient's views next to several pre-training
//! augmentations of each, as PNGs.
//!
//! cargo run --release --example augment_views -- [out dir] [draws]

use multiview_ssl::augment::{augment_pretrain, sample_stream, AugmentSpec};
use multiview_ssl::data::{label_rule, synthesize_patient, View};

fn main() -> multiview_ssl::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mvssl-example-augment"));
    let draws: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    std::fs::create_dir_all(&out).map_err(|e| multiview_ssl::Error::io(&out, e))?;

    let patient = synthesize_patient(0, 0.0, 64, 3);
    let spec = AugmentSpec { output_size: 64, ..AugmentSpec::default() };
    let views = [(View::Transverse, &patient.transverse), (View::Longitudinal, &patient.longitudinal)];
    for (view, v) in views {
        let Some((image, mask)) = v else { continue };
        let name = view.suffix();
        mask.save_png(out.join(format!("{name}-mask.png")))?;
        image.save_png(out.join(format!("{name}.png")))?;
        for d in 0..draws {
            let aug = augment_pretrain(image, &spec, &mut sample_stream(0, 0, 0, view.index() as u64, d));
            aug.save_png(out.join(format!("{name}-aug{d}.png")))?;
        }
    }
    let l = &patient.latent;
    println!("label {:?}; images in {}", label_rule(l.irregularity, l.semi_axial, l.semi_depth), out.display());
    Ok(())
}

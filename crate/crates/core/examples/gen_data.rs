//! Writes a synthetic two-view cohort to disk and reports its composition.
//!
//! cargo run --release --example gen_data -- [out dir] [patients] [missing rate]

use multiview_ssl::data::{load_manifest, Label};

fn main() -> multiview_ssl::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mvssl-example-gen"));
    let patients = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let missing = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.15);

    let _ = std::fs::remove_dir_all(&out);
    let (_, summary) = multiview_ssl::data::generate_synthetic(&out, patients, missing, 32, 7)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let records = load_manifest(&out)?;
    let mut counts = [[0usize; 3]; 2];
    for r in &records {
        let label = usize::from(r.label == Label::Malignant);
        let kind = match (r.a(), r.b()) {
            (1, 1) => 0,
            (1, 0) => 1,
            _ => 2,
        };
        counts[label][kind] += 1;
    }
    println!("           paired  transverse-only  longitudinal-only");
    for (name, row) in ["benign", "malignant"].iter().zip(counts) {
        println!("{name:<10} {:>6}  {:>15}  {:>17}", row[0], row[1], row[2]);
    }
    println!("written to {}", out.display());
    Ok(())
}

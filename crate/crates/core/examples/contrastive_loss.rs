//! Evaluates the view-adaptive contrastive loss on hand-made latents for a
//! paired patient and for each single-view case, across several lambda.
//!
//! cargo run --release --example contrastive_loss

use multiview_ssl::backend::{Tape, Tensor};
use multiview_ssl::contrastive::{adaptive_loss, pair_loss, ContrastiveConfig, Negatives, ViewLatents};

fn unit(v: &[f32]) -> Tensor {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    Tensor::new(vec![1, v.len()], v.iter().map(|x| x / n).collect()).unwrap()
}

fn main() -> multiview_ssl::Result<()> {
    let f = (unit(&[1.0, 0.2, 0.0]), unit(&[0.9, 0.3, 0.1]));
    let g = (unit(&[0.8, 0.0, 0.4]), unit(&[0.7, 0.1, 0.5]));
    let bank = Tensor::stack(&[unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0]), unit(&[-1.0, 0.0, 0.0])])?;
    let bank = bank.reshape(vec![3, 3])?;

    let loss = |has_f: bool, has_g: bool, lambda: f32| -> multiview_ssl::Result<f32> {
        let mut t = Tape::new();
        let neg = Negatives::new(&mut t, &bank)?;
        let fv = has_f.then(|| (t.constant(f.0.clone()), t.constant(f.1.clone())));
        let gv = has_g.then(|| (t.constant(g.0.clone()), t.constant(g.1.clone())));
        let l = adaptive_loss(&mut t, &ViewLatents::new(fv, gv), &neg, &ContrastiveConfig { tau: 0.1, lambda })?;
        Ok(t.value(l).item())
    };

    println!("lambda   paired  transverse  longitudinal");
    for lambda in [0.0, 0.25, 0.5, 1.0] {
        println!(
            "{lambda:<6} {:>8.4}  {:>10.4}  {:>12.4}",
            loss(true, true, lambda)?,
            loss(true, false, lambda)?,
            loss(false, true, lambda)?
        );
    }

    let mut t = Tape::new();
    let neg = Negatives::new(&mut t, &bank)?;
    let lat = ViewLatents::new(
        Some((t.constant(f.0.clone()), t.constant(f.1.clone()))),
        Some((t.constant(g.0.clone()), t.constant(g.1.clone()))),
    );
    let p = pair_loss(&mut t, &lat, &neg, 0.1)?;
    println!("pair loss {:.4} (the lambda = 1 paired value)", t.value(p).item());
    Ok(())
}

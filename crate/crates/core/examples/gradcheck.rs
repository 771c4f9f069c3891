//! Checks tape gradients of a small convolution / batch-norm / pooling
//! chain against central differences, for the input and for the weights.
//!
//! cargo run --release --example gradcheck

use multiview_ssl::backend::{grad_check, BnMode, Tape, Tensor};
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = multiview_ssl::rng::stream(seed, "example-gradcheck", &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn main() -> multiview_ssl::Result<()> {
    let x = random(&[2, 2, 6, 6], 1);
    let w = random(&[3, 2, 3, 3], 2);
    let gamma = random(&[3], 3);
    let beta = random(&[3], 4);
    let head = random(&[3, 1], 5);

    // conv -> batch norm -> sigmoid -> global pool -> linear, summed.
    let chain = |t: &mut Tape, x: multiview_ssl::backend::Var, w: multiview_ssl::backend::Var| {
        let (g, b, h) = (t.constant(gamma.clone()), t.constant(beta.clone()), t.constant(head.clone()));
        let y = t.conv2d(x, w, None, 1, 1)?;
        let (y, _) = t.batch_norm(y, g, b, BnMode::Train, 1e-5)?;
        let y = t.sigmoid(y);
        let y = t.global_avg_pool(y)?;
        let y = t.matmul(y, h, false)?;
        Ok(t.sum(y))
    };

    let wrt_input = grad_check(
        |t, v| {
            let wv = t.constant(w.clone());
            chain(t, v, wv)
        },
        &x,
        1e-2,
    )?;
    let wrt_weight = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            chain(t, xv, v)
        },
        &w,
        1e-2,
    )?;
    println!("max relative error wrt input  {wrt_input:.2e}");
    println!("max relative error wrt weight {wrt_weight:.2e}");
    Ok(())
}

//! Linear centered kernel alignment between layer representations.

use std::io::Write;
use std::path::Path;

use crate::augment::normalize;
use crate::backend::Tensor;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::models::{probe_features, Checkpoint, EncoderArch, EncoderConfig};

/// Column-centered copy of a `[n, p]` matrix in `f64`, or `None` when every
/// column is constant.
fn centered(x: &[f32], n: usize, p: usize) -> Option<Vec<f64>> {
    let mut out: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut any_variance = false;
    for j in 0..p {
        let mean = (0..n).map(|i| out[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            let v = out[i * p + j] - mean;
            any_variance |= v != 0.0;
            out[i * p + j] = v;
        }
    }
    any_variance.then_some(out)
}

/// `X X^T` for a row-major `[n, p]` matrix.
fn gram(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        let xi = &x[i * p..(i + 1) * p];
        for j in i..n {
            let xj = &x[j * p..(j + 1) * p];
            let v: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Samples along the first axis, every other axis flattened.
fn as_matrix(x: &Tensor) -> Result<(usize, usize)> {
    let n = *x.shape().first().ok_or_else(|| Error::InvalidArgument("cka input has rank 0".into()))?;
    if n == 0 {
        return Err(Error::InvalidArgument("cka input has no samples".into()));
    }
    Ok((n, x.len() / n))
}

/// `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`, evaluated through the
/// sample Gram matrices.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p) = as_matrix(x)?;
    let (m, q) = as_matrix(y)?;
    if n != m {
        return Err(Error::shape("linear_cka samples", &[n], &[m]));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("linear_cka needs at least two samples".into()));
    }
    let xc = centered(x.data(), n, p).ok_or_else(|| Error::Degenerate("cka: X has zero variance".into()))?;
    let yc = centered(y.data(), n, q).ok_or_else(|| Error::Degenerate("cka: Y has zero variance".into()))?;
    let k = gram(&xc, n, p);
    let l = gram(&yc, n, q);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let hsic = dot(&k, &l);
    let denom = dot(&k, &k).sqrt() * dot(&l, &l).sqrt();
    if !(denom > 0.0) {
        return Err(Error::Degenerate("cka: zero normalization".into()));
    }
    Ok((hsic / denom).clamp(0.0, 1.0))
}

/// Square grid of CKA scores, `scores[i][j]` comparing layer `i` of the
/// first model with layer `j` of the second.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaGrid {
    pub scores: Vec<Vec<f64>>,
}

impl CkaGrid {
    pub fn diagonal(&self) -> Vec<f64> {
        self.scores.iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let n = self.scores.first().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("layer".to_string())
            .chain((0..n).map(|j| format!("b{j}")))
            .collect();
        writeln!(out, "{}", header.join(",")).expect("vec write");
        for (i, row) in self.scores.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "a{i},{}", cells.join(",")).expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Grayscale heatmap, `cell` pixels per entry, bright for high scores.
    /// Row 0 is at the bottom so the diagonal rises to the right.
    pub fn write_png(&self, path: impl AsRef<Path>, cell: usize) -> Result<()> {
        let rows = self.scores.len();
        let cols = self.scores.first().map_or(0, Vec::len);
        let img = GrayImage::from_fn(cols * cell, rows * cell, |x, y| {
            let i = rows - 1 - y / cell;
            self.scores[i][x / cell] as f32
        });
        img.save_png(path)
    }
}

/// CKA between every pair of layers of two models over the same probe set.
pub fn cka_map(layers_a: &[Tensor], layers_b: &[Tensor]) -> Result<CkaGrid> {
    if layers_a.len() != layers_b.len() {
        return Err(Error::shape("cka_map layers", &[layers_a.len()], &[layers_b.len()]));
    }
    for (a, b) in layers_a.iter().zip(layers_b) {
        if a.shape() != b.shape() {
            return Err(Error::shape("cka_map layer", a.shape(), b.shape()));
        }
    }
    let scores = layers_a
        .iter()
        .map(|a| layers_b.iter().map(|b| linear_cka(a, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaGrid { scores })
}

/// Probe-layer tensors (stem, every block, pooled) of a checkpoint's
/// backbone over raw images, standardized as in training.
pub fn checkpoint_layers(encoder: &EncoderConfig, ckpt: &Checkpoint, images: &[GrayImage]) -> Result<Vec<Tensor>> {
    ckpt.verify(encoder.fingerprint(), false)?;
    let (arch, mut store) = EncoderArch::build(encoder, 0)?;
    ckpt.load_into(&mut store, "", "backbone.")?;
    let normalized: Vec<GrayImage> = images.iter().map(|i| normalize(i).0).collect();
    probe_features(&arch.backbone, &store, &GrayImage::batch(&normalized)?)
}

/// Layer-by-layer CKA grid between two checkpoints of the same architecture.
pub fn checkpoint_cka(encoder: &EncoderConfig, a: &Checkpoint, b: &Checkpoint, images: &[GrayImage]) -> Result<CkaGrid> {
    let la = checkpoint_layers(encoder, a, images)?;
    let lb = checkpoint_layers(encoder, b, images)?;
    cka_map(&la, &lb)
}

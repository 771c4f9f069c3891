//! Stochastic augmentation pipelines and per-image intensity normalization.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backend::kernels::bilinear_resize;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::{self, Rng};

/// Parameter ranges for both pipelines. Ranges are `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Fraction of the image area kept by the random resized crop.
    pub crop_scale: [f32; 2],
    /// Aspect ratio range of the crop window.
    pub crop_ratio: [f32; 2],
    pub output_size: usize,
    /// Additive brightness offset.
    pub brightness: [f32; 2],
    /// Multiplicative contrast factor around the image mean.
    pub contrast: [f32; 2],
    pub blur_sigma: [f32; 2],
    pub blur_prob: f32,
    pub flip_prob: f32,
    pub rotation_deg: [f32; 2],
    /// Translation as a fraction of the image side (fine-tuning only).
    pub translate_frac: [f32; 2],
    /// Isotropic scale (fine-tuning only).
    pub scale: [f32; 2],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            crop_scale: [0.6, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            output_size: 32,
            brightness: [-0.2, 0.2],
            contrast: [0.8, 1.25],
            blur_sigma: [0.1, 1.5],
            blur_prob: 0.5,
            flip_prob: 0.5,
            rotation_deg: [-15.0, 15.0],
            translate_frac: [-0.1, 0.1],
            scale: [0.9, 1.1],
        }
    }
}

impl AugmentSpec {
    /// Every transform disabled or set to its identity.
    pub fn identity(output_size: usize) -> Self {
        AugmentSpec {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            output_size,
            brightness: [0.0, 0.0],
            contrast: [1.0, 1.0],
            blur_sigma: [0.1, 0.1],
            blur_prob: 0.0,
            flip_prob: 0.0,
            rotation_deg: [0.0, 0.0],
            translate_frac: [0.0, 0.0],
            scale: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("crop_scale", self.crop_scale),
            ("crop_ratio", self.crop_ratio),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("blur_sigma", self.blur_sigma),
            ("rotation_deg", self.rotation_deg),
            ("translate_frac", self.translate_frac),
            ("scale", self.scale),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("augment.{name}: range [{lo}, {hi}] is not ordered")));
            }
        }
        for (name, p) in [("blur_prob", self.blur_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not a probability")));
            }
        }
        let positive = [
            self.crop_scale[0] > 0.0 && self.crop_scale[1] <= 1.0,
            self.crop_ratio[0] > 0.0,
            self.contrast[0] > 0.0,
            self.blur_sigma[0] > 0.0,
            self.scale[0] > 0.0,
            self.output_size > 0,
        ];
        if positive.contains(&false) {
            return Err(Error::Config("augment: scales, ratios, sigmas and sizes must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, [lo, hi]: [f32; 2]) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Stream for one augmented draw of one image.
pub fn sample_stream(seed: u64, epoch: u64, sample: u64, view: u64, version: u64) -> Rng {
    rng::stream(seed, "augment", &[epoch, sample, view, version])
}

/// Bilinear sample at continuous pixel coordinates; outside reads `fill`.
fn sample_bilinear(img: &GrayImage, x: f32, y: f32, fill: f32) -> f32 {
    let (w, h) = (img.width() as f32, img.height() as f32);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return fill;
    }
    let xc = x.clamp(0.0, w - 1.0);
    let yc = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (tx, ty) = (xc - x0 as f32, yc - y0 as f32);
    let top = img.get(x0, y0) * (1.0 - tx) + img.get(x1, y0) * tx;
    let bot = img.get(x0, y1) * (1.0 - tx) + img.get(x1, y1) * tx;
    top * (1.0 - ty) + bot * ty
}

fn sample_nearest(img: &GrayImage, x: f32, y: f32) -> f32 {
    let (xi, yi) = (x.round(), y.round());
    if xi < 0.0 || yi < 0.0 || xi >= img.width() as f32 || yi >= img.height() as f32 {
        return 0.0;
    }
    img.get(xi as usize, yi as usize)
}

/// Mirrors columns: pixel `(x, y)` moves to `(w - 1 - x, y)`.
pub fn hflip(img: &GrayImage) -> GrayImage {
    let w = img.width();
    GrayImage::from_fn(w, img.height(), |x, y| img.get(w - 1 - x, y))
}

fn crop_resize(img: &GrayImage, x0: usize, y0: usize, cw: usize, ch: usize, out: usize) -> GrayImage {
    let mut region = Vec::with_capacity(cw * ch);
    for y in y0..y0 + ch {
        region.extend_from_slice(&img.data()[y * img.width() + x0..y * img.width() + x0 + cw]);
    }
    let data = if cw == out && ch == out {
        region
    } else {
        bilinear_resize(&region, ch, cw, out, out)
    };
    GrayImage::new(out, out, data).expect("square output")
}

fn random_resized_crop(img: &GrayImage, spec: &AugmentSpec, rng: &mut Rng) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let area = (w * h) as f32;
    let log_ratio = [spec.crop_ratio[0].ln(), spec.crop_ratio[1].ln()];
    for _ in 0..10 {
        let target = area * uniform(rng, spec.crop_scale);
        let ratio = uniform(rng, log_ratio).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x0 = rng.gen_range(0..=w - cw);
            let y0 = rng.gen_range(0..=h - ch);
            return crop_resize(img, x0, y0, cw, ch, spec.output_size);
        }
    }
    let side = w.min(h);
    crop_resize(img, (w - side) / 2, (h - side) / 2, side, side, spec.output_size)
}

fn adjust_brightness(img: &mut GrayImage, delta: f32) {
    if delta != 0.0 {
        img.data_mut().iter_mut().for_each(|v| *v += delta);
    }
}

fn adjust_contrast(img: &mut GrayImage, factor: f32) {
    if factor != 1.0 {
        let m = img.mean();
        img.data_mut().iter_mut().for_each(|v| *v = *v * factor + m * (1.0 - factor));
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f32) -> GrayImage {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let pass = |src: &GrayImage, horizontal: bool| {
        GrayImage::from_fn(w as usize, h as usize, |x, y| {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let o = k as isize - radius;
                let (sx, sy) = if horizontal {
                    ((x as isize + o).clamp(0, w - 1), y as isize)
                } else {
                    (x as isize, (y as isize + o).clamp(0, h - 1))
                };
                acc += kv * src.get(sx as usize, sy as usize);
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

/// Similarity transform about the image center:
/// `p' = c + scale * R(angle) * (p - c) + (tx, ty)`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: f32,
    pub angle_deg: f32,
    pub tx: f32,
    pub ty: f32,
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            scale: 1.0,
            angle_deg: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.angle_deg).to_radians().sin_cos();
        let k = 1.0 / self.scale;
        Affine {
            scale: k,
            angle_deg: -self.angle_deg,
            tx: -k * (c * self.tx - s * self.ty),
            ty: -k * (s * self.tx + c * self.ty),
        }
    }

    /// Source position for output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f32, f32) {
        let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
        let px = x as f32 + 0.5 - cx - self.tx;
        let py = y as f32 + 0.5 - cy - self.ty;
        let (s, c) = (-self.angle_deg).to_radians().sin_cos();
        let k = 1.0 / self.scale;
        let sx = k * (c * px - s * py) + cx - 0.5;
        let sy = k * (s * px + c * py) + cy - 0.5;
        (sx, sy)
    }

    pub fn apply_bilinear(&self, img: &GrayImage) -> GrayImage {
        if self.is_identity() {
            return img.clone();
        }
        let (w, h) = (img.width(), img.height());
        GrayImage::from_fn(w, h, |x, y| {
            let (sx, sy) = self.source(x, y, w, h);
            sample_bilinear(img, sx, sy, 0.0)
        })
    }

    /// Nearest-neighbour resampling; keeps masks binary.
    pub fn apply_nearest(&self, img: &GrayImage) -> GrayImage {
        if self.is_identity() {
            return img.clone();
        }
        let (w, h) = (img.width(), img.height());
        GrayImage::from_fn(w, h, |x, y| {
            let (sx, sy) = self.source(x, y, w, h);
            sample_nearest(img, sx, sy)
        })
    }
}

fn clamp01(img: &mut GrayImage) {
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Pre-training pipeline: random resized crop, brightness, contrast,
/// optional blur, optional horizontal flip, rotation; clamped to `[0, 1]`.
pub fn augment_pretrain(img: &GrayImage, spec: &AugmentSpec, rng: &mut Rng) -> GrayImage {
    let mut out = random_resized_crop(img, spec, rng);
    adjust_brightness(&mut out, uniform(rng, spec.brightness));
    adjust_contrast(&mut out, uniform(rng, spec.contrast));
    if rng.gen::<f32>() < spec.blur_prob {
        out = gaussian_blur(&out, uniform(rng, spec.blur_sigma));
    }
    if rng.gen::<f32>() < spec.flip_prob {
        out = hflip(&out);
    }
    let angle = uniform(rng, spec.rotation_deg);
    out = Affine {
        angle_deg: angle,
        ..Affine::identity()
    }
    .apply_bilinear(&out);
    clamp01(&mut out);
    out
}

/// Random parameters of one fine-tuning augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneDraw {
    pub flip: bool,
    pub affine: Affine,
    pub brightness: f32,
    pub contrast: f32,
}

pub fn draw_finetune(spec: &AugmentSpec, size: usize, rng: &mut Rng) -> FinetuneDraw {
    let flip = rng.gen::<f32>() < spec.flip_prob;
    let scale = uniform(rng, spec.scale);
    let angle_deg = uniform(rng, spec.rotation_deg);
    let tx = uniform(rng, spec.translate_frac) * size as f32;
    let ty = uniform(rng, spec.translate_frac) * size as f32;
    let brightness = uniform(rng, spec.brightness);
    let contrast = uniform(rng, spec.contrast);
    FinetuneDraw {
        flip,
        affine: Affine {
            scale,
            angle_deg,
            tx,
            ty,
        },
        brightness,
        contrast,
    }
}

/// Applies a draw: geometry to image and mask alike, photometry to the
/// image only.
pub fn apply_finetune(img: &GrayImage, mask: Option<&GrayImage>, draw: &FinetuneDraw) -> (GrayImage, Option<GrayImage>) {
    let (mut img, mut mask) = (img.clone(), mask.cloned());
    if draw.flip {
        img = hflip(&img);
        mask = mask.map(|m| hflip(&m));
    }
    img = draw.affine.apply_bilinear(&img);
    mask = mask.map(|m| draw.affine.apply_nearest(&m));
    adjust_brightness(&mut img, draw.brightness);
    adjust_contrast(&mut img, draw.contrast);
    clamp01(&mut img);
    (img, mask)
}

/// Fine-tuning pipeline: flip, scale, rotation, translation, brightness and
/// contrast.
pub fn augment_finetune(
    img: &GrayImage,
    mask: Option<&GrayImage>,
    spec: &AugmentSpec,
    rng: &mut Rng,
) -> (GrayImage, Option<GrayImage>) {
    let draw = draw_finetune(spec, img.width(), rng);
    apply_finetune(img, mask, &draw)
}

/// Per-image standardization `(x - mean) / std`. A constant image maps to
/// zeros and the second element reports the degenerate input.
pub fn normalize(img: &GrayImage) -> (GrayImage, bool) {
    let n = img.data().len() as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 {
        return (GrayImage::zeros(img.width(), img.height()), true);
    }
    let data = img.data().iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    (GrayImage::new(img.width(), img.height(), data).expect("same size"), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_image(size: usize) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| ((x * 7 + y * 13) % 17) as f32 / 16.0)
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let img = test_image(16);
        let spec = AugmentSpec::identity(16);
        let mut rng = Rng::seed_from_u64(3);
        assert_eq!(augment_pretrain(&img, &spec, &mut rng), img);
        let (out, mask) = augment_finetune(&img, Some(&img), &spec, &mut rng);
        assert_eq!(out, img);
        assert_eq!(mask.unwrap(), img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = test_image(32);
        let spec = AugmentSpec::default();
        let a = augment_pretrain(&img, &spec, &mut sample_stream(1, 2, 3, 0, 1));
        let b = augment_pretrain(&img, &spec, &mut sample_stream(1, 2, 3, 0, 1));
        let c = augment_pretrain(&img, &spec, &mut sample_stream(1, 2, 4, 0, 1));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.width(), a.height()), (32, 32));
    }

    #[test]
    fn double_flip_restores() {
        let img = test_image(12);
        let spec = AugmentSpec {
            flip_prob: 1.0,
            ..AugmentSpec::identity(12)
        };
        let mut rng = Rng::seed_from_u64(0);
        let once = augment_pretrain(&img, &spec, &mut rng);
        assert_ne!(once, img);
        assert_eq!(augment_pretrain(&once, &spec, &mut rng), img);
    }

    #[test]
    fn flip_moves_pixels_in_image_and_mask() {
        let img = test_image(8);
        let mask = GrayImage::from_fn(8, 8, |x, y| if x < 3 && y > 4 { 1.0 } else { 0.0 });
        let draw = FinetuneDraw {
            flip: true,
            affine: Affine::identity(),
            brightness: 0.0,
            contrast: 1.0,
        };
        let (fi, fm) = apply_finetune(&img, Some(&mask), &draw);
        let fm = fm.unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(fi.get(7 - x, y), img.get(x, y));
                assert_eq!(fm.get(7 - x, y), mask.get(x, y));
            }
        }
        let ones = GrayImage::from_fn(8, 8, |_, _| 1.0);
        assert_eq!(hflip(&ones), ones);
    }

    #[test]
    fn photometric_leaves_mask_binary() {
        let img = test_image(32);
        let mask = GrayImage::from_fn(32, 32, |x, y| if (x as i32 - 16).pow(2) + (y as i32 - 14).pow(2) < 50 { 1.0 } else { 0.0 });
        let spec = AugmentSpec::default();
        for s in 0..20 {
            let (o, m) = augment_finetune(&img, Some(&mask), &spec, &mut sample_stream(9, 0, s, 0, 0));
            assert!(m.unwrap().is_binary());
            assert_eq!((o.width(), o.height()), (32, 32));
        }
    }

    #[test]
    fn affine_inverse_composes_to_identity_on_points() {
        let a = Affine {
            scale: 1.07,
            angle_deg: 11.0,
            tx: 2.5,
            ty: -1.25,
        };
        let inv = a.inverse();
        let (x, y) = (5usize, 9usize);
        let (sx, sy) = inv.source(x, y, 32, 32);
        // `inv.source` gives inv^{-1} = a applied to the pixel center.
        let (cx, cy) = (16.0f32, 16.0f32);
        let (s, c) = 11.0f32.to_radians().sin_cos();
        let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
        let fx = cx + 1.07 * (c * px - s * py) + 2.5 - 0.5;
        let fy = cy + 1.07 * (s * px + c * py) - 1.25 - 0.5;
        assert!((sx - fx).abs() < 1e-4 && (sy - fy).abs() < 1e-4);
    }

    #[test]
    fn normalize_contract() {
        let (o, deg) = normalize(&GrayImage::new(2, 1, vec![0.0, 2.0]).unwrap());
        assert!(!deg);
        assert_eq!(o.data(), &[-1.0, 1.0]);
        let (z, deg) = normalize(&GrayImage::from_fn(4, 4, |_, _| 0.3));
        assert!(deg && z.data().iter().all(|&v| v == 0.0));
        let img = test_image(16);
        let (n, _) = normalize(&img);
        let mean = n.mean();
        let std = (n.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 256.0).sqrt();
        assert!(mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        let bad = AugmentSpec {
            contrast: [1.2, 0.8],
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentSpec {
            flip_prob: 1.5,
            ..AugmentSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}

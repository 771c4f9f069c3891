//! Channel-mean activation maps used as weak segmentations.

use serde::{Deserialize, Serialize};

use super::metrics::{binarize, dice_score};
use crate::augment::normalize;
use crate::backend::kernels::bilinear_resize;
use crate::backend::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::models::{encode, Backbone};

pub const DEFAULT_THRESHOLDS: [f32; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationMapConfig {
    pub thresholds: Vec<f32>,
    /// Backbone stage to read; `None` means the last one.
    pub layer: Option<usize>,
}

impl Default for ActivationMapConfig {
    fn default() -> Self {
        ActivationMapConfig {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            layer: None,
        }
    }
}

impl ActivationMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("no activation-map thresholds".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub map: GrayImage,
    /// Set when the channel mean was constant and the map is all zeros.
    pub degenerate: bool,
}

/// Mean over channels of one sample's `[c, h, w]` features, resized to
/// `out_size` and min-max normalized to `[0, 1]`.
pub fn activation_from_features(features: &[f32], c: usize, h: usize, w: usize, out_size: usize) -> Result<ActivationMap> {
    if features.len() != c * h * w || c == 0 {
        return Err(Error::shape("activation map", &[c, h, w], &[features.len()]));
    }
    let mut mean = vec![0.0f64; h * w];
    for ch in features.chunks(h * w) {
        for (m, &v) in mean.iter_mut().zip(ch) {
            *m += v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&m| (m / c as f64) as f32).collect();
    let resized = bilinear_resize(&mean, h, w, out_size, out_size);
    let lo = resized.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = resized.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return Ok(ActivationMap {
            map: GrayImage::zeros(out_size, out_size),
            degenerate: true,
        });
    }
    let span = hi - lo;
    let data = resized.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    Ok(ActivationMap {
        map: GrayImage::new(out_size, out_size, data)?,
        degenerate: false,
    })
}

/// Eval-mode activation maps of raw images (standardized here, as in
/// training).
pub fn activation_maps(
    backbone: &Backbone,
    store: &ParamStore,
    images: &[GrayImage],
    config: &ActivationMapConfig,
) -> Result<Vec<ActivationMap>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let stages = backbone.config().num_stages();
    let layer = config.layer.unwrap_or(stages - 1);
    if layer >= stages {
        return Err(Error::Config(format!("activation layer {layer} but only {stages} stages")));
    }
    let normalized: Vec<GrayImage> = images.iter().map(|i| normalize(i).0).collect();
    let out_size = images[0].width();
    let mut maps = Vec::with_capacity(images.len());
    for chunk in normalized.chunks(64) {
        let enc = encode(backbone, store, &GrayImage::batch(chunk)?)?;
        let f: &Tensor = &enc.stage_maps[layer];
        let (n, c, h, w) = f.dims4()?;
        for i in 0..n {
            let per = c * h * w;
            maps.push(activation_from_features(&f.data()[i * per..(i + 1) * per], c, h, w, out_size)?);
        }
    }
    Ok(maps)
}

/// Dice of `map >= t` against `mask` for each threshold.
pub fn actmap_dice(map: &GrayImage, mask: &GrayImage, thresholds: &[f32]) -> Result<Vec<f64>> {
    if (map.width(), map.height()) != (mask.width(), mask.height()) {
        return Err(Error::shape("actmap_dice", &[map.height(), map.width()], &[mask.height(), mask.width()]));
    }
    thresholds
        .iter()
        .map(|&t| dice_score(&binarize(map.data(), t), mask.data()))
        .collect()
}

/// Mean Dice per threshold over `(image, mask)` pairs.
pub fn mean_actmap_dice(
    backbone: &Backbone,
    store: &ParamStore,
    images: &[GrayImage],
    masks: &[GrayImage],
    config: &ActivationMapConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::shape("mean_actmap_dice", &[images.len()], &[masks.len()]));
    }
    let maps = activation_maps(backbone, store, images, config)?;
    let mut sums = vec![0.0; config.thresholds.len()];
    for (m, mask) in maps.iter().zip(masks) {
        for (s, d) in sums.iter_mut().zip(actmap_dice(&m.map, mask, &config.thresholds)?) {
            *s += d;
        }
    }
    Ok(sums.into_iter().map(|s| s / maps.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_of_checkerboard() {
        let m = activation_from_features(&[0.0, 1.0, 1.0, 0.0], 1, 2, 2, 2).unwrap();
        assert_eq!(m.map.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(!m.degenerate);
    }

    #[test]
    fn constant_maps_are_degenerate() {
        let m = activation_from_features(&[3.0; 8], 2, 2, 2, 4).unwrap();
        assert!(m.degenerate);
        assert!(m.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn range_is_unit() {
        let f: Vec<f32> = (0..2 * 4 * 4).map(|i| ((i * 37) % 11) as f32).collect();
        let m = activation_from_features(&f, 2, 4, 4, 16).unwrap();
        let lo = m.map.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = m.map.data().iter().copied().fold(0.0, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn mask_as_map_scores_one() {
        let mask = GrayImage::from_fn(6, 6, |x, y| ((x + y) % 3 == 0) as u8 as f32);
        let d = actmap_dice(&mask, &mask, &DEFAULT_THRESHOLDS).unwrap();
        assert!(d.iter().all(|&v| v == 1.0));
    }
}

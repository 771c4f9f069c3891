//! Synthetic two-view nodule phantoms.
//!
//! Each patient has one latent nodule; the transverse view images its
//! lateral x depth cross-section and the longitudinal view its axial x depth
//! cross-section, so both views share the depth axis and depth centre.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Label, PatientRecord, ViewFiles};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::{self, Rng};

/// Boundary irregularity above which a nodule is malignant.
pub const IRREGULARITY_THRESHOLD: f32 = 0.3;
const HARMONICS: [f32; 3] = [3.0, 5.0, 7.0];
const HARMONIC_WEIGHTS: [f32; 3] = [0.5, 0.3, 0.2];

/// Shape and appearance of one nodule. Positions and semi-axes are fractions
/// of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleLatent {
    pub center_lateral: f32,
    pub center_axial: f32,
    pub center_depth: f32,
    /// Half extent along the transverse view's horizontal axis.
    pub semi_lateral: f32,
    /// Half extent along the longitudinal view's horizontal axis.
    pub semi_axial: f32,
    /// Half extent along depth, shared by both views.
    pub semi_depth: f32,
    pub irregularity: f32,
    /// Mean nodule intensity.
    pub echogenicity: f32,
    /// Width of the margin transition in pixels.
    pub margin_blur: f32,
    /// Phases of the boundary harmonics, per view.
    pub phases: [[f32; 3]; 2],
    pub label: Label,
}

/// Malignant iff the boundary is irregular or the longitudinal section is
/// taller than wide.
pub fn label_rule(irregularity: f32, semi_axial: f32, semi_depth: f32) -> Label {
    if irregularity > IRREGULARITY_THRESHOLD || semi_depth > semi_axial {
        Label::Malignant
    } else {
        Label::Benign
    }
}

impl NoduleLatent {
    pub fn sample(rng: &mut Rng) -> Self {
        let semi_axial = rng.gen_range(0.17..0.25);
        let semi_depth = (semi_axial * rng.gen_range(0.55..1.15f32)).min(0.32);
        // Roughly ellipsoidal nodules: the lateral extent follows the axial one.
        let semi_lateral = (semi_axial * rng.gen_range(0.85..1.15f32)).clamp(0.12, 0.32);
        let irregularity = rng.gen_range(0.0..0.5);
        let mut phases = [[0.0; 3]; 2];
        for view in phases.iter_mut() {
            for p in view.iter_mut() {
                *p = rng.gen_range(0.0..std::f32::consts::TAU);
            }
        }
        NoduleLatent {
            center_lateral: rng.gen_range(0.4..0.6),
            center_axial: rng.gen_range(0.4..0.6),
            center_depth: rng.gen_range(0.45..0.55),
            semi_lateral,
            semi_axial,
            semi_depth,
            irregularity,
            echogenicity: rng.gen_range(0.12..0.2),
            margin_blur: rng.gen_range(0.5..0.9),
            phases,
            label: label_rule(irregularity, semi_axial, semi_depth),
        }
    }

    /// `(center_x, center_y, semi_x, semi_y)` in pixels for one view.
    pub fn view_geometry(&self, view: View, size: usize) -> (f32, f32, f32, f32) {
        let s = size as f32;
        let (cx, rx) = match view {
            View::Transverse => (self.center_lateral, self.semi_lateral),
            View::Longitudinal => (self.center_axial, self.semi_axial),
        };
        (cx * s, self.center_depth * s, rx * s, self.semi_depth * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Transverse,
    Longitudinal,
}

impl View {
    pub fn index(self) -> usize {
        match self {
            View::Transverse => 0,
            View::Longitudinal => 1,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            View::Transverse => "t",
            View::Longitudinal => "l",
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Renders one view: textured background with depth attenuation, the
/// perturbed ellipse with a blurred margin, then multiplicative speckle.
/// Returns the image and its binary mask.
pub fn render_view(latent: &NoduleLatent, view: View, size: usize, rng: &mut Rng) -> (GrayImage, GrayImage) {
    let (cx, cy, rx, ry) = latent.view_geometry(view, size);
    let phases = latent.phases[view.index()];
    let mean_r = 0.5 * (rx + ry);
    let band_period = rng.gen_range(5.0..11.0f32);
    let band_phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let band_amp = rng.gen_range(0.03..0.08f32);
    let base = rng.gen_range(0.5..0.65f32);
    let speckle = Gamma::new(6.0f32, 1.0 / 6.0).expect("valid gamma");
    let s = size as f32;

    let radial = |x: f32, y: f32| -> f32 {
        let (u, v) = ((x - cx) / rx, (y - cy) / ry);
        let theta = v.atan2(u);
        let bump: f32 = HARMONICS
            .iter()
            .zip(&HARMONIC_WEIGHTS)
            .zip(&phases)
            .map(|((k, w), p)| w * (k * theta + p).sin())
            .sum();
        (u * u + v * v).sqrt() / (1.0 + latent.irregularity * bump)
    };

    let mut img = GrayImage::zeros(size, size);
    let mut mask = GrayImage::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let depth = py / s;
            let bg = base - 0.18 * depth
                + band_amp * (std::f32::consts::TAU * py / band_period + band_phase).sin();
            let rho = radial(px, py);
            let inside = sigmoid((1.0 - rho) * mean_r / latent.margin_blur);
            let clean = bg * (1.0 - inside) + latent.echogenicity * inside;
            let noisy = clean * speckle.sample(rng);
            img.set(x, y, noisy.clamp(0.0, 1.0));
            if rho < 1.0 {
                mask.set(x, y, 1.0);
            }
        }
    }
    (img, mask)
}

/// Images and masks of one generated patient; `None` for a dropped view.
#[derive(Clone, Debug)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub latent: NoduleLatent,
    pub transverse: Option<(GrayImage, GrayImage)>,
    pub longitudinal: Option<(GrayImage, GrayImage)>,
}

/// Samples one patient from its own random stream.
pub fn synthesize_patient(index: usize, missing_rate: f32, size: usize, seed: u64) -> SyntheticPatient {
    let mut r = rng::stream(seed, "synthetic", &[index as u64]);
    let latent = loop {
        let l = NoduleLatent::sample(&mut r);
        let (_, _, rx, ry) = l.view_geometry(View::Transverse, size);
        let (_, _, ax, _) = l.view_geometry(View::Longitudinal, size);
        // Nodules must cover at least a couple of pixels in both views.
        if rx.min(ry).min(ax) >= 1.5 {
            break l;
        }
    };
    let drop = if r.gen::<f32>() < missing_rate {
        Some(if r.gen::<bool>() { View::Transverse } else { View::Longitudinal })
    } else {
        None
    };
    let t = render_view(&latent, View::Transverse, size, &mut r);
    let l = render_view(&latent, View::Longitudinal, size, &mut r);
    SyntheticPatient {
        patient_id: format!("P{index:05}"),
        transverse: (drop != Some(View::Transverse)).then_some(t),
        longitudinal: (drop != Some(View::Longitudinal)).then_some(l),
        latent,
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub patients: usize,
    pub paired: usize,
    pub unpaired: usize,
    pub malignant_fraction: f64,
}

/// Writes `manifest.jsonl`, `images/` and `masks/` under `out_dir` and
/// returns the in-memory patients.
pub fn generate_synthetic(
    out_dir: impl AsRef<Path>,
    num_patients: usize,
    missing_rate: f32,
    image_size: usize,
    seed: u64,
) -> Result<(Vec<SyntheticPatient>, GenerationSummary)> {
    if num_patients < 10 {
        return Err(Error::Config(format!("need at least 10 patients, got {num_patients}")));
    }
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Config(format!("missing rate {missing_rate} outside [0, 1)")));
    }
    if image_size < 8 {
        return Err(Error::Config(format!("image size {image_size} too small")));
    }
    let root = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let patients: Vec<SyntheticPatient> = (0..num_patients)
        .map(|i| synthesize_patient(i, missing_rate, image_size, seed))
        .collect();
    let mut records = Vec::with_capacity(num_patients);
    for p in &patients {
        let write_view = |view: View, pair: &Option<(GrayImage, GrayImage)>| -> Result<Option<ViewFiles>> {
            let Some((img, mask)) = pair else { return Ok(None) };
            let name = format!("{}_{}.png", p.patient_id, view.suffix());
            let image = PathBuf::from("images").join(&name);
            let mask_path = PathBuf::from("masks").join(&name);
            img.save_png(root.join(&image))?;
            mask.save_png(root.join(&mask_path))?;
            Ok(Some(ViewFiles {
                image: root.join(image),
                mask: Some(root.join(mask_path)),
            }))
        };
        let transverse = write_view(View::Transverse, &p.transverse)?;
        let longitudinal = write_view(View::Longitudinal, &p.longitudinal)?;
        records.push(PatientRecord {
            patient_id: p.patient_id.clone(),
            transverse,
            longitudinal,
            label: p.latent.label,
        });
    }
    write_manifest(root, &records)?;
    let paired = records.iter().filter(|r| r.is_paired()).count();
    let malignant = records.iter().filter(|r| r.label == Label::Malignant).count();
    let summary = GenerationSummary {
        patients: num_patients,
        paired,
        unpaired: num_patients - paired,
        malignant_fraction: malignant as f64 / num_patients as f64,
    };
    Ok((patients, summary))
}

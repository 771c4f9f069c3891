//! Single-channel float images and PNG I/O.

use std::path::Path;

use crate::backend::Tensor;
use crate::error::{Error, Result};

/// Row-major grayscale image. Pixel values are nominally in `[0, 1]`;
/// masks use exactly `0.0` and `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::shape("image", &[height, width], &[data.len()]));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// `[1, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("shape")
    }

    /// Stacks equally sized images into `[n, 1, h, w]`.
    pub fn batch(images: &[GrayImage]) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return Err(Error::InvalidArgument("empty image batch".into()));
        };
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if (img.width, img.height) != (w, h) {
                return Err(Error::shape("image batch", &[h, w], &[img.height, img.width]));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), 1, h, w], data)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Data(format!("missing image file {}", path.display())));
        }
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::from_u8(w as usize, h as usize, img.as_raw())
    }

    /// Loads a PNG mask, thresholding at half intensity.
    pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Self> {
        let mut m = Self::load_png(path)?;
        m.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
        Ok(m)
    }
}

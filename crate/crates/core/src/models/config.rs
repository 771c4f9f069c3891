use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture of the backbone and projection head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Pixels per side of the (square) input image.
    pub input_size: usize,
    pub in_channels: usize,
    /// Channel width of each stage; every stage halves the resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small residual network used for desk-scale runs.
    pub fn desk() -> Self {
        EncoderConfig {
            input_size: 32,
            in_channels: 1,
            widths: vec![32, 64, 128],
            blocks_per_stage: 2,
            proj_hidden: 64,
            proj_out: 32,
        }
    }

    /// Profile with the full-size image and head dimensions
    /// (2048-d features, 512 hidden, 128 out).
    pub fn full_scale() -> Self {
        EncoderConfig {
            input_size: 256,
            in_channels: 1,
            widths: vec![256, 512, 1024, 2048],
            blocks_per_stage: 2,
            proj_hidden: 512,
            proj_out: 128,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// Spatial side of the map produced by stage `i`.
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be nonempty and positive".into()));
        }
        if self.blocks_per_stage == 0 || self.in_channels == 0 || self.proj_hidden == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.proj_out < 2 {
            return Err(Error::Config(format!(
                "projection output dim must be >= 2, got {}",
                self.proj_out
            )));
        }
        let div = 1usize << self.num_stages();
        if self.input_size < div || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a multiple of {div} for {} stride-2 stages",
                self.input_size,
                self.num_stages()
            )));
        }
        Ok(())
    }

    /// Stable hash of every field.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"encoder-config/v1");
        for v in [
            self.input_size,
            self.in_channels,
            self.blocks_per_stage,
            self.proj_hidden,
            self.proj_out,
            self.widths.len(),
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for &w in &self.widths {
            h.update((w as u64).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

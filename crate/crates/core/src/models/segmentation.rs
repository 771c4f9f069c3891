use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::Backbone;
use super::config::EncoderConfig;
use super::layers::{BatchNorm, Conv, Ctx};
use crate::backend::{ParamStore, Var};
use crate::error::{Error, Result};

/// Decoder layout, listed from the deepest decoder stage to the shallowest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channels of the encoder map concatenated at each decoder stage.
    pub skip_channels: Vec<usize>,
    /// Output channels of each decoder stage.
    pub widths: Vec<usize>,
    /// Channels of the full-resolution refinement conv before the 1x1 output.
    pub head_width: usize,
}

impl DecoderConfig {
    /// Mirror of the encoder: one decoder stage per skip connection.
    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        let skips: Vec<usize> = enc.widths[..enc.num_stages() - 1].iter().rev().copied().collect();
        DecoderConfig {
            widths: skips.clone(),
            skip_channels: skips,
            head_width: (enc.widths[0] / 2).max(1),
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    conv: Conv,
    bn: BatchNorm,
}

/// UNet-style network: backbone encoder, and a decoder that upsamples x2,
/// concatenates the matching encoder stage, and convolves.
#[derive(Clone, Debug)]
pub struct SegmentationNet {
    pub backbone: Backbone,
    stages: Vec<DecoderStage>,
    refine: (Conv, BatchNorm),
    out: Conv,
}

impl SegmentationNet {
    pub fn new(
        enc: &EncoderConfig,
        dec: &DecoderConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let backbone = Backbone::new(enc, store, rng)?;
        let n = enc.num_stages();
        let expected: Vec<usize> = enc.widths[..n - 1].iter().rev().copied().collect();
        if dec.skip_channels != expected || dec.widths.len() != expected.len() {
            return Err(Error::shape("decoder skip channels", &dec.skip_channels, &expected));
        }
        let mut in_c = enc.feature_dim();
        let mut stages = Vec::new();
        for (i, (&skip, &w)) in dec.skip_channels.iter().zip(&dec.widths).enumerate() {
            stages.push(DecoderStage {
                conv: Conv::new(store, &format!("decoder.up{i}.conv"), in_c + skip, w, 3, 1, false, rng),
                bn: BatchNorm::new(store, &format!("decoder.up{i}.bn"), w),
            });
            in_c = w;
        }
        let refine = (
            Conv::new(store, "decoder.refine.conv", in_c, dec.head_width, 3, 1, false, rng),
            BatchNorm::new(store, "decoder.refine.bn", dec.head_width),
        );
        let out = Conv::new(store, "decoder.out", dec.head_width, 1, 1, 1, true, rng);
        Ok(SegmentationNet {
            backbone,
            stages,
            refine,
            out,
        })
    }

    /// Per-pixel logits `[n, 1, H, W]` at input resolution.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let enc = self.backbone.forward(ctx, x)?;
        let n = enc.stages.len();
        let mut h = enc.stages[n - 1];
        for (i, stage) in self.stages.iter().enumerate() {
            let skip = enc.stages[n - 2 - i];
            let up = ctx.tape.upsample2x(h)?;
            if ctx.tape.shape(up)[2..] != ctx.tape.shape(skip)[2..] {
                return Err(Error::shape("decoder skip", ctx.tape.shape(up), ctx.tape.shape(skip)));
            }
            let cat = ctx.tape.concat(&[up, skip], 1)?;
            let y = stage.conv.forward(ctx, cat)?;
            let y = stage.bn.forward(ctx, y)?;
            h = ctx.tape.relu(y);
        }
        let up = ctx.tape.upsample2x(h)?;
        let y = self.refine.0.forward(ctx, up)?;
        let y = self.refine.1.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        self.out.forward(ctx, y)
    }

    /// Spatial sizes of the encoder maps the decoder consumes, deepest first.
    pub fn skip_sizes(&self) -> Vec<usize> {
        let c = self.backbone.config();
        (0..c.num_stages()).rev().map(|i| c.stage_size(i)).collect()
    }
}

/// Builds a segmentation network with freshly initialized weights.
pub fn build_segmentation_net(
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    seed: u64,
) -> Result<(SegmentationNet, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = crate::rng::stream(seed, "init", &[]);
    let net = SegmentationNet::new(enc, dec, &mut store, &mut rng)?;
    Ok((net, store))
}

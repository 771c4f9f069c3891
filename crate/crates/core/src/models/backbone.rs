use rand::Rng;

use super::config::EncoderConfig;
use super::layers::{BatchNorm, Conv, Ctx};
use crate::backend::{ParamStore, Var};
use crate::error::{Error, Result};

/// Two 3x3 convolutions with a residual connection; a 1x1 projection
/// shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv::new(store, &format!("{name}.down.conv"), in_c, out_c, 1, stride, false, rng),
                BatchNorm::new(store, &format!("{name}.down.bn"), out_c),
            )
        });
        BasicBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), in_c, out_c, 3, stride, false, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), out_c),
            conv2: Conv::new(store, &format!("{name}.conv2"), out_c, out_c, 3, 1, false, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), out_c),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let y = ctx.tape.add(h, skip)?;
        Ok(ctx.tape.relu(y))
    }
}

/// Residual CNN: a stride-1 stem followed by stages that each halve the
/// resolution, then global average pooling.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: EncoderConfig,
    stem_conv: Conv,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
}

/// Every intermediate map of a backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub stem: Var,
    /// Output of every residual block, in order.
    pub blocks: Vec<Var>,
    /// Output of the last block of each stage.
    pub stages: Vec<Var>,
    /// Globally average-pooled last stage, `[n, feature_dim]`.
    pub pooled: Var,
}

impl BackboneOutput {
    /// Layers probed by representation-similarity analysis: the stem, every
    /// residual block and the pooled vector.
    pub fn probe_layers(&self) -> Vec<Var> {
        let mut v = vec![self.stem];
        v.extend(&self.blocks);
        v.push(self.pooled);
        v
    }
}

impl Backbone {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let w0 = config.widths[0];
        let stem_conv = Conv::new(store, "backbone.stem.conv", config.in_channels, w0, 3, 1, false, rng);
        let stem_bn = BatchNorm::new(store, "backbone.stem.bn", w0);
        let mut in_c = w0;
        let mut stages = Vec::new();
        for (s, &w) in config.widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("backbone.s{s}.b{b}"), in_c, w, stride, rng));
                in_c = w;
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            config: config.clone(),
            stem_conv,
            stem_bn,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Number of layers returned by [`BackboneOutput::probe_layers`].
    pub fn num_probe_layers(&self) -> usize {
        2 + self.config.num_stages() * self.config.blocks_per_stage
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = matches!(shape, [_, ch, h, w] if *ch == c.in_channels && *h == c.input_size && *w == c.input_size);
        if !ok {
            return Err(Error::shape(
                "backbone input",
                shape,
                &[0, c.in_channels, c.input_size, c.input_size],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<BackboneOutput> {
        self.check_input(ctx.tape.shape(x))?;
        let h = self.stem_conv.forward(ctx, x)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let stem = ctx.tape.relu(h);
        let mut h = stem;
        let mut blocks = Vec::new();
        let mut stages = Vec::new();
        for stage in &self.stages {
            for block in stage {
                h = block.forward(ctx, h)?;
                blocks.push(h);
            }
            stages.push(h);
        }
        let pooled = ctx.tape.global_avg_pool(h)?;
        Ok(BackboneOutput {
            stem,
            blocks,
            stages,
            pooled,
        })
    }
}

//! Complete networks and eval-mode convenience passes.

use rand::Rng;

use super::backbone::Backbone;
use super::config::EncoderConfig;
use super::heads::{degenerate_rows, Classifier, ProjectionHead};
use super::layers::{Ctx, Mode};
use super::segmentation::SegmentationNet;
use crate::backend::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Backbone plus projection head: the architecture shared by all four
/// pre-training encoders.
#[derive(Clone, Debug)]
pub struct EncoderArch {
    pub backbone: Backbone,
    pub head: ProjectionHead,
}

impl EncoderArch {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let backbone = Backbone::new(config, store, rng)?;
        let head = ProjectionHead::new(store, config.feature_dim(), config.proj_hidden, config.proj_out, rng);
        Ok(EncoderArch { backbone, head })
    }

    /// Builds the architecture and a freshly initialized weight store.
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(seed, "init", &[]);
        let arch = Self::new(config, &mut store, &mut rng)?;
        Ok((arch, store))
    }

    /// Unit-norm latents `[n, proj_out]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let out = self.backbone.forward(ctx, x)?;
        self.head.forward(ctx, out.pooled)
    }
}

/// Backbone plus a two-way linear classifier. Used for single-view
/// classification and, with both views through the same weights, for
/// multi-view classification.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    pub backbone: Backbone,
    pub classifier: Classifier,
}

/// Logits of the two branches and their mean.
#[derive(Clone, Copy, Debug)]
pub struct MncLogits {
    pub transverse: Var,
    pub longitudinal: Var,
    pub average: Var,
}

impl ClassifierNet {
    pub fn build(config: &EncoderConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(seed, "init", &[]);
        let backbone = Backbone::new(config, &mut store, &mut rng)?;
        let classifier = Classifier::new(&mut store, config.feature_dim(), &mut rng);
        Ok((ClassifierNet { backbone, classifier }, store))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let out = self.backbone.forward(ctx, x)?;
        self.classifier.forward(ctx, out.pooled)
    }

    /// Runs both views through the shared weights in one batch.
    pub fn mnc_forward(&self, ctx: &mut Ctx, transverse: Var, longitudinal: Var) -> Result<MncLogits> {
        let (st, sl) = (ctx.tape.shape(transverse).to_vec(), ctx.tape.shape(longitudinal).to_vec());
        if st != sl {
            return Err(Error::shape("mnc_forward views", &st, &sl));
        }
        let n = st[0];
        let both = ctx.tape.concat(&[transverse, longitudinal], 0)?;
        let logits = self.forward(ctx, both)?;
        let t_rows: Vec<usize> = (0..n).collect();
        let l_rows: Vec<usize> = (n..2 * n).collect();
        let lt = ctx.tape.select_rows(logits, &t_rows)?;
        let ll = ctx.tape.select_rows(logits, &l_rows)?;
        let sum = ctx.tape.add(lt, ll)?;
        let avg = ctx.tape.scale(sum, 0.5);
        Ok(MncLogits {
            transverse: lt,
            longitudinal: ll,
            average: avg,
        })
    }
}

/// Runs `f` over an eval-mode binding of `store` and returns the tape.
pub fn eval_pass<T>(store: &ParamStore, f: impl FnOnce(&mut Ctx) -> Result<T>) -> Result<(Tape, T)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let out = {
        let mut ctx = Ctx::new(&mut tape, store, &bound, Mode::Eval);
        f(&mut ctx)?
    };
    Ok((tape, out))
}

/// Per-stage spatial maps and the pooled feature vector of a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stage_maps: Vec<Tensor>,
    pub pooled: Tensor,
}

/// Eval-mode backbone pass over `[n, c, s, s]` images.
pub fn encode(backbone: &Backbone, store: &ParamStore, images: &Tensor) -> Result<Encoded> {
    backbone.check_input(images.shape())?;
    let (tape, out) = eval_pass(store, |ctx| {
        let x = ctx.tape.constant(images.clone());
        backbone.forward(ctx, x)
    })?;
    Ok(Encoded {
        stage_maps: out.stages.iter().map(|&v| tape.value(v).clone()).collect(),
        pooled: tape.value(out.pooled).clone(),
    })
}

/// Tensors of every probe layer (stem, blocks, pooled) for a batch.
pub fn probe_features(backbone: &Backbone, store: &ParamStore, images: &Tensor) -> Result<Vec<Tensor>> {
    backbone.check_input(images.shape())?;
    let (tape, out) = eval_pass(store, |ctx| {
        let x = ctx.tape.constant(images.clone());
        backbone.forward(ctx, x)
    })?;
    Ok(out.probe_layers().iter().map(|&v| tape.value(v).clone()).collect())
}

/// Projected latents and the indices of degenerate (all-zero) rows.
#[derive(Clone, Debug)]
pub struct Projection {
    pub latents: Tensor,
    pub degenerate: Vec<usize>,
}

pub fn project(head: &ProjectionHead, store: &ParamStore, pooled: &Tensor) -> Result<Projection> {
    let (_, d) = pooled.dims2()?;
    if d != head.in_dim() {
        return Err(Error::shape("project", pooled.shape(), &[0, head.in_dim()]));
    }
    let (tape, z) = eval_pass(store, |ctx| {
        let x = ctx.tape.constant(pooled.clone());
        head.forward(ctx, x)
    })?;
    let latents = tape.value(z).clone();
    let degenerate = degenerate_rows(&latents);
    Ok(Projection { latents, degenerate })
}

pub fn classify(head: &Classifier, store: &ParamStore, pooled: &Tensor) -> Result<Tensor> {
    let (tape, y) = eval_pass(store, |ctx| {
        let x = ctx.tape.constant(pooled.clone());
        head.forward(ctx, x)
    })?;
    Ok(tape.value(y).clone())
}

/// Eval-mode segmentation logits `[n, 1, H, W]`.
pub fn seg_forward(net: &SegmentationNet, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let (tape, y) = eval_pass(store, |ctx| {
        let x = ctx.tape.constant(images.clone());
        net.forward(ctx, x)
    })?;
    Ok(tape.value(y).clone())
}

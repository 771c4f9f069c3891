//! Parameterized building blocks. Layers only hold [`ParamId`]s; weights
//! live in a [`ParamStore`] so several copies of one architecture (query,
//! momentum) can share a layout.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::backend::{BatchStats, BnMode, Bound, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// How batch normalization behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated afterwards.
    Train,
    /// Batch statistics, running statistics left alone (momentum encoders).
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

/// Forward-pass context: the tape, the bound parameters and pending
/// running-statistic updates.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub bound: &'a Bound,
    pub mode: Mode,
    updates: Vec<(ParamId, ParamId, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, bound: &'a Bound, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            bound,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    /// Pending running-statistic updates collected during the pass.
    pub fn into_updates(self) -> StatUpdates {
        StatUpdates(self.updates)
    }
}

/// Running-statistic updates produced by a training forward pass.
#[derive(Debug, Default)]
pub struct StatUpdates(Vec<(ParamId, ParamId, BatchStats)>);

impl StatUpdates {
    pub fn apply(self, store: &mut ParamStore) {
        for (mean_id, var_id, stats) in self.0 {
            for (r, b) in store.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in store.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = kaiming_uniform(vec![out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_c]), ParamKind::Trainable));
        Conv {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), self.bias.map(|b| ctx.p(b)));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(vec![channels], 1.0), ParamKind::Buffer),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Eval => {
                let mode = BnMode::Eval {
                    mean: ctx.store.get(self.running_mean).data(),
                    var: ctx.store.get(self.running_var).data(),
                };
                Ok(ctx.tape.batch_norm(x, g, b, mode, BN_EPS)?.0)
            }
            Mode::Train | Mode::TrainFrozenStats => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, BnMode::Train, BN_EPS)?;
                if ctx.mode == Mode::Train {
                    if let Some(stats) = stats {
                        ctx.updates.push((self.running_mean, self.running_var, stats));
                    }
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = kaiming_uniform(vec![out_dim, in_dim], in_dim, rng);
        Linear {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), ParamKind::Trainable),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        let y = ctx.tape.matmul(x, w, true)?;
        ctx.tape.add_bias(y, b)
    }
}

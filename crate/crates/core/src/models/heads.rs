use rand::Rng;

use super::layers::{Ctx, Linear};
use crate::backend::{ParamStore, Var};
use crate::error::Result;

/// Two-layer perceptron mapping pooled features onto the unit sphere.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, in_dim: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        ProjectionHead {
            fc1: Linear::new(store, "head.fc1", in_dim, hidden, rng),
            fc2: Linear::new(store, "head.fc2", hidden, out, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    /// Unnormalized projection, `[n, out]`.
    pub fn raw(&self, ctx: &mut Ctx, pooled: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, pooled)?;
        let h = ctx.tape.relu(h);
        self.fc2.forward(ctx, h)
    }

    /// Unit-norm latent vectors. Rows that project to exactly zero stay zero;
    /// see [`degenerate_rows`].
    pub fn forward(&self, ctx: &mut Ctx, pooled: Var) -> Result<Var> {
        let z = self.raw(ctx, pooled)?;
        ctx.tape.l2_normalize(z)
    }
}

/// Indices of latent rows that are exactly zero (degenerate projections).
pub fn degenerate_rows(latents: &crate::backend::Tensor) -> Vec<usize> {
    (0..latents.shape()[0])
        .filter(|&r| latents.row(r).iter().all(|&v| v == 0.0))
        .collect()
}

/// Single affine layer producing two class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    fc: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, in_dim: usize, rng: &mut impl Rng) -> Self {
        Classifier {
            fc: Linear::new(store, "classifier", in_dim, 2, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, pooled: Var) -> Result<Var> {
        self.fc.forward(ctx, pooled)
    }
}

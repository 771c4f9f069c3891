use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SGD-with-momentum state.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr0: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    velocity: Vec<Option<Tensor>>,
}

impl OptimState {
    pub fn new(lr0: f32, weight_decay: f32, momentum: f32) -> Self {
        OptimState {
            lr0,
            weight_decay,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor> {
        self.velocity.get(index).and_then(|v| v.as_ref())
    }

    /// Replaces the per-parameter velocities (for resuming).
    pub fn set_velocities(&mut self, velocity: Vec<Option<Tensor>>) {
        self.velocity = velocity;
    }
}

/// One SGD step: `v <- momentum * v + grad + wd * param`, `param <- param - lr * v`.
///
/// Entries without a gradient and buffers are left untouched. All gradients
/// are validated before any parameter changes.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimState,
    lr: f32,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != e.value.shape() {
                return Err(Error::shape("sgd_step", e.value.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", e.name)));
            }
        }
    }
    if state.velocity.len() != params.len() {
        state.velocity = vec![None; params.len()];
    }
    for ((e, g), v) in params
        .entries_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.velocity.iter_mut())
    {
        let Some(g) = g else { continue };
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let v = v.get_or_insert_with(|| Tensor::zeros(e.value.shape().to_vec()));
        for ((p, vel), &gr) in e
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(g.data())
        {
            *vel = state.momentum * *vel + gr + state.weight_decay * *p;
            *p -= lr * *vel;
        }
    }
    Ok(())
}

/// Half-cosine decay from `lr0` to zero over `total_steps`; steps past the
/// end clamp to the final value.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f32) -> f32 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    (lr0 as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v), ParamKind::Trainable);
        s
    }

    #[test]
    fn plain_step_and_pure_decay() {
        let mut p = one(1.0);
        let mut st = OptimState::new(0.1, 0.0, 0.0);
        sgd_step(&mut p, &[Some(Tensor::scalar(1.0))], &mut st, 0.1).unwrap();
        assert!((p.entries()[0].value.item() - 0.9).abs() < 1e-7);

        let mut p = one(1.0);
        let mut st = OptimState::new(1.0, 0.1, 0.0);
        sgd_step(&mut p, &[Some(Tensor::scalar(0.0))], &mut st, 1.0).unwrap();
        assert!((p.entries()[0].value.item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = one(1.0);
        let mut st = OptimState::new(0.1, 0.0, 0.9);
        let g = [Some(Tensor::scalar(1.0))];
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert!((p.entries()[0].value.item() - 0.9).abs() < 1e-6);
        sgd_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert!((p.entries()[0].value.item() - 0.71).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one(1.0);
        let mut st = OptimState::new(0.1, 0.0, 0.0);
        let err = sgd_step(&mut p, &[Some(Tensor::scalar(f32::NAN))], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("parameter p"));
        assert_eq!(p.entries()[0].value.item(), 1.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = one(0.37);
        let mut st = OptimState::new(0.1, 0.0, 0.9);
        sgd_step(&mut p, &[Some(Tensor::scalar(5.0))], &mut st, 0.0).unwrap();
        assert_eq!(p.entries()[0].value.item(), 0.37);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.03), 0.03);
        assert!(cosine_lr(10, 10, 0.03).abs() < 1e-9);
        assert!((cosine_lr(5, 10, 0.03) - 0.015).abs() < 1e-9);
        assert_eq!(cosine_lr(15, 10, 0.03), cosine_lr(10, 10, 0.03));
    }
}

//! SGD with classical momentum over a fixed list of parameter tensors.

use crate::error::{Result, TtaError};
use crate::network::{Model, ParamKey};
use crate::tensor::Tensor;

/// Velocity buffers aligned with a parameter-key list; the layout is fixed
/// at construction.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    keys: Vec<ParamKey>,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(model: &Model, keys: Vec<ParamKey>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(TtaError::invalid(format!("lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TtaError::invalid(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        let velocity = keys
            .iter()
            .map(|&k| Tensor::zeros(model.param(k).shape().to_vec()))
            .collect();
        Ok(SgdMomentum {
            lr,
            momentum,
            keys,
            velocity,
        })
    }

    pub fn keys(&self) -> &[ParamKey] {
        &self.keys
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            for x in v.data_mut() {
                *x = 0.0;
            }
        }
    }

    /// v ← μ·v + g; θ ← θ − lr·v. Parameters whose gradient is absent
    /// (e.g. a dropped block's affine) see a zero gradient.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.keys.len() {
            return Err(TtaError::LayoutMismatch {
                what: format!(
                    "optimizer holds {} parameters, got {} gradients",
                    self.keys.len(),
                    grads.len()
                ),
            });
        }
        for (i, &key) in self.keys.iter().enumerate() {
            let param = model.param_mut(key);
            let vel = &mut self.velocity[i];
            if let Some(g) = &grads[i] {
                if g.shape() != param.shape() {
                    return Err(TtaError::LayoutMismatch {
                        what: format!("gradient shape {:?} for {key:?}", g.shape()),
                    });
                }
                g.check_finite("sgd step")?;
                for (v, gv) in vel.data_mut().iter_mut().zip(g.data()) {
                    *v = self.momentum * *v + gv;
                }
            } else {
                for v in vel.data_mut() {
                    *v *= self.momentum;
                }
            }
            for (p, v) in param.data_mut().iter_mut().zip(vel.data()) {
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}

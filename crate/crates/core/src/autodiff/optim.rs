use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// A named tensor owned by a model. Non-trainable entries (batch-norm running
/// statistics) are checkpointed but never receive gradients.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Parameter { name: name.into(), value, grad: None, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Adds gradients from a reverse pass into `grad` of every parameter placed on `tape`.
    /// Gradients accumulate until an optimizer step or [`ParamStore::clear_grads`].
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (id, var) in tape.params() {
            let Some(g) = grads.wrt(var) else { continue };
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(existing) => existing.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
            debug_assert_eq!(tape.value(var).shape(), p.value.shape());
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            weight_decay: 5e-4,
            momentum: 0.0,
            decay_factor: 0.2,
            decay_epochs: vec![60, 120, 160],
            warmup_epochs: 1,
            total_epochs: 200,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return Err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("decay_epochs {:?} must be strictly increasing", self.decay_epochs));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return Err(format!(
                "decay_epochs {:?} must lie below total_epochs {}",
                self.decay_epochs, self.total_epochs
            ));
        }
        Ok(())
    }
}

/// Learning rate for a step. During the warmup epochs the rate ramps linearly per step,
/// reaching `base_lr` on the last warmup step (so the first step of a one-epoch warmup
/// uses `base_lr / steps_per_epoch`). Afterwards it is
/// `base_lr · decay_factor^(number of decay epochs ≤ epoch)`.
pub fn lr_at(epoch: usize, step_in_epoch: usize, steps_per_epoch: usize, cfg: &SgdConfig) -> f64 {
    let decays = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    let lr = cfg.base_lr * cfg.decay_factor.powi(decays as i32);
    if epoch < cfg.warmup_epochs && steps_per_epoch > 0 {
        let total = (cfg.warmup_epochs * steps_per_epoch) as f64;
        let step = (epoch * steps_per_epoch + step_in_epoch + 1) as f64;
        lr * (step / total).min(1.0)
    } else {
        lr
    }
}

/// SGD with L2 weight decay and optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, velocity: Vec::new() }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// `p ← p − lr·(grad + weight_decay·p)` (through the momentum buffer when enabled),
    /// then clears all gradients. Fails without touching anything if a trainable
    /// parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<(), AutodiffError> {
        if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(AutodiffError::StaleGrad(p.name.clone()));
        }
        let lr = T::from_f64_lossy(lr);
        let wd = T::from_f64_lossy(self.cfg.weight_decay);
        let mu = T::from_f64_lossy(self.cfg.momentum);
        self.velocity.resize(store.len(), None);
        for (p, vel) in store.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            let values = p.value.data_mut();
            if self.cfg.momentum > 0.0 {
                let buf = vel.get_or_insert_with(|| vec![T::zero(); values.len()]);
                for ((w, &g), b) in values.iter_mut().zip(grad.data()).zip(buf.iter_mut()) {
                    *b = mu * *b + g + wd * *w;
                    *w = *w - lr * *b;
                }
            } else {
                for (w, &g) in values.iter_mut().zip(grad.data()) {
                    *w = *w - lr * (g + wd * *w);
                }
            }
        }
        Ok(())
    }
}

/// Functional form of one SGD update with the given config (momentum buffers are not kept).
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64, cfg: &SgdConfig) -> Result<(), AutodiffError> {
    Sgd::new(cfg.clone()).step(store, lr)
}

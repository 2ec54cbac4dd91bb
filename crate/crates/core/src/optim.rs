//! Budget hinge loss, the remaining-rate and learning-rate schedules, and
//! momentum SGD with separate gate and backbone parameter groups.

use std::f64::consts::PI;

use crate::error::{MsgcError, Result};
use crate::params::{Grads, ParamKind, ParamStore};

/// `max(lambda * (ratio - tau), 0)` and its derivative w.r.t. the mean MACs.
pub fn budget_loss(mean_batch_macs: f64, m_ori: f64, lambda: f64, tau: f64) -> (f64, f64) {
    debug_assert!(m_ori > 0.0);
    let v = lambda * (mean_batch_macs / m_ori - tau);
    if v > 0.0 {
        (v, lambda / m_ori)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetSchedule {
    pub lambda: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub warm_fraction: f64,
    pub total_epochs: usize,
}

impl BudgetSchedule {
    pub fn new(lambda: f64, tau_end: f64, warm_fraction: f64, total_epochs: usize) -> Result<Self> {
        let s = Self { lambda, tau_start: 1.0, tau_end, warm_fraction, total_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(MsgcError::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return Err(MsgcError::config(format!(
                "tau_end must lie in (0, {}], got {}",
                self.tau_start, self.tau_end
            )));
        }
        if !(self.warm_fraction > 0.0 && self.warm_fraction <= 1.0) {
            return Err(MsgcError::config(format!("warm_fraction must lie in (0, 1], got {}", self.warm_fraction)));
        }
        if self.total_epochs == 0 {
            return Err(MsgcError::config("total_epochs must be positive"));
        }
        Ok(())
    }

    /// Target remaining rate at a fractional epoch (`epoch + iter / iters`).
    pub fn tau_at(&self, epoch: f64) -> f64 {
        let warm = self.warm_fraction * self.total_epochs as f64;
        if epoch >= warm {
            return self.tau_end;
        }
        let t = (epoch / warm).max(0.0);
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

/// Cosine annealing from `base_lr` to 0 over `total_epochs`; `epoch` may be fractional.
pub fn lr_at(epoch: f64, total_epochs: usize, base_lr: f64) -> f64 {
    base_lr * 0.5 * (1.0 + (PI * epoch / total_epochs as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub gate: GroupHyper,
    pub backbone: GroupHyper,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            gate: GroupHyper { lr: 0.075, weight_decay: 0.0 },
            backbone: GroupHyper { lr: 0.015, weight_decay: 1e-4 },
        }
    }
}

impl OptimizerConfig {
    pub fn group(&self, kind: ParamKind) -> Option<GroupHyper> {
        match kind {
            ParamKind::Gate => Some(self.gate),
            ParamKind::Backbone => Some(self.backbone),
            ParamKind::Buffer => None,
        }
    }
}

/// Momentum buffers, one per stored tensor.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: OptimizerConfig,
    velocity: Grads,
}

impl Sgd {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        Self { config, velocity: Grads::zeros_like(store) }
    }

    /// One step with the group learning rates scaled by `lr_scale` (the schedule
    /// factor). Nothing is updated if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr_scale: f64) -> Result<()> {
        for (id, p) in store.iter() {
            if p.kind != ParamKind::Buffer && grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(MsgcError::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.kind)).collect();
        for (id, kind) in ids {
            let Some(h) = self.config.group(kind) else { continue };
            let lr = h.lr * lr_scale;
            let v = self.velocity.get_mut(id);
            let theta = store.get_mut(id);
            for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(grads.get(id)) {
                *v = self.config.momentum * *v + g + h.weight_decay * *t;
                *t -= lr * *v;
            }
        }
        Ok(())
    }
}

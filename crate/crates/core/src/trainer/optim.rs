use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Group, Model};

/// Step decay: `base / factor^floor(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub every: usize,
    pub factor: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.base / self.factor.powi((epoch / self.every) as i32)
    }
}

/// Momentum SGD: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub epoch: usize,
    velocity: BTreeMap<(Group, usize), Vec<f64>>,
}

impl OptimizerState {
    pub fn new(schedule: LrSchedule, momentum: f64) -> Self {
        Self {
            schedule,
            momentum,
            epoch: 0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.at(self.epoch)
    }

    /// Applies one update to every parameter of `group`. `grads` follow
    /// [`crate::nets::Mlp::params`] order. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, model: &mut Model, group: Group, grads: &[Tensor]) -> Result<()> {
        let net = model.net_mut(group);
        let names = param_names(group, net.layers().len());
        if grads.len() != names.len() {
            return Err(Error::Contract(format!(
                "{} expects {} gradients, got {}",
                group.name(),
                names.len(),
                grads.len()
            )));
        }
        for ((g, p), name) in grads.iter().zip(net.params()).zip(&names) {
            if g.shape() != p.shape() {
                return Err(Error::dim("sgd_step", g.shape(), p.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let lr = self.lr();
        for (k, (p, g)) in net.params_mut().zip(grads).enumerate() {
            let v = self.velocity.entry((group, k)).or_insert_with(|| vec![0.0; g.len()]);
            sgd_update(p.data_mut(), g.data(), v, lr, self.momentum);
        }
        Ok(())
    }
}

pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// `m_s.w0`, `m_s.b0`, ... in parameter order.
pub fn param_names(group: Group, layers: usize) -> Vec<String> {
    (0..layers)
        .flat_map(|i| [format!("{}.w{i}", group.name()), format!("{}.b{i}", group.name())])
        .collect()
}

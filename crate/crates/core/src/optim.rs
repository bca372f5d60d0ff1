//! Adam and plain SGD over a [`Module`]'s parameters, in visiting order.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{lit, Module, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr } => lr,
        }
    }

    pub fn build<T: Scalar>(&self) -> Optimizer<T> {
        Optimizer {
            config: *self,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the accumulated gradients. Gradients are left untouched.
    pub fn step<M: Module<T>>(&mut self, module: &mut M) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                let lr: T = lit(lr);
                module.visit_mut("", &mut |_, p| {
                    p.value.scaled_add(-lr, &p.grad);
                });
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if self.m.is_empty() {
                    module.visit("", &mut |_, p| {
                        self.m.push(ArrayD::zeros(p.value.raw_dim()));
                        self.v.push(ArrayD::zeros(p.value.raw_dim()));
                    });
                }
                let t = self.step as i32;
                let step_size: T = lit(lr / (1.0 - beta1.powi(t)));
                let bc2: T = lit(1.0 - beta2.powi(t));
                let (b1, b2, eps): (T, T, T) = (lit(beta1), lit(beta2), lit(eps));
                let one = T::one();
                let mut i = 0;
                let (ms, vs) = (&mut self.m, &mut self.v);
                module.visit_mut("", &mut |_, p| {
                    Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(&mut ms[i])
                        .and(&mut vs[i])
                        .for_each(|w, &g, m, v| {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            *w -= step_size * *m / ((*v / bc2).sqrt() + eps);
                        });
                    i += 1;
                });
            }
        }
    }
}

//! Adam with decoupled weight decay and one learning rate per parameter group.

use crate::autodiff::Matrix;
use crate::model::{ModelParams, ParamGroup};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr_backbone: f64, lr_head: f64, weight_decay: f64) -> Self {
        Self {
            lr_backbone,
            lr_head,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `grads` follow [`ModelParams::trainable`] order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[&Matrix]) {
        let mut slots = params.trainable_mut();
        assert_eq!(slots.len(), grads.len(), "one gradient per trainable array");
        if self.m.is_empty() {
            self.m = slots.iter().map(|(_, s)| vec![0.0; s.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, ((group, values), g)) in slots.iter_mut().zip(grads).enumerate() {
            let lr = match group {
                ParamGroup::Backbone => self.lr_backbone,
                ParamGroup::Head => self.lr_head,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(values.len(), g.len(), "gradient shape follows parameter shape");
            for (j, (p, g)) in values.iter_mut().zip(g.iter()).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
                *p -= lr * (update + self.weight_decay * *p);
            }
        }
    }
}

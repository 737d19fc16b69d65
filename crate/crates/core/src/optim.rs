//! Adam over named parameter groups. Groups step together under one shared
//! iteration counter but carry individual learning rates, matching the
//! convention of training hash tables hot and MLPs cool.

use crate::math::Real;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
struct Group<S> {
    name: String,
    lr: f64,
    m: Vec<S>,
    v: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    cfg: AdamConfig,
    step: u64,
    groups: Vec<Group<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(cfg: AdamConfig, groups: &[(&str, usize, f64)]) -> Self {
        Adam {
            cfg,
            step: 0,
            groups: groups
                .iter()
                .map(|(name, len, lr)| Group {
                    name: name.to_string(),
                    lr: *lr,
                    m: vec![S::zero(); *len],
                    v: vec![S::zero(); *len],
                })
                .collect(),
        }
    }

    pub fn group_index(&self, name: &str) -> usize {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .unwrap_or_else(|| panic!("unknown optimizer group {name}"))
    }

    pub fn set_lr(&mut self, name: &str, lr: f64) {
        let gi = self.group_index(name);
        self.groups[gi].lr = lr;
    }

    /// Advances the shared step counter. Call once per iteration, before the
    /// per-group updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one Adam update to a group's parameters in place.
    pub fn update(&mut self, group: usize, params: &mut [S], grads: &[S]) {
        assert!(self.step > 0, "begin_step before update");
        let g = &mut self.groups[group];
        assert_eq!(params.len(), g.m.len(), "group {} size mismatch", g.name);
        assert_eq!(params.len(), grads.len());
        let b1 = S::of(self.cfg.beta1);
        let b2 = S::of(self.cfg.beta2);
        let one = S::one();
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let lr = S::of(g.lr / bc1);
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());
        let eps = S::of(self.cfg.eps);
        for ((p, gr), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(g.m.iter_mut().zip(g.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * *gr;
            *v = b2 * *v + (one - b2) * *gr * *gr;
            *p = *p - lr * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
}

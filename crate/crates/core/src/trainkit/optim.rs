//! Schedule-free AdamW with f64 state.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;

/// Gradients keyed by parameter name; frozen entries may be omitted.
pub type Grads = HashMap<String, Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfAdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length; 0 disables warmup.
    pub warmup_steps: u64,
    /// Weight the running average by the running maximum of `lr_t·sqrt(1 − β2^t)`
    /// instead of `lr_t`, as the reference schedule-free implementation does.
    #[serde(default)]
    pub bias_corrected_weights: bool,
}

impl Default for SfAdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.0027,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            bias_corrected_weights: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SfAdamW {
    pub config: SfAdamWConfig,
    t: u64,
    lr_sq_sum: f64,
    weight_lr_max: f64,
    /// Trainable entries only, in tree order.
    slots: Vec<(String, Slot)>,
}

impl SfAdamW {
    /// State for the trainable entries of `params`, with `z = x = params` and `v = 0`.
    pub fn new(config: SfAdamWConfig, params: &ParamTree) -> Self {
        let slots = params
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(n, e)| {
                let w: Vec<f64> = e.values().iter().map(|&v| v as f64).collect();
                (
                    n.to_string(),
                    Slot {
                        z: w.clone(),
                        v: vec![0.0; w.len()],
                        x: w,
                    },
                )
            })
            .collect();
        Self {
            config,
            t: 0,
            lr_sq_sum: 0.0,
            weight_lr_max: 0.0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    fn lr_at(&self, t: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 {
            self.config.lr
        } else {
            self.config.lr * (t as f64 / w as f64).min(1.0)
        }
    }

    /// `params` with every trainable entry replaced by `(1 − β1) z + β1 x`.
    pub fn interpolated(&self, params: &ParamTree) -> ParamTree {
        let b1 = self.config.beta1;
        let mut y = params.clone();
        for (name, s) in &self.slots {
            if let Some(e) = y.get_mut(name) {
                for ((dst, z), x) in e.values_mut().iter_mut().zip(&s.z).zip(&s.x) {
                    *dst = ((1.0 - b1) * z + b1 * x) as f32;
                }
            }
        }
        y
    }

    /// One update. `grad_fn` is evaluated at the interpolated point and
    /// returns (loss, gradients). Trainable entries of `params` receive the
    /// averaged iterate `x`; frozen entries are never written.
    pub fn step<F>(&mut self, params: &mut ParamTree, mut grad_fn: F) -> Result<f64>
    where
        F: FnMut(&ParamTree) -> Result<(f64, Grads)>,
    {
        let y = self.interpolated(params);
        let (loss, grads) = grad_fn(&y)?;
        let t = self.t + 1;
        for (name, _) in &self.slots {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Shape(format!("no gradient for trainable parameter {name}")))?;
            let n = y.get(name).map(|e| e.len()).unwrap_or(0);
            if g.len() != n {
                return Err(Error::Shape(format!("gradient for {name} has {} values, expected {n}", g.len())));
            }
            if let Some((i, &v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: name.clone(),
                    step: t,
                    index: i,
                    value: v,
                });
            }
        }
        let c = self.config;
        let lr = self.lr_at(t);
        let bias2 = 1.0 - c.beta2.powi(t as i32);
        let wlr = if c.bias_corrected_weights {
            self.weight_lr_max = self.weight_lr_max.max(lr * bias2.sqrt());
            self.weight_lr_max
        } else {
            lr
        };
        self.lr_sq_sum += wlr * wlr;
        let mix = if self.lr_sq_sum > 0.0 { wlr * wlr / self.lr_sq_sum } else { 0.0 };
        for (name, s) in &mut self.slots {
            let g = &grads[name.as_str()];
            for i in 0..g.len() {
                let yi = (1.0 - c.beta1) * s.z[i] + c.beta1 * s.x[i];
                s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let vhat = s.v[i] / bias2;
                s.z[i] -= lr * (g[i] / (vhat.sqrt() + c.eps) + c.weight_decay * yi);
                s.x[i] = (1.0 - mix) * s.x[i] + mix * s.z[i];
            }
            if let Some(e) = params.get_mut(name) {
                for (dst, x) in e.values_mut().iter_mut().zip(&s.x) {
                    *dst = *x as f32;
                }
            }
        }
        self.t = t;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn scalar(v: f32) -> ParamTree {
        let mut p = ParamTree::new();
        p.insert("w", vec![1], vec![v], Init::Zeros).unwrap();
        p
    }

    fn quad(p: &ParamTree) -> Result<(f64, Grads)> {
        let w = p.values("w")?[0] as f64;
        Ok((0.5 * (w - 3.0).powi(2), Grads::from([("w".to_string(), vec![w - 3.0])])))
    }

    #[test]
    fn plain_weights_need_more_steps_on_the_quadratic() {
        // uniform averaging keeps the early ramp of z in x for a long time
        let run = |steps: usize, bc: bool| {
            let mut p = scalar(0.0);
            let cfg = SfAdamWConfig { lr: 0.1, bias_corrected_weights: bc, ..Default::default() };
            let mut opt = SfAdamW::new(cfg, &p);
            for _ in 0..steps {
                opt.step(&mut p, quad).unwrap();
            }
            (opt.slot("w").unwrap().x[0] - 3.0).abs()
        };
        assert!(run(1000, false) < 1e-3);
        assert!(run(500, true) < 1e-3);
    }

    #[test]
    fn averaging_identity() {
        let mut p = scalar(1.0);
        let mut opt = SfAdamW::new(SfAdamWConfig { lr: 0.05, ..Default::default() }, &p);
        let mut zs = Vec::new();
        for _ in 0..50 {
            opt.step(&mut p, quad).unwrap();
            let s = opt.slot("w").unwrap();
            zs.push(s.z[0]);
            let mean = zs.iter().sum::<f64>() / zs.len() as f64;
            assert!((s.x[0] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn warmup_scales_lr() {
        let mut p = scalar(0.0);
        let mut opt = SfAdamW::new(SfAdamWConfig { lr: 0.1, warmup_steps: 4, ..Default::default() }, &p);
        opt.step(&mut p, quad).unwrap();
        // first Adam step moves z by ~lr_t = 0.025
        assert!((opt.slot("w").unwrap().z[0] - 0.025).abs() < 1e-6);
    }

    #[test]
    fn frozen_untouched_and_nan_rejected() {
        let mut p = scalar(0.5);
        p.insert("f", vec![2], vec![1.25, -7.0], Init::Zeros).unwrap();
        p.get_mut("f").unwrap().frozen = true;
        let before = p.get("f").unwrap().values().to_vec();
        let mut opt = SfAdamW::new(SfAdamWConfig::default(), &p);
        for _ in 0..10 {
            opt.step(&mut p, |y| {
                let (l, mut g) = quad(y)?;
                g.insert("f".into(), vec![1.0, 1.0]);
                Ok((l, g))
            })
            .unwrap();
        }
        assert_eq!(p.get("f").unwrap().values(), &before[..]);
        assert!(opt.slot("f").is_none());
        let err = opt.step(&mut p, |_| Ok((0.0, Grads::from([("w".to_string(), vec![f64::NAN])]))));
        assert!(matches!(err, Err(Error::NonFiniteGradient { step: 11, .. })));
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = scalar(0.75);
        let before = p.to_bytes();
        let mut opt = SfAdamW::new(SfAdamWConfig { lr: 0.0, ..Default::default() }, &p);
        for _ in 0..5 {
            opt.step(&mut p, quad).unwrap();
        }
        assert_eq!(p.to_bytes(), before);
    }
}

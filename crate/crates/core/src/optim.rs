//! Adam (optionally rectified), a Lookahead wrapper, and cosine
//! learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Variance rectification (RAdam): momentum-only steps while the second
    /// moment estimate is unreliable, then a damped adaptive step.
    pub rectified: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rectified: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], lr: f32) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            rectified,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let rect = if rectified { rectification(beta2, self.t) } else { Some(1.0) };
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = match rect {
                    Some(r) => r * (*mi / bc1) / ((*vi / bc2).sqrt() + eps),
                    None => *mi / bc1,
                };
                *w -= lr * update;
            }
        }
    }
}

/// RAdam's variance rectification term, or `None` while the approximated
/// SMA length is at most 5.
fn rectification(beta2: f32, t: i32) -> Option<f32> {
    let (b2, t) = (beta2 as f64, t as f64);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let b2t = b2.powf(t);
    let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
    if rho <= 5.0 {
        return None;
    }
    let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
    Some(r as f32)
}

/// Lookahead: every `k` inner steps the slow weights move `alpha` of the way
/// towards the fast weights, and the fast weights are reset onto them.
#[derive(Clone, Debug)]
pub struct Lookahead {
    pub k: usize,
    pub alpha: f32,
    slow: Vec<Vec<f32>>,
    counter: usize,
}

impl Lookahead {
    pub fn new(k: usize, alpha: f32, params: &[&Tensor<f32>]) -> Self {
        Self {
            k,
            alpha,
            slow: params.iter().map(|p| p.data().to_vec()).collect(),
            counter: 0,
        }
    }

    pub fn after_step(&mut self, params: &mut [&mut Tensor<f32>]) {
        self.counter += 1;
        if self.counter % self.k != 0 {
            return;
        }
        for (slow, p) in self.slow.iter_mut().zip(params.iter_mut()) {
            for (s, w) in slow.iter_mut().zip(p.data_mut()) {
                *s += self.alpha * (*w - *s);
                *w = *s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Adam wrapped in Lookahead (k = 6, alpha = 0.5).
    AdamLookahead,
    /// Rectified Adam wrapped in Lookahead (k = 6, alpha = 0.5).
    Ranger,
}

/// Adam with an optional Lookahead wrapper.
#[derive(Clone, Debug)]
pub struct Optimizer {
    adam: Adam,
    lookahead: Option<Lookahead>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[&Tensor<f32>]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let cfg = AdamConfig {
            rectified: kind == OptimizerKind::Ranger,
            ..Default::default()
        };
        Self {
            adam: Adam::new(cfg, &sizes),
            lookahead: match kind {
                OptimizerKind::Adam => None,
                OptimizerKind::AdamLookahead | OptimizerKind::Ranger => Some(Lookahead::new(6, 0.5, params)),
            },
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], lr: f32) {
        self.adam.step(params, grads, lr);
        if let Some(la) = &mut self.lookahead {
            la.after_step(params);
        }
    }
}

/// `lr(t) = lr_max * (1 + cos(pi * t / T)) / 2`, or constant when disabled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f32,
    pub total_steps: usize,
    pub enabled: bool,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f32 {
        if !self.enabled || self.total_steps == 0 {
            return self.lr_max;
        }
        let progress = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        (self.lr_max as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(p: &Tensor<f32>) -> Tensor<f32> {
        p.map(|v| 2.0 * (v - 3.0))
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Tensor::full(&[4], 0.0f32);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[&p]);
        for _ in 0..2000 {
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g], 0.05);
        }
        assert!(p.data().iter().all(|v| (v - 3.0).abs() < 1e-2));
    }

    #[test]
    fn lookahead_minimizes_quadratic() {
        let mut p = Tensor::full(&[2], -1.0f32);
        let mut opt = Optimizer::new(OptimizerKind::AdamLookahead, &[&p]);
        for _ in 0..3000 {
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g], 0.05);
        }
        assert!(p.data().iter().all(|v| (v - 3.0).abs() < 1e-2));
    }

    #[test]
    fn ranger_minimizes_quadratic() {
        let mut p = Tensor::full(&[2], -1.0f32);
        let mut opt = Optimizer::new(OptimizerKind::Ranger, &[&p]);
        for _ in 0..3000 {
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g], 0.05);
        }
        assert!(p.data().iter().all(|v| (v - 3.0).abs() < 1e-2));
    }

    #[test]
    fn rectification_warms_up() {
        // SMA length exceeds 5 from step 6 on with beta2 = 0.999.
        assert!((1..=5).all(|t| rectification(0.999, t).is_none()));
        let early = rectification(0.999, 6).unwrap();
        let late = rectification(0.999, 10_000).unwrap();
        assert!(early < 0.1 && late > 0.99 && late <= 1.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        for kind in [OptimizerKind::Adam, OptimizerKind::AdamLookahead, OptimizerKind::Ranger] {
            let orig = Tensor::from_fn(&[7], |i| (i as f32 * 0.37).sin());
            let mut p = orig.clone();
            let mut opt = Optimizer::new(kind, &[&p]);
            for _ in 0..13 {
                let g = quad_grad(&p);
                opt.step(&mut [&mut p], &[g], 0.0);
            }
            assert_eq!(p.data(), orig.data());
        }
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = CosineSchedule {
            lr_max: 5e-3,
            total_steps: 1000,
            enabled: true,
        };
        assert_eq!(s.lr(0), 5e-3);
        assert!(s.lr(1000) <= 1e-3 * 5e-3);
        let mut prev = f32::INFINITY;
        for t in 0..=1000 {
            let lr = s.lr(t);
            assert!(lr <= prev);
            prev = lr;
        }
        let flat = CosineSchedule { enabled: false, ..s };
        assert_eq!(flat.lr(500), 5e-3);
    }
}

//! SGD with momentum and weight decay, plus the two learning-rate schedules.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// SGD state: one momentum buffer per parameter, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// v ← momentum·v + grad + weight_decay·param; param ← param − lr·v
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) {
        assert_eq!(
            param.numel(),
            grad.len(),
            "gradient shape mismatch for {name}"
        );
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let momentum = self.momentum;
        let wd = self.weight_decay;
        for ((v, &g), p) in buf.iter_mut().zip(grad).zip(param.data_mut()) {
            *v = momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.buffers
    }

    pub fn restore_buffer(&mut self, name: String, data: Vec<f64>) {
        self.buffers.insert(name, data);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineWithWarmup,
    Step,
}

/// Learning-rate schedule. Cosine-with-warmup is indexed by optimizer step;
/// the step schedule is indexed by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub step_size: u64,
    pub gamma: f64,
}

impl ScheduleSpec {
    pub fn cosine(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineWithWarmup,
            base_lr,
            warmup_steps,
            total_steps,
            step_size: 0,
            gamma: 1.0,
        }
    }

    pub fn step(base_lr: f64, step_size: u64, gamma: f64) -> Self {
        Self {
            kind: ScheduleKind::Step,
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
            step_size,
            gamma,
        }
    }
}

/// lr at time `t`: steps for the cosine schedule, epochs for the step
/// schedule. Warmup ramps linearly on (t+1)/warmup so the very first step
/// already trains; after warmup the cosine decays to zero at `total_steps`.
pub fn lr_at(spec: &ScheduleSpec, t: u64) -> f64 {
    match spec.kind {
        ScheduleKind::CosineWithWarmup => {
            let w = spec.warmup_steps;
            if t < w {
                return spec.base_lr * (t + 1) as f64 / w as f64;
            }
            let total = spec.total_steps.max(w + 1);
            if t >= total {
                return 0.0;
            }
            let progress = (t - w) as f64 / (total - w) as f64;
            0.5 * spec.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        ScheduleKind::Step => {
            let drops = if spec.step_size == 0 {
                0
            } else {
                t / spec.step_size
            };
            spec.base_lr * spec.gamma.powi(drops as i32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step_subtracts_gradient() {
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        sgd.step("p", &mut p, &[0.5, -0.25], 1.0);
        assert_eq!(p.data(), &[0.5, 2.25]);
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_identity() {
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut p = Tensor::from_vec(vec![3.0]);
        sgd.step("p", &mut p, &[0.0], 0.1);
        sgd.step("p", &mut p, &[0.0], 0.1);
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn sgd_matches_hand_recurrence() {
        // Two steps with momentum 0.9, weight decay 5e-4, lr 0.1 on a single
        // weight starting at 1.0 with constant gradient 0.2.
        let momentum = 0.9;
        let wd = 5e-4;
        let lr = 0.1;
        let mut sgd = Sgd::new(momentum, wd);
        let mut p = Tensor::from_vec(vec![1.0]);
        sgd.step("p", &mut p, &[0.2], lr);
        sgd.step("p", &mut p, &[0.2], lr);

        let mut v = 0.0;
        let mut w = 1.0;
        for _ in 0..2 {
            v = momentum * v + 0.2 + wd * w;
            w -= lr * v;
        }
        assert!((p.data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn cosine_hits_base_after_warmup_and_zero_at_end() {
        let spec = ScheduleSpec::cosine(0.1, 5, 100);
        assert!((lr_at(&spec, 5) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(&spec, 100), 0.0);
        assert!(lr_at(&spec, 0) > 0.0);
        // Non-increasing after warmup.
        let mut prev = lr_at(&spec, 5);
        for t in 6..=100 {
            let cur = lr_at(&spec, t);
            assert!(cur <= prev + 1e-15);
            prev = cur;
        }
    }

    #[test]
    fn cosine_matches_closed_form_everywhere() {
        let spec = ScheduleSpec::cosine(0.1, 5, 105);
        for t in 5..105 {
            let expected = 0.5 * 0.1 * (1.0 + (std::f64::consts::PI * (t - 5) as f64 / 100.0).cos());
            assert!((lr_at(&spec, t) - expected).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn step_schedule_floor_boundaries() {
        let spec = ScheduleSpec::step(0.1, 40, 0.5);
        assert_eq!(lr_at(&spec, 39), 0.1);
        assert_eq!(lr_at(&spec, 40), 0.05);
        assert_eq!(lr_at(&spec, 79), 0.05);
        assert_eq!(lr_at(&spec, 80), 0.025);
    }
}

//! Adam and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` when the monitored score has not
/// improved by more than `threshold` for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            factor,
            patience,
            threshold,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Record an epoch's score (higher is better); returns the new learning
    /// rate if it was reduced.
    pub fn observe(&mut self, score: f64, lr: &mut f64) -> Option<f64> {
        if score > self.best + self.threshold {
            self.best = score;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            *lr *= self.factor;
            return Some(*lr);
        }
        None
    }

    pub fn epochs_without_improvement(&self) -> usize {
        self.stale
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![vec![1.0, -1.0]];
        let mut opt = Adam::new(&[2], 0.1);
        opt.step(&mut p, &[vec![3.0, -0.5]]);
        assert!((p[0][0] - 0.9).abs() < 1e-8);
        assert!((p[0][1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![vec![5.0]];
        let mut opt = Adam::new(&[1], 0.1);
        for _ in 0..500 {
            let g = vec![vec![2.0 * (p[0][0] - 1.5)]];
            opt.step(&mut p, &g);
        }
        assert!((p[0][0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn plateau_cuts_after_patience() {
        let mut s = PlateauScheduler::new(0.3, 2, 1e-4);
        let mut lr = 1.0;
        assert_eq!(s.observe(0.5, &mut lr), None);
        assert_eq!(s.observe(0.50005, &mut lr), None);
        assert_eq!(s.observe(0.4, &mut lr), Some(0.3));
        assert_eq!(s.observe(0.6, &mut lr), None);
        assert_eq!(lr, 0.3);
    }
}

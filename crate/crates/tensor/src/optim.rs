//! AdamW with global-norm gradient clipping, plus the cosine learning-rate schedule.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub max_grad_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, max_grad_norm: Some(1.0) }
    }
}

/// Per-parameter moment accumulators and the update counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

/// What one update did, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f32,
    pub clip_scale: f32,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&[f32], &[f32]) {
        (&self.first[i], &self.second[i])
    }

    /// One AdamW update: clip the global gradient norm, then apply bias-corrected
    /// moments and decoupled weight decay.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<StepReport> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::Shape(format!(
                "{} params, {} grads, {} optimizer slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.first[i].len() {
                return Err(TensorError::Shape(format!(
                    "parameter {i}: param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt() as f32;
        if !norm.is_finite() {
            return Err(TensorError::NonFinite("gradient norm"));
        }
        let clip_scale = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr * clip_scale;
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                *w = *w * decay - (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(StepReport { grad_norm: norm, clip_scale })
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at `total_steps`.
/// Steps past the end clamp to `lr_final`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_final: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_final;
    }
    let progress = step as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut st = OptimState::new(AdamWConfig::default(), &[&p]);
        let g = Tensor::zeros(&[3]);
        st.step(&mut [&mut p], &[g], 1e-4).unwrap();
        let f = 1.0 - 1e-4 * 0.05;
        for (got, want) in p.data().iter().zip([1.0f32 * f, -2.0 * f, 0.5 * f]) {
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn scalar_step_matches_closed_form() {
        // Step 1 with g=1: m̂ = 1, v̂ = 1, so w' = w(1 - lr·λ) - lr / (1 + eps).
        let cfg = AdamWConfig { max_grad_norm: None, ..AdamWConfig::default() };
        let (w0, lr) = (0.3f64, 1e-3f64);
        let mut p = Tensor::new(vec![1], vec![w0 as f32]).unwrap();
        let mut st = OptimState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[Tensor::new(vec![1], vec![1.0]).unwrap()], lr as f32).unwrap();
        let want = w0 * (1.0 - lr * 0.05) - lr / (1.0 + 1e-8);
        assert!((p.data()[0] as f64 - want).abs() < 1e-7, "{} vs {want}", p.data()[0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = Tensor::zeros(&[2]);
        let mut b = Tensor::zeros(&[1]);
        let mut st = OptimState::new(AdamWConfig::default(), &[&a, &b]);
        let ga = Tensor::new(vec![2], vec![3.0, 0.0]).unwrap();
        let gb = Tensor::new(vec![1], vec![4.0]).unwrap();
        let rep = st.step(&mut [&mut a, &mut b], &[ga.clone(), gb.clone()], 1e-3).unwrap();
        assert_eq!(rep.grad_norm, 5.0);
        let clipped = ((ga.sum_squares() + gb.sum_squares()).sqrt() as f32) * rep.clip_scale;
        assert!((clipped - 1.0).abs() < 1e-6);
        // first moment after one step is (1-β1)·clipped gradient
        let (m, _) = st.moments(1);
        assert!((m[0] - 0.1 * 4.0 / 5.0).abs() < 1e-6);
    }

    #[test]
    fn step_counter_increments() {
        let mut p = Tensor::zeros(&[1]);
        let mut st = OptimState::new(AdamWConfig::default(), &[&p]);
        for k in 1..=3 {
            st.step(&mut [&mut p], &[Tensor::ones(&[1])], 1e-3).unwrap();
            assert_eq!(st.step_count(), k);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = OptimState::new(AdamWConfig::default(), &[&p]);
        let err = st.step(&mut [&mut p], &[Tensor::zeros(&[3])], 1e-3).unwrap_err();
        assert!(matches!(err, TensorError::Shape(_)));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-5), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 1e-5), 1e-5);
        assert!((cosine_lr(50, 100, 1e-4, 1e-5) - 5.5e-5).abs() < 1e-12);
        assert_eq!(cosine_lr(150, 100, 1e-4, 1e-5), 1e-5);
    }
}

//! RMSProp with momentum and global-norm gradient clipping.
//!
//! ```text
//! g   ← g · min(1, clip / ‖g‖)
//! ms  ← decay · ms + (1 − decay) · g²
//! mom ← momentum · mom + lr_t · g / (√ms + eps)
//! p   ← p − mom
//! ```
//!
//! `lr_t` ramps linearly over `warmup_steps`.

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub decay: f64,
    pub momentum: f64,
    pub eps: f64,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            decay: 0.99,
            momentum: 0.9,
            eps: 1e-8,
            clip_norm: Some(1.0),
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: OptimConfig,
    pub mean_square: Vec<Tensor<T>>,
    pub momentum: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<'a>(config: OptimConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (mean_square, momentum) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            config,
            mean_square,
            momentum,
            step: 0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / w as f64
        }
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<f64> {
        if params.len() != self.mean_square.len() || grads.len() != params.len() {
            return Err(shape_err("optimizer", format!(
                "{} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.mean_square.len()
            )));
        }
        for ((p, g), ms) in params.iter().zip(grads).zip(&self.mean_square) {
            if p.shape() != g.shape() || p.shape() != ms.shape() {
                return Err(shape_err("optimizer", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let c = &self.config;
        let (clip, decay, mom, eps, lr) = (
            T::from_f64_lossy(clip),
            T::from_f64_lossy(c.decay),
            T::from_f64_lossy(c.momentum),
            T::from_f64_lossy(c.eps),
            T::from_f64_lossy(self.lr_at(self.step)),
        );
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let ms = self.mean_square[i].data_mut();
            let mo = self.momentum[i].data_mut();
            for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g * clip;
                ms[j] = decay * ms[j] + (one - decay) * g * g;
                mo[j] = mom * mo[j] + lr * g / (ms[j].sqrt() + eps);
                *x -= mo[j];
            }
        }
        self.step += 1;
        Ok(norm)
    }
}

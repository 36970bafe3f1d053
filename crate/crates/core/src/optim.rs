//! Adam with global gradient-norm clipping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::params::{add_grads, GroupGrads, ParamGroup};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which gradients are rescaled; `<= 0` disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<G: ParamGroup<T>>(cfg: AdamConfig, group: &G) -> Self {
        let zeros: Vec<Vec<T>> = group
            .named()
            .iter()
            .map(|(_, p)| vec![T::zero(); p.numel()])
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one descent step; returns the pre-clipping gradient norm.
    pub fn step<G: ParamGroup<T>>(&mut self, group: &mut G, grads: &GroupGrads<T>) -> T {
        let norm = grads
            .iter()
            .flatten()
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt();
        let clip = T::lit(self.cfg.clip_norm);
        let factor = if self.cfg.clip_norm > 0.0 && norm > clip {
            clip / norm
        } else {
            T::one()
        };
        self.step += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        for (k, (_, p)) in group.named_mut().into_iter().enumerate() {
            for (j, value) in p.values.iter_mut().enumerate() {
                let g = grads[k][j] * factor;
                let m = b1 * self.m[k][j] + (T::one() - b1) * g;
                let v = b2 * self.v[k][j] + (T::one() - b2) * g * g;
                self.m[k][j] = m;
                self.v[k][j] = v;
                *value = *value - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Evaluates `f` on every index concurrently and sums losses and gradients
/// in index order, so the result does not depend on thread scheduling.
pub fn batch_gradients<T, E, F>(indices: &[usize], f: F) -> Result<(T, GroupGrads<T>), E>
where
    T: Scalar,
    E: Send,
    F: Fn(usize) -> Result<(T, GroupGrads<T>), E> + Sync,
{
    let parts = indices.par_iter().map(|&i| f(i)).collect::<Result<Vec<_>, E>>()?;
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().expect("batch_gradients needs a nonempty batch");
    for (l, g) in parts {
        loss = loss + l;
        add_grads(&mut grads, &g);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;

    crate::params::param_group! {
        struct Quad / QuadVars, kind = "test-quad" { x }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut q = Quad {
            x: Param {
                shape: vec![2],
                values: vec![3.0f64, -2.0],
            },
        };
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &q,
        );
        for _ in 0..500 {
            let g = vec![q.x.values.iter().map(|v| 2.0 * (v - 1.0)).collect()];
            opt.step(&mut q, &g);
        }
        for v in &q.x.values {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut q = Quad {
            x: Param::zeros(&[1]),
        };
        let mut opt = Adam::new(AdamConfig::default(), &q);
        let norm: f64 = opt.step(&mut q, &vec![vec![1e6]]);
        assert_eq!(norm, 1e6);
        // first Adam step moves by ~lr regardless of scale
        assert!((q.x.values[0] + 1e-3).abs() < 1e-6);
    }
}

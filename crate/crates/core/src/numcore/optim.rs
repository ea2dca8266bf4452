use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::scalar::flush;
use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        #[serde(default = "adam_lr")]
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn adam_lr() -> f64 {
    1e-3
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            lr: adam_lr(),
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn adam_with_lr(lr: f64) -> Self {
        match Self::adam() {
            OptimizerKind::Adam { beta1, beta2, eps, .. } => OptimizerKind::Adam { lr, beta1, beta2, eps },
            _ => unreachable!(),
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

/// Per-model optimizer state. Moments are allocated on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar = f32> {
    kind: OptimizerKind,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::adam())
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from each tensor's gradient buffer; a missing buffer counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if let OptimizerKind::Adam { .. } = self.kind {
            if self.m.is_empty() {
                self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
                self.v = self.m.clone();
            }
            if self.m.len() != params.len()
                || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
            {
                return Err(Error::shape("parameters do not match optimizer moments"));
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                let lr = T::from_f64_lossy(lr);
                for p in params.iter_mut() {
                    let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
                    p.data_mut().iter_mut().zip(&g).for_each(|(w, &d)| *w -= lr * d);
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.t as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                let step = T::from_f64_lossy(lr / bc1);
                let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
                let eps = T::from_f64_lossy(eps);
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let grad = p.grad().map(|g| g.to_vec());
                    let data = p.data_mut();
                    for i in 0..data.len() {
                        let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                        m[i] = flush(b1 * m[i] + one_b1 * g);
                        v[i] = flush(b2 * v[i] + one_b2 * g * g);
                        data[i] -= step * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: Option<f64>) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap().with_grad();
        if let Some(g) = g {
            t.accumulate_grad(&[g]).unwrap();
        }
        t
    }

    #[test]
    fn sgd_arithmetic() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1 });
        let mut p = param(1.0, Some(0.5));
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        let mut z = param(3.0, Some(0.0));
        opt.step(&mut [&mut z]).unwrap();
        assert_eq!(z.data()[0], 3.0);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.5, -3.0, 1e-3] {
            let mut opt = Optimizer::adam();
            let mut p = param(1.0, Some(g));
            opt.step(&mut [&mut p]).unwrap();
            // m̂ = g, v̂ = g², so Δ = -η g / (|g| + ε)
            let want = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p.data()[0] - want).abs() < 1e-12, "g={g}");
        }
    }

    #[test]
    fn adam_rejects_changed_parameters() {
        let mut opt = Optimizer::adam();
        let mut p = param(1.0, Some(1.0));
        opt.step(&mut [&mut p]).unwrap();
        let mut q = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(opt.step(&mut [&mut q]).is_err());
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut opt = Optimizer::adam();
            let mut p = param(0.3, None);
            for i in 0..50 {
                p.zero_grad();
                p.accumulate_grad(&[(i as f64 * 0.37).sin()]).unwrap();
                opt.step(&mut [&mut p]).unwrap();
            }
            p.data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kind_parses_with_defaults() {
        let k: OptimizerKind = serde_json::from_str(r#"{"kind":"adam"}"#).unwrap();
        assert_eq!(k, OptimizerKind::adam());
        let s: OptimizerKind = serde_json::from_str(r#"{"kind":"sgd","lr":0.1}"#).unwrap();
        assert_eq!(s, OptimizerKind::Sgd { lr: 0.1 });
        assert!(serde_json::from_str::<OptimizerKind>(r#"{"kind":"adam","lr2":1}"#).is_err());
    }
}

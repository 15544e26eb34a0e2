//! First-order optimizers over flat parameter lists.

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `v ← μ·v + g`, `θ ← θ − lr·v`.
    Sgd { momentum: f64 },
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

/// Optimizer hyperparameters plus per-parameter auxiliary buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<E: Element = f32> {
    kind: OptimizerKind,
    first: Vec<Tensor<E>>,
    second: Vec<Tensor<E>>,
    step: u64,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn ensure_buffers(&mut self, params: &[&mut Tensor<E>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
            return Ok(());
        }
        if self.first.len() != params.len() {
            return Err(Error::usage(format!(
                "optimizer initialized for {} parameters, stepped with {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, (b, p)) in self.first.iter().zip(params).enumerate() {
            if b.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    name: format!("optimizer buffer {i}"),
                    expected: b.shape().to_vec(),
                    found: p.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Applies one update in place.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<E>],
        grads: &[Tensor<E>],
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::config(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    name: format!("gradient {i}"),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        self.ensure_buffers(params)?;
        self.step += 1;
        let lr_e = E::from_f64(lr);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = E::from_f64(momentum);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = mu * *vv + gv;
                        *pv -= lr_e * *vv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = E::from_f64(1.0 - beta1.powi(t));
                let c2 = E::from_f64(1.0 - beta2.powi(t));
                let (b1, b2, e) = (E::from_f64(beta1), E::from_f64(beta2), E::from_f64(eps));
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = b1 * *mv + (E::one() - b1) * gv;
                        *vv = b2 * *vv + (E::one() - b2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr_e * m_hat / (v_hat.sqrt() + e);
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

    #[test]
    fn sgd_single_step() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::sgd(0.0));
        let mut p = Tensor::zeros([1]);
        opt.step(&mut [&mut p], &[Tensor::ones([1])], 0.1).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::sgd(0.9));
        let mut p = Tensor::zeros([1]);
        for _ in 0..2 {
            opt.step(&mut [&mut p], &[Tensor::ones([1])], 1.0).unwrap();
        }
        // v1 = 1, v2 = 1.9
        assert!((p.item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_matches_recurrence() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::adam());
        let mut p = Tensor::zeros([1]);
        opt.step(&mut [&mut p], &[Tensor::ones([1])], 0.1).unwrap();
        // Hand-evaluated: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1.
        let (m, v) = (0.1f64, 0.001f64);
        let (mh, vh) = (m / (1.0 - 0.9), v / (1.0 - 0.999));
        let expected = -0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p.item() - expected).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_stays_put() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::adam());
        let mut p = Tensor::full([3], 0.5);
        for _ in 0..10 {
            opt.step(&mut [&mut p], &[Tensor::zeros([3])], 0.1).unwrap();
        }
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 0.1 * 1e-6));
    }

    #[test]
    fn negative_lr_rejected() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::adam());
        let mut p = Tensor::zeros([1]);
        assert!(opt.step(&mut [&mut p], &[Tensor::ones([1])], -1.0).is_err());
    }

    #[test]
    fn buffer_shape_mismatch_rejected() {
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::sgd(0.9));
        let mut p = Tensor::zeros([2]);
        opt.step(&mut [&mut p], &[Tensor::ones([2])], 0.1).unwrap();
        let mut q = Tensor::zeros([3]);
        assert!(opt.step(&mut [&mut q], &[Tensor::ones([3])], 0.1).is_err());
    }
}

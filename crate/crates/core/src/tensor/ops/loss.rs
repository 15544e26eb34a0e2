//! Scalar objectives. All reduce by the mean.

use super::check_same_shape;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let mut out = logits.clone();
    for i in 0..out.batch_size() {
        let row = out.row_mut(i);
        let m = row.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
        let mut z = E::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Row-wise log-softmax of a 2-D tensor.
pub fn log_softmax_rows<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let mut out = logits.clone();
    for i in 0..out.batch_size() {
        let row = out.row_mut(i);
        let m = row.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<E>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::config(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::config(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

impl<'g, E: Element> Var<'g, E> {
    /// Mean of `0.5·d²` for `|d| < 1`, else `|d| − 0.5`, with `d = self − other`.
    pub fn smooth_l1(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("smooth_l1", &a, &b)?;
        let half = E::from_f64(0.5);
        let n = E::from_usize(a.len().max(1));
        let diff = a.zip_map(&b, |x, y| x - y)?;
        let total: E = diff
            .data()
            .iter()
            .map(|&d| {
                if d.abs() < E::one() {
                    half * d * d
                } else {
                    d.abs() - half
                }
            })
            .sum();
        Ok(self.graph.record(
            Tensor::scalar(total / n),
            &[self, other],
            move |g, needs| {
                let s = g.item() / n;
                let da = diff.map(|d| {
                    if d.abs() < E::one() {
                        d * s
                    } else {
                        d.signum() * s
                    }
                });
                let db = needs[1].then(|| da.map(|v| -v));
                vec![needs[0].then_some(da), db]
            },
        ))
    }

    /// Mean squared error.
    pub fn mse(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mse", &a, &b)?;
        let n = E::from_usize(a.len().max(1));
        let diff = a.zip_map(&b, |x, y| x - y)?;
        let total: E = diff.data().iter().map(|&d| d * d).sum();
        Ok(self.graph.record(
            Tensor::scalar(total / n),
            &[self, other],
            move |g, needs| {
                let s = E::from_f64(2.0) * g.item() / n;
                let da = diff.map(|d| d * s);
                let db = needs[1].then(|| da.map(|v| -v));
                vec![needs[0].then_some(da), db]
            },
        ))
    }

    /// Batch mean of `KL(softmax(teacher) ‖ softmax(self))` at temperature 1.
    /// Only the student (`self`) receives a gradient.
    pub fn kd_kl(self, teacher: Var<'g, E>) -> Result<Var<'g, E>> {
        let (s, t) = (self.value(), teacher.value());
        check_same_shape("kd_kl", &t, &s)?;
        let (n, _) = s.dims2()?;
        let p = softmax_rows(&t);
        let log_p = log_softmax_rows(&t);
        let log_q = log_softmax_rows(&s);
        let mut total = E::zero();
        for ((&pi, &lp), &lq) in p.data().iter().zip(log_p.data()).zip(log_q.data()) {
            if pi > E::zero() {
                total += pi * (lp - lq);
            }
        }
        let nb = E::from_usize(n);
        let q = softmax_rows(&s);
        Ok(self
            .graph
            .record(Tensor::scalar(total / nb), &[self], move |g, _| {
                let k = g.item() / nb;
                vec![Some(q.zip_map(&p, |qi, pi| k * (qi - pi)).unwrap())]
            }))
    }

    /// Batch mean of `exp(−logit[target] / scale)`.
    pub fn inception_loss(self, targets: &[usize], scale: f64) -> Result<Var<'g, E>> {
        if !(scale > 0.0) {
            return Err(Error::config(format!(
                "inception scale must be positive, got {scale}"
            )));
        }
        let z = self.value();
        let (n, k) = z.dims2()?;
        check_labels(targets, n, k)?;
        let sc = E::from_f64(scale);
        let terms: Vec<E> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| (-z.data()[i * k + t] / sc).exp())
            .collect();
        let nb = E::from_usize(n);
        let total = terms.iter().copied().sum::<E>() / nb;
        let targets = targets.to_vec();
        Ok(self
            .graph
            .record(Tensor::scalar(total), &[self], move |g, _| {
                let mut dz = Tensor::zeros([n, k]);
                let c = g.item() / (nb * sc);
                for (i, &t) in targets.iter().enumerate() {
                    dz.data_mut()[i * k + t] = -c * terms[i];
                }
                vec![Some(dz)]
            }))
    }

    /// Batch mean of `−log softmax(self)[label]`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, E>> {
        let z = self.value();
        let (n, k) = z.dims2()?;
        check_labels(labels, n, k)?;
        let log_q = log_softmax_rows(&z);
        let nb = E::from_usize(n);
        let total = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| log_q.data()[i * k + l])
            .sum::<E>()
            / nb;
        let labels = labels.to_vec();
        Ok(self
            .graph
            .record(Tensor::scalar(total), &[self], move |g, _| {
                let c = g.item() / nb;
                let mut dz = log_q.map(|v| v.exp() * c);
                for (i, &l) in labels.iter().enumerate() {
                    dz.data_mut()[i * k + l] -= c;
                }
                vec![Some(dz)]
            }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor};

    fn scalar_loss(f: impl Fn(&Graph<f64>) -> f64) -> f64 {
        let g = Graph::<f64>::new();
        f(&g)
    }

    #[test]
    fn smooth_l1_branches() {
        let v = |d: f64| {
            scalar_loss(|g| {
                let a = g.constant(Tensor::new([1], vec![d]).unwrap());
                let b = g.constant(Tensor::zeros([1]));
                a.smooth_l1(b).unwrap().item()
            })
        };
        assert_eq!(v(0.0), 0.0);
        assert_eq!(v(0.5), 0.125);
        assert_eq!(v(3.0), 2.5);
        assert_eq!(v(-3.0), 2.5);
    }

    #[test]
    fn smooth_l1_gradients_are_antisymmetric() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new([2], vec![0.5, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::zeros([2]), true);
        g.backward(a.smooth_l1(b).unwrap()).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.25, 0.5]);
        assert_eq!(g.grad(b).unwrap().data(), &[-0.25, -0.5]);
    }

    #[test]
    fn mse_values() {
        let v = scalar_loss(|g| {
            let a = g.constant(Tensor::new([2], vec![0.0, 2.0]).unwrap());
            let b = g.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
            a.mse(b).unwrap().item()
        });
        assert_eq!(v, 2.5);
    }

    #[test]
    fn kd_kl_direct_summation() {
        let g = Graph::<f64>::new();
        let t = g.constant(Tensor::new([1, 2], vec![2f64.ln(), 0.0]).unwrap());
        let s = g.constant(Tensor::new([1, 2], vec![0.0, 0.0]).unwrap());
        let got = s.kd_kl(t).unwrap().item();
        // p = (2/3, 1/3), q = (1/2, 1/2)
        let p = [2.0 / 3.0, 1.0 / 3.0];
        let oracle: f64 = p.iter().map(|&pi: &f64| pi * (pi / 0.5).ln()).sum();
        assert!((got - oracle).abs() < 1e-7);
        assert_eq!(t.kd_kl(t).unwrap().item(), 0.0);
    }

    #[test]
    fn inception_values() {
        let v = |logit: f64, scale: f64| {
            scalar_loss(|g| {
                let z = g.constant(Tensor::new([1, 2], vec![logit, -5.0]).unwrap());
                z.inception_loss(&[0], scale).unwrap().item()
            })
        };
        assert_eq!(v(0.0, 1.0), 1.0);
        assert!((v(2.0, 1.0) - 0.1353352832366127).abs() < 1e-12);
        assert!((v(2.0, 2.0) - 0.36787944117144233).abs() < 1e-12);
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1, 2]));
        assert!(z.inception_loss(&[0], 0.0).is_err());
        assert!(z.inception_loss(&[2], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([3, 7]));
        let v = z.cross_entropy(&[0, 3, 6]).unwrap().item();
        assert!((v - 7f64.ln()).abs() < 1e-12);
    }
}

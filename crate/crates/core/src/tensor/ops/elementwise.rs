use std::sync::Arc;

use super::check_same_shape;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

impl<'g, E: Element> Var<'g, E> {
    pub fn add(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self.graph.record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.graph.record(out, &[self, other], |g, needs| {
            vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |d, y| d * y).unwrap()),
                needs[1].then(|| g.zip_map(&a, |d, x| d * x).unwrap()),
            ]
        }))
    }

    pub fn div(self, other: Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("div", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x / y)?;
        let quotient = out.clone();
        Ok(self.graph.record(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |d, y| d / y).unwrap()),
                needs[1].then(|| {
                    let t = g.zip_map(&quotient, |d, q| d * q).unwrap();
                    t.zip_map(&b, |v, y| -v / y).unwrap()
                }),
            ]
        }))
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(self, mask: &Tensor<E>) -> Result<Var<'g, E>> {
        let a = self.value();
        check_same_shape("mul_const", &a, mask)?;
        let out = a.zip_map(mask, |x, m| x * m)?;
        let mask = mask.clone();
        Ok(self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&mask, |d, m| d * m).unwrap())]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'g, E> {
        let c = E::from_f64(c);
        let out = self.value().map(|x| x * c);
        self.graph
            .record(out, &[self], move |g, _| vec![Some(g.map(|d| d * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, E> {
        let c = E::from_f64(c);
        let out = self.value().map(|x| x + c);
        self.graph
            .record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'g, E> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'g, E> {
        let out = self.value().map(|x| x.exp());
        let saved = out.clone();
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&saved, |d, y| d * y).unwrap())]
        })
    }

    pub fn ln(self) -> Var<'g, E> {
        let a = self.value();
        let out = a.map(|x| x.ln());
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&a, |d, x| d / x).unwrap())]
        })
    }

    pub fn sqrt(self) -> Var<'g, E> {
        let out = self.value().map(|x| x.sqrt());
        let saved = out.clone();
        let half = E::from_f64(0.5);
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&saved, |d, y| d * half / y).unwrap())]
        })
    }

    pub fn square(self) -> Var<'g, E> {
        let a = self.value();
        let out = a.map(|x| x * x);
        let two = E::from_f64(2.0);
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&a, |d, x| two * d * x).unwrap())]
        })
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(self) -> Var<'g, E> {
        let a = self.value();
        let out = a.map(|x| if x > E::zero() { x } else { E::zero() });
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&a, |d, x| if x > E::zero() { d } else { E::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn sum(self) -> Var<'g, E> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.sum());
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, E> {
        let a = self.value();
        let n = E::from_usize(a.len().max(1));
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.sum() / n);
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item() / n))]
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, E>> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = (*a).clone().reshape(shape)?;
        Ok(self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()).unwrap())]
        }))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(self) -> Result<Var<'g, E>> {
        let shape = self.shape();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape([n, rest])
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Var<'g, E>]) -> Result<Var<'g, E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of zero vars"))?;
        let values: Vec<Arc<Tensor<E>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<E>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.batch_size()).collect();
        Ok(first.graph.record(out, parts, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let part = need.then(|| g.slice_batch(start, start + n));
                    start += n;
                    part
                })
                .collect()
        }))
    }

    /// Gathers entries of the leading axis; repeated indices accumulate gradient.
    pub fn select(self, indices: &[usize]) -> Result<Var<'g, E>> {
        let a = self.value();
        let n = a.batch_size();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::config(format!(
                "select index {bad} out of range {n}"
            )));
        }
        let out = a.select(indices);
        let indices = indices.to_vec();
        let shape = a.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(shape.clone());
            for (row, &i) in indices.iter().enumerate() {
                for (d, &v) in dx.row_mut(i).iter_mut().zip(g.row(row)) {
                    *d += v;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Weighted sum of scalars, `Σ wᵢ·xᵢ`, skipping zero weights.
    pub fn weighted_sum(terms: &[(f64, Var<'g, E>)]) -> Result<Var<'g, E>> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::config("empty weighted sum"))?;
        let graph = first.graph;
        let mut acc: Option<Var<'g, E>> = None;
        for &(w, v) in terms {
            if w == 0.0 {
                continue;
            }
            let t = v.scale(w);
            acc = Some(match acc {
                None => t,
                Some(a) => a.add(t)?,
            });
        }
        Ok(acc.unwrap_or_else(|| graph.constant(Tensor::scalar(E::zero()))))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor, Var};

    #[test]
    fn relu_values_and_kink() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        g.backward(y.sum()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn select_accumulates_repeats() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 2], |i| i as f64), true);
        let y = x.select(&[1, 1, 0]).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        g.backward(y.sum()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::ones([1, 2]), true);
        let b = g.leaf(Tensor::ones([2, 2]), true);
        let c = Var::concat(&[a, b]).unwrap();
        g.backward(c.scale(2.0).sum()).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn weighted_sum_skips_zero_weights() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(2.0), true);
        let b = g.leaf(Tensor::scalar(f64::NAN), true);
        let s = Var::weighted_sum(&[(3.0, a), (0.0, b)]).unwrap();
        assert_eq!(s.item(), 6.0);
    }
}

//! Batch normalization and per-channel moment measurement.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Per-channel statistics of one train-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<E: Element = f32> {
    pub mean: Vec<E>,
    /// Population (biased) variance.
    pub var: Vec<E>,
    /// Elements per channel, `N·H·W`.
    pub count: usize,
}

impl<E: Element> BatchStats<E> {
    /// Exponential update of running estimates:
    /// `r ← (1 − momentum)·r + momentum·batch`.
    ///
    /// The variance fed to the running estimate is the unbiased one.
    pub fn update_running(
        &self,
        running_mean: &mut Tensor<E>,
        running_var: &mut Tensor<E>,
        momentum: f64,
    ) {
        let m = E::from_f64(momentum);
        let keep = E::one() - m;
        let correction =
            E::from_usize(self.count) / E::from_usize(self.count.saturating_sub(1).max(1));
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = keep * *r + m * b * correction;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Shape helper for NCHW (or N×C) inputs: (n, c, spatial).
fn layout<E: Element>(x: &Tensor<E>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::config(format!(
            "channel op expects N×C or NCHW, got {s:?}"
        ))),
    }
}

fn for_channel<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    sp: usize,
    ch: usize,
    mut f: impl FnMut(usize, E),
) {
    for b in 0..n {
        let base = (b * c + ch) * sp;
        for (i, &v) in x[base..base + sp].iter().enumerate() {
            f(base + i, v);
        }
    }
}

fn channel_moments<E: Element>(x: &[E], n: usize, c: usize, sp: usize) -> (Vec<E>, Vec<E>) {
    let m = E::from_usize(n * sp);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut s = E::zero();
        for_channel(x, n, c, sp, ch, |_, v| s += v);
        let mu = s / m;
        let mut s2 = E::zero();
        for_channel(x, n, c, sp, ch, |_, v| s2 += (v - mu) * (v - mu));
        mean[ch] = mu;
        var[ch] = s2 / m;
    }
    (mean, var)
}

fn check_affine<E: Element>(c: usize, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<()> {
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                name: format!("batch_norm {name}"),
                expected: vec![c],
                found: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<'g, E: Element> Var<'g, E> {
    /// Normalizes with this batch's per-channel statistics, returning them so
    /// the caller decides whether running estimates move.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, E>,
        beta: Var<'g, E>,
        eps: f64,
    ) -> Result<(Var<'g, E>, BatchStats<E>)> {
        if !(eps > 0.0) {
            return Err(Error::config(format!(
                "batch_norm eps must be positive, got {eps}"
            )));
        }
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (n, c, sp) = layout(&x)?;
        check_affine(c, &gv, &bv)?;
        if n * sp < 2 {
            return Err(Error::DegenerateBatch(format!(
                "train-mode batch_norm needs >= 2 values per channel, got {}",
                n * sp
            )));
        }
        let (mean, var) = channel_moments(x.data(), n, c, sp);
        let e = E::from_f64(eps);
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + e).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape().to_vec());
        let mut out = Tensor::zeros(x.shape().to_vec());
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for_channel(x.data(), n, c, sp, ch, |i, v| {
                let h = (v - mu) * is;
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = g * h + b;
            });
        }
        let stats = BatchStats {
            mean,
            var,
            count: n * sp,
        };
        let m = E::from_usize(n * sp);
        let var_out = self
            .graph
            .record(out, &[self, gamma, beta], move |dy, needs| {
                let mut sum_dy = vec![E::zero(); c];
                let mut sum_dy_xhat = vec![E::zero(); c];
                for ch in 0..c {
                    for_channel(dy.data(), n, c, sp, ch, |i, d| {
                        sum_dy[ch] += d;
                        sum_dy_xhat[ch] += d * xhat.data()[i];
                    });
                }
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(xhat.shape().to_vec());
                    for ch in 0..c {
                        let k = gv.data()[ch] * inv_std[ch] / m;
                        let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                        for_channel(dy.data(), n, c, sp, ch, |i, d| {
                            dx.data_mut()[i] = k * (m * d - sd - xhat.data()[i] * sdx);
                        });
                    }
                    dx
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::new([c], sum_dy_xhat.clone()).unwrap()),
                    needs[2].then(|| Tensor::new([c], sum_dy.clone()).unwrap()),
                ]
            });
        Ok((var_out, stats))
    }

    /// Normalizes with fixed running estimates.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, E>,
        beta: Var<'g, E>,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
    ) -> Result<Var<'g, E>> {
        if !(eps > 0.0) {
            return Err(Error::config(format!(
                "batch_norm eps must be positive, got {eps}"
            )));
        }
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (n, c, sp) = layout(&x)?;
        check_affine(c, &gv, &bv)?;
        check_affine(c, running_mean, running_var)?;
        let e = E::from_f64(eps);
        let inv_std: Vec<E> = running_var
            .data()
            .iter()
            .map(|&v| E::one() / (v + e).sqrt())
            .collect();
        let mean = running_mean.data().to_vec();
        let mut out = Tensor::zeros(x.shape().to_vec());
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for_channel(x.data(), n, c, sp, ch, |i, v| {
                out.data_mut()[i] = g * (v - mu) * is + b
            });
        }
        Ok(self
            .graph
            .record(out, &[self, gamma, beta], move |dy, needs| {
                let mut dx = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
                let mut dg = vec![E::zero(); c];
                let mut db = vec![E::zero(); c];
                for ch in 0..c {
                    let (mu, is, g) = (mean[ch], inv_std[ch], gv.data()[ch]);
                    for_channel(dy.data(), n, c, sp, ch, |i, d| {
                        db[ch] += d;
                        dg[ch] += d * (x.data()[i] - mu) * is;
                        if let Some(dx) = dx.as_mut() {
                            dx.data_mut()[i] = d * g * is;
                        }
                    });
                }
                vec![
                    dx,
                    needs[1].then(|| Tensor::new([c], dg).unwrap()),
                    needs[2].then(|| Tensor::new([c], db).unwrap()),
                ]
            }))
    }

    /// Full batch-norm step: train mode updates the running buffers in place
    /// (unless `momentum` is zero), eval mode reads them.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        self,
        gamma: Var<'g, E>,
        beta: Var<'g, E>,
        running_mean: &mut Tensor<E>,
        running_var: &mut Tensor<E>,
        mode: NormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var<'g, E>> {
        match mode {
            NormMode::Eval => self.batch_norm_eval(gamma, beta, running_mean, running_var, eps),
            NormMode::Train => {
                let (y, stats) = self.batch_norm_train(gamma, beta, eps)?;
                stats.update_running(running_mean, running_var, momentum);
                Ok(y)
            }
        }
    }

    /// Fixed per-channel affine map `y = x·scale_c + shift_c`.
    pub fn channel_affine(self, scale: &[f64], shift: &[f64]) -> Result<Var<'g, E>> {
        let x = self.value();
        let (n, c, sp) = layout(&x)?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::ShapeMismatch {
                name: "channel_affine".into(),
                expected: vec![c],
                found: vec![scale.len().max(shift.len())],
            });
        }
        let scale: Vec<E> = scale.iter().map(|&v| E::from_f64(v)).collect();
        let shift: Vec<E> = shift.iter().map(|&v| E::from_f64(v)).collect();
        let mut out = Tensor::zeros(x.shape().to_vec());
        for ch in 0..c {
            for_channel(x.data(), n, c, sp, ch, |i, v| {
                out.data_mut()[i] = v * scale[ch] + shift[ch]
            });
        }
        let shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(shape.clone());
            for ch in 0..c {
                for_channel(g.data(), n, c, sp, ch, |i, d| {
                    dx.data_mut()[i] = d * scale[ch]
                });
            }
            vec![Some(dx)]
        }))
    }

    /// Per-channel mean over batch and spatial axes, shape `[C]`.
    pub fn channel_mean(self) -> Result<Var<'g, E>> {
        let x = self.value();
        let (n, c, sp) = layout(&x)?;
        let (mean, _) = channel_moments(x.data(), n, c, sp);
        let m = E::from_usize(n * sp);
        let shape = x.shape().to_vec();
        Ok(self
            .graph
            .record(Tensor::new([c], mean)?, &[self], move |g, _| {
                let mut dx = Tensor::zeros(shape.clone());
                let dd = dx.data_mut();
                for b in 0..n {
                    for ch in 0..c {
                        let v = g.data()[ch] / m;
                        dd[(b * c + ch) * sp..(b * c + ch + 1) * sp].fill(v);
                    }
                }
                vec![Some(dx)]
            }))
    }

    /// Per-channel standard deviation `sqrt(var + eps)` with population
    /// variance, shape `[C]`.
    pub fn channel_std(self, eps: f64) -> Result<Var<'g, E>> {
        let x = self.value();
        let (n, c, sp) = layout(&x)?;
        let (mean, var) = channel_moments(x.data(), n, c, sp);
        let e = E::from_f64(eps);
        let std: Vec<E> = var.iter().map(|&v| (v + e).sqrt()).collect();
        let m = E::from_usize(n * sp);
        let saved = std.clone();
        Ok(self
            .graph
            .record(Tensor::new([c], std)?, &[self], move |g, _| {
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for ch in 0..c {
                    let k = g.data()[ch] / (m * saved[ch]);
                    let mu = mean[ch];
                    for_channel(x.data(), n, c, sp, ch, |i, v| {
                        dx.data_mut()[i] = k * (v - mu)
                    });
                }
                vec![Some(dx)]
            }))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Graph;

    fn affine<'g>(g: &'g Graph<f64>, c: usize) -> (Var<'g, f64>, Var<'g, f64>) {
        (
            g.leaf(Tensor::ones([c]), true),
            g.leaf(Tensor::zeros([c]), true),
        )
    }

    #[test]
    fn eval_identity_normalization() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xv = Tensor::randn([2, 3, 4, 4], 0.0, 1.0, &mut rng);
        let (ga, be) = affine(&g, 3);
        let y = g
            .constant(xv.clone())
            .batch_norm_eval(ga, be, &Tensor::zeros([3]), &Tensor::ones([3]), 1e-12)
            .unwrap();
        assert!(y.value().max_abs_diff(&xv) < 1e-9);
    }

    #[test]
    fn train_two_values_symmetric() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 1);
        let x = g.constant(Tensor::new([2, 1], vec![0.0, 2.0]).unwrap());
        let (y, stats) = x.batch_norm_train(ga, be, 1e-12).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-9);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn errors() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 1);
        let single = g.constant(Tensor::ones([1, 1, 1, 1]));
        assert!(matches!(
            single.batch_norm_train(ga, be, 1e-5),
            Err(Error::DegenerateBatch(_))
        ));
        let x = g.constant(Tensor::ones([2, 1, 1, 1]));
        assert!(matches!(
            x.batch_norm_train(ga, be, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn running_update_rule() {
        let g = Graph::<f64>::new();
        let (ga, be) = affine(&g, 1);
        let x = g.constant(Tensor::new([4, 1], vec![1.0, 3.0, 1.0, 3.0]).unwrap());
        let mut rm = Tensor::zeros([1]);
        let mut rv = Tensor::ones([1]);
        x.batch_norm(ga, be, &mut rm, &mut rv, NormMode::Train, 0.1, 1e-5)
            .unwrap();
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance 4/3
        assert!((rv.data()[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
        let before = (rm.clone(), rv.clone());
        x.batch_norm(ga, be, &mut rm, &mut rv, NormMode::Eval, 0.1, 1e-5)
            .unwrap();
        assert_eq!((rm, rv), before);
    }

    #[test]
    fn running_stats_converge_on_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rm = Tensor::<f32>::zeros([2]);
        let mut rv = Tensor::<f32>::ones([2]);
        // start away from the target so convergence is exercised
        rm.data_mut().fill(3.0);
        rv.data_mut().fill(5.0);
        for _ in 0..200 {
            let g = Graph::<f32>::new();
            let x = g.constant(Tensor::randn([64, 2], 0.0, 1.0, &mut rng));
            let ga = g.constant(Tensor::ones([2]));
            let be = g.constant(Tensor::zeros([2]));
            x.batch_norm(ga, be, &mut rm, &mut rv, NormMode::Train, 0.1, 1e-5)
                .unwrap();
        }
        for c in 0..2 {
            assert!(rm.data()[c].abs() < 0.1, "mean {}", rm.data()[c]);
            assert!((rv.data()[c] - 1.0).abs() < 0.2, "var {}", rv.data()[c]);
        }
    }

    #[test]
    fn channel_moments_values() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2, 1, 1, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        assert_eq!(x.channel_mean().unwrap().value().data(), &[3.0]);
        let s = x.channel_std(0.0).unwrap().value().data()[0];
        assert!((s - 5f64.sqrt()).abs() < 1e-12);
        let constant = g.constant(Tensor::full([2, 1, 2, 2], 0.5));
        let s = constant.channel_std(1e-8).unwrap().value().data()[0];
        assert!(s > 0.0 && s.is_finite());
    }
}

//! Divergence between measured activation moments and stored BN statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BnReference, BnTarget, ForwardOptions, ForwardOutput, Model};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Added to measured variances so constant channels keep a finite divergence.
pub const STAT_EPS: f64 = 1e-8;

/// How measured moments are compared with the reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatMetric {
    /// KL divergence between the fitted isotropic Gaussians.
    #[default]
    Kl,
    /// Squared error over both moments, `(μ̃−μ̂)² + (σ̃−σ̂)²`.
    Mse,
}

/// `log(σ̃/σ̂) − ½(1 − (σ̂² + (μ̂−μ̃)²)/σ̃²)` for one channel, where tilde is
/// measured and hat is the reference.
pub fn bns(measured: (f64, f64), reference: (f64, f64)) -> f64 {
    let (mt, st) = measured;
    let (mh, sh) = reference;
    (st / sh).ln() - 0.5 * (1.0 - (sh * sh + (mh - mt) * (mh - mt)) / (st * st))
}

/// Channel mean of [`bns`] for one layer.
pub fn bns_layer(mean: &[f64], std: &[f64], target: &BnTarget) -> Result<f64> {
    check_target(target, mean.len())?;
    let c = mean.len() as f64;
    Ok(mean
        .iter()
        .zip(std)
        .zip(target.mean.iter().zip(&target.std))
        .map(|((&mt, &st), (&mh, &sh))| bns((mt, st), (mh, sh)))
        .sum::<f64>()
        / c)
}

fn check_target(target: &BnTarget, channels: usize) -> Result<()> {
    if target.mean.len() != channels || target.std.len() != channels {
        return Err(Error::ShapeMismatch {
            name: format!("reference layer {}", target.name),
            expected: vec![target.mean.len()],
            found: vec![channels],
        });
    }
    if let Some(s) = target.std.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Data(format!(
            "reference layer {} has non-positive std {s}",
            target.name
        )));
    }
    Ok(())
}

/// Measured `(μ̃, σ̃)` for every reference layer, in reference order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnSnapshot {
    pub names: Vec<String>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl BnSnapshot {
    /// Per-layer divergences against `reference`.
    pub fn layer_divergences(
        &self,
        reference: &BnReference,
        metric: StatMetric,
    ) -> Result<Vec<f64>> {
        if reference.len() != self.means.len() {
            return Err(layer_count_error(reference.len(), self.means.len()));
        }
        reference
            .layers
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(t, (m, s))| match metric {
                StatMetric::Kl => bns_layer(m, s, t),
                StatMetric::Mse => {
                    check_target(t, m.len())?;
                    let c = m.len() as f64;
                    Ok(m.iter()
                        .zip(s)
                        .zip(t.mean.iter().zip(&t.std))
                        .map(|((mt, st), (mh, sh))| (mt - mh).powi(2) + (st - sh).powi(2))
                        .sum::<f64>()
                        / c)
                }
            })
            .collect()
    }

    /// Mean of the per-layer divergences.
    pub fn j_kl(&self, reference: &BnReference, metric: StatMetric) -> Result<f64> {
        let d = self.layer_divergences(reference, metric)?;
        Ok(d.iter().sum::<f64>() / d.len() as f64)
    }
}

fn layer_count_error(expected: usize, found: usize) -> Error {
    Error::ShapeMismatch {
        name: "bn reference layers".into(),
        expected: vec![expected],
        found: vec![found],
    }
}

impl<'g, E: Element> Var<'g, E> {
    /// Differentiable channel-mean divergence of measured moments `self`
    /// (mean, shape `[C]`) and `std` (shape `[C]`) from `target`.
    pub fn stat_divergence(
        self,
        std: Var<'g, E>,
        target: &BnTarget,
        metric: StatMetric,
    ) -> Result<Var<'g, E>> {
        let (mv, sv) = (self.value(), std.value());
        let c = mv.len();
        if sv.len() != c {
            return Err(Error::ShapeMismatch {
                name: "measured std".into(),
                expected: vec![c],
                found: sv.shape().to_vec(),
            });
        }
        check_target(target, c)?;
        let mt: Vec<f64> = mv.data().iter().map(|v| v.as_f64()).collect();
        let st: Vec<f64> = sv.data().iter().map(|v| v.as_f64()).collect();
        let (mh, sh) = (target.mean.clone(), target.std.clone());
        let cf = c as f64;
        let value = match metric {
            StatMetric::Kl => bns_layer(&mt, &st, target)?,
            StatMetric::Mse => {
                (0..c)
                    .map(|i| (mt[i] - mh[i]).powi(2) + (st[i] - sh[i]).powi(2))
                    .sum::<f64>()
                    / cf
            }
        };
        Ok(self.graph().record(
            Tensor::scalar(E::from_f64(value)),
            &[self, std],
            move |g, _| {
                let k = g.item().as_f64() / cf;
                let (dm, ds): (Vec<E>, Vec<E>) = (0..c)
                    .map(|i| {
                        let d = mt[i] - mh[i];
                        let (a, b) = match metric {
                            StatMetric::Kl => {
                                let s2 = st[i] * st[i];
                                (d / s2, 1.0 / st[i] - (sh[i] * sh[i] + d * d) / (s2 * st[i]))
                            }
                            StatMetric::Mse => (2.0 * d, 2.0 * (st[i] - sh[i])),
                        };
                        (E::from_f64(k * a), E::from_f64(k * b))
                    })
                    .unzip();
                vec![
                    Some(Tensor::new([c], dm).unwrap()),
                    Some(Tensor::new([c], ds).unwrap()),
                ]
            },
        ))
    }
}

/// Result of an eval-mode forward with statistic observers.
pub struct StatsForward<'g, E: Element> {
    /// Differentiable mean divergence over all reference layers.
    pub j_kl: Var<'g, E>,
    pub per_layer: Vec<f64>,
    pub snapshot: BnSnapshot,
    pub output: ForwardOutput<'g, E>,
}

/// Eval-mode forward of `x` that measures moments at the input (when the
/// reference has an input layer) and at every BN input. Running statistics
/// are never touched.
pub fn stats_forward<'g, E: Element>(
    model: &Model<E>,
    params: &[Var<'g, E>],
    x: Var<'g, E>,
    reference: &BnReference,
    metric: StatMetric,
    taps: bool,
) -> Result<StatsForward<'g, E>> {
    let expected = model.num_bn() + usize::from(reference.input_layer);
    if reference.len() != expected {
        return Err(layer_count_error(reference.len(), expected));
    }
    let mut opts = ForwardOptions::eval().with_bn_inputs();
    if taps {
        opts = opts.with_taps();
    }
    let output = model.forward(params, x, opts)?;
    let mut observed = Vec::with_capacity(expected);
    if reference.input_layer {
        observed.push(x);
    }
    observed.extend(output.bn_inputs.iter().copied());
    let mut terms = Vec::with_capacity(expected);
    let mut per_layer = Vec::with_capacity(expected);
    let mut snapshot = BnSnapshot {
        names: Vec::with_capacity(expected),
        means: Vec::with_capacity(expected),
        stds: Vec::with_capacity(expected),
    };
    for (a, target) in observed.into_iter().zip(&reference.layers) {
        let mean = a.channel_mean()?;
        let std = a.channel_std(STAT_EPS)?;
        let d = mean.stat_divergence(std, target, metric)?;
        per_layer.push(d.item().as_f64());
        snapshot.names.push(target.name.clone());
        snapshot
            .means
            .push(mean.value().data().iter().map(|v| v.as_f64()).collect());
        snapshot
            .stds
            .push(std.value().data().iter().map(|v| v.as_f64()).collect());
        terms.push((1.0 / expected as f64, d));
    }
    Ok(StatsForward {
        j_kl: Var::weighted_sum(&terms)?,
        per_layer,
        snapshot,
        output,
    })
}

/// 𝒥_KL of one batch of images (no gradient).
pub fn j_kl<E: Element>(
    model: &Model<E>,
    images: &Tensor<E>,
    reference: &BnReference,
    metric: StatMetric,
) -> Result<f64> {
    let g = Graph::new();
    let params = model.bind(&g, false);
    let out = stats_forward(
        model,
        &params,
        g.constant(images.clone()),
        reference,
        metric,
        false,
    )?;
    Ok(out.j_kl.item().as_f64())
}

//! Synthetic sample generation by optimizing the input of a trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::augment::{in_batch_augment, AugmentSet};
use super::stats::{j_kl, stats_forward, StatMetric};
use crate::datasets::{splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{BnReference, Model};
use crate::tensor::optim::{OptimizerKind, OptimizerState};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::train::check_finite;

/// Which objective terms a configuration optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Bns,
    Inception,
    BnsInception,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Bns => "bns",
            Scheme::Inception => "inception",
            Scheme::BnsInception => "bns+inception",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// α, weight of the statistics loss.
    pub stats_scale: f64,
    /// β, weight of the inception loss.
    pub class_scale: f64,
    /// γ, weight of the image prior.
    pub prior_scale: f64,
    /// Optimization steps per batch.
    pub budget: usize,
    pub batch_size: usize,
    /// Temperature of the inception loss `exp(−logit/class_temp)`.
    pub class_temp: f64,
    pub prior_kernel: usize,
    pub prior_sigma: f64,
    pub duplicates: usize,
    pub augment: AugmentSet,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `(step, factor)` multiplicative learning-rate drops.
    pub lr_drops: Vec<(usize, f64)>,
    pub metric: StatMetric,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::bns()
    }
}

impl GenConfig {
    /// Statistics only: scales (1, 0, 0).
    pub fn bns() -> Self {
        Self {
            stats_scale: 1.0,
            class_scale: 0.0,
            prior_scale: 0.0,
            budget: 1000,
            batch_size: 64,
            class_temp: 1.0,
            prior_kernel: 5,
            prior_sigma: 1.0,
            duplicates: 4,
            augment: AugmentSet::all(),
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            lr_drops: vec![(800, 0.1)],
            metric: StatMetric::Kl,
            seed: 0,
        }
    }

    /// Class logit plus image prior: scales (0, 1e-3, 1).
    pub fn inception() -> Self {
        Self {
            stats_scale: 0.0,
            class_scale: 1e-3,
            prior_scale: 1.0,
            ..Self::bns()
        }
    }

    /// All three terms: scales (1, 1e-3, 1).
    pub fn bns_inception() -> Self {
        Self {
            class_scale: 1e-3,
            prior_scale: 1.0,
            ..Self::bns()
        }
    }

    pub fn for_scheme(scheme: Scheme) -> Self {
        match scheme {
            Scheme::Bns => Self::bns(),
            Scheme::Inception => Self::inception(),
            Scheme::BnsInception => Self::bns_inception(),
        }
    }

    /// Keeps drop steps at the same fraction of the budget.
    pub fn with_budget(mut self, budget: usize) -> Self {
        let old = self.budget.max(1) as f64;
        for d in &mut self.lr_drops {
            d.0 = ((d.0 as f64 / old) * budget as f64).round() as usize;
        }
        self.budget = budget;
        self
    }

    pub fn scheme(&self) -> Result<Scheme> {
        self.validate()?;
        Ok(match (self.stats_scale > 0.0, self.class_scale > 0.0) {
            (true, false) => Scheme::Bns,
            (false, true) => Scheme::Inception,
            _ => Scheme::BnsInception,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::config("generation budget must be at least 1"));
        }
        if self.duplicates == 0 {
            return Err(Error::config("generation needs at least one duplicate"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("generation batch size must be positive"));
        }
        for (name, v) in [
            ("stats_scale", self.stats_scale),
            ("class_scale", self.class_scale),
            ("prior_scale", self.prior_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.stats_scale == 0.0 && self.class_scale == 0.0 {
            return Err(Error::config(
                "stats_scale and class_scale are both zero; the prior alone generates nothing",
            ));
        }
        if !(self.class_temp > 0.0) {
            return Err(Error::config("class_temp must be positive"));
        }
        crate::tensor::ops::gaussian_kernel(self.prior_kernel, self.prior_sigma)?;
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::config("invalid Adam parameters"));
        }
        Ok(())
    }

    fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::constant_with_drops(self.lr, self.budget, self.lr_drops.clone())
    }
}

/// A batch of generated images in `[0, 1]` with one target per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch<E: Element = f32> {
    pub images: Tensor<E>,
    pub targets: Vec<usize>,
    /// 𝒥_KL of `images` at save time (`NaN` when no reference was used).
    pub j_kl: f64,
    /// 𝒥_KL of the clamped starting noise.
    pub initial_j_kl: f64,
}

impl<E: Element> SyntheticBatch<E> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// 8-bit dataset labeled with the batch targets.
    pub fn to_dataset(&self, num_classes: usize) -> Result<Dataset> {
        Dataset::from_tensor(&self.images, Some(self.targets.clone()), num_classes)
    }
}

/// `mse(X, smooth(X))` with the smoothed branch held constant.
pub fn prior_loss<'g, E: Element>(x: Var<'g, E>, kernel: usize, sigma: f64) -> Result<Var<'g, E>> {
    let smooth = x.gaussian_smooth(kernel, sigma)?.detach();
    x.mse(smooth)
}

fn teacher_labels<E: Element>(model: &Model<E>, images: &Tensor<E>) -> Result<Vec<usize>> {
    Ok(model.predict(images)?.argmax_rows())
}

fn clamp_unit<E: Element>(x: &mut Tensor<E>) {
    for v in x.data_mut() {
        *v = v.max(E::zero()).min(E::one());
    }
}

/// I.i.d. normal pixels with per-channel moments, clamped to `[0, 1]` and
/// labeled by the model's argmax.
pub fn generate_gaussian<E: Element>(
    model: &Model<E>,
    n: usize,
    mean: &[f64],
    std: &[f64],
    seed: u64,
) -> Result<SyntheticBatch<E>> {
    let [c, h, w] = model.arch().input_chw;
    if mean.len() != c || std.len() != c {
        return Err(Error::config(format!("gaussian moments need {c} channels")));
    }
    if let Some(s) = std.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::config(format!(
            "gaussian std must be finite and >= 0, got {s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = mean
        .iter()
        .zip(std)
        .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::config(e.to_string())))
        .collect::<Result<_>>()?;
    let plane = h * w;
    let mut images = Tensor::from_fn([n, c, h, w], |i| {
        E::from_f64(dists[(i / plane) % c].sample(&mut rng))
    });
    clamp_unit(&mut images);
    let targets = teacher_labels(model, &images)?;
    Ok(SyntheticBatch {
        images,
        targets,
        j_kl: f64::NAN,
        initial_j_kl: f64::NAN,
    })
}

/// One step's objective values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    pub step: usize,
    pub lr: f64,
    pub j_kl: f64,
    pub prior_loss: f64,
    pub inception_loss: f64,
    pub loss: f64,
}

/// Everything a monitored run produces.
#[derive(Clone, Debug)]
pub struct GenerationTrace<E: Element = f32> {
    pub records: Vec<GenRecord>,
    /// `(step, batch)` for each requested snapshot step.
    pub snapshots: Vec<(usize, SyntheticBatch<E>)>,
    pub batch: SyntheticBatch<E>,
}

/// Runs the optimization on one batch and returns the final samples.
pub fn generate<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    cfg: &GenConfig,
) -> Result<SyntheticBatch<E>> {
    Ok(run(model, reference, cfg, &[], None)?.batch)
}

/// Like [`generate`] but records every step's objective terms (optimized or
/// not) and keeps snapshots of the clamped batch at `snapshot_steps`
/// (0 is the starting noise, `budget` the final batch).
pub fn monitor_generation<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    cfg: &GenConfig,
    snapshot_steps: &[usize],
    metrics: Option<&mut Metrics>,
) -> Result<GenerationTrace<E>> {
    if let Some(&s) = snapshot_steps.iter().find(|&&s| s > cfg.budget) {
        return Err(Error::config(format!(
            "snapshot step {s} beyond budget {}",
            cfg.budget
        )));
    }
    run(model, reference, cfg, snapshot_steps, metrics)
}

/// Generates `n` samples in batches of `cfg.batch_size`, each batch seeded
/// from `cfg.seed` and its index. The first `k` samples of a larger run equal
/// a run of `k` samples when `k` is a multiple of the batch size.
pub fn generate_dataset<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    cfg: &GenConfig,
    n: usize,
    mut metrics: Option<&mut Metrics>,
) -> Result<(Dataset, Vec<f64>)> {
    cfg.validate()?;
    let mut parts = Vec::new();
    let mut scores = Vec::new();
    let mut done = 0;
    let mut index = 0u64;
    while done < n {
        let size = cfg.batch_size.min(n - done);
        let batch_cfg = GenConfig {
            batch_size: size,
            seed: batch_seed(cfg.seed, index),
            ..cfg.clone()
        };
        let batch = run(model, reference, &batch_cfg, &[], None)?.batch;
        if let Some(m) = metrics.as_deref_mut() {
            m.log(json!({"batch": index, "samples": size, "j_kl": batch.j_kl, "initial_j_kl": batch.initial_j_kl}))?;
        }
        log::info!(
            "generated batch {index} ({size} samples), j_kl {:.4}",
            batch.j_kl
        );
        scores.push(batch.j_kl);
        parts.push(batch.to_dataset(model.arch().num_classes)?);
        done += size;
        index += 1;
    }
    let refs: Vec<&Dataset> = parts.iter().collect();
    Ok((Dataset::concat(&refs)?, scores))
}

pub fn batch_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

fn measure<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    cfg: &GenConfig,
    x: &Tensor<E>,
) -> Result<f64> {
    j_kl(model, x, reference, cfg.metric)
}

fn snapshot<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    cfg: &GenConfig,
    x: &Tensor<E>,
    targets: &[usize],
    scheme: Scheme,
    initial: f64,
) -> Result<SyntheticBatch<E>> {
    let mut images = x.clone();
    clamp_unit(&mut images);
    let targets = match scheme {
        Scheme::Bns => teacher_labels(model, &images)?,
        _ => targets.to_vec(),
    };
    Ok(SyntheticBatch {
        j_kl: measure(model, reference, cfg, &images)?,
        images,
        targets,
        initial_j_kl: initial,
    })
}

fn run<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    cfg: &GenConfig,
    snapshot_steps: &[usize],
    mut metrics: Option<&mut Metrics>,
) -> Result<GenerationTrace<E>> {
    let scheme = cfg.scheme()?;
    let schedule = cfg.schedule()?;
    let classes = model.arch().num_classes;
    let [c, h, w] = model.arch().input_chw;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::<E>::randn([cfg.batch_size, c, h, w], 0.0, 1.0, &mut rng);
    let targets: Vec<usize> = (0..cfg.batch_size)
        .map(|_| rng.random_range(0..classes))
        .collect();
    let dup_targets: Vec<usize> = (0..cfg.duplicates)
        .flat_map(|_| targets.iter().copied())
        .collect();
    let mut opt = OptimizerState::new(OptimizerKind::Adam {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    });
    let mut start = x.clone();
    clamp_unit(&mut start);
    let initial = measure(model, reference, cfg, &start)?;
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let monitored = metrics.is_some() || !snapshot_steps.is_empty();
    for step in 0..cfg.budget {
        clamp_unit(&mut x);
        if snapshot_steps.contains(&step) {
            snapshots.push((
                step,
                snapshot(model, reference, cfg, &x, &targets, scheme, initial)?,
            ));
        }
        let g = Graph::new();
        let params = model.bind(&g, false);
        let xv = g.leaf(x.clone(), true);
        let aug = in_batch_augment(xv, cfg.duplicates, cfg.augment, &mut rng)?;
        let mut terms = Vec::with_capacity(3);
        let prior_var = if cfg.prior_scale > 0.0 {
            prior_loss(aug, cfg.prior_kernel, cfg.prior_sigma)?
        } else {
            prior_loss(aug.detach(), cfg.prior_kernel, cfg.prior_sigma)?
        };
        let prior = prior_var.item().as_f64();
        check_finite(step, "prior_loss", prior)?;
        if cfg.prior_scale > 0.0 {
            terms.push((cfg.prior_scale, prior_var));
        }
        let fwd = stats_forward(model, &params, aug, reference, cfg.metric, false)?;
        let stats = fwd.j_kl.item().as_f64();
        check_finite(step, "stats_loss", stats)?;
        if cfg.stats_scale > 0.0 {
            terms.push((cfg.stats_scale, fwd.j_kl));
        }
        let inception_var = fwd
            .output
            .logits
            .inception_loss(&dup_targets, cfg.class_temp)?;
        let inception = inception_var.item().as_f64();
        if cfg.class_scale > 0.0 {
            check_finite(step, "inception_loss", inception)?;
            terms.push((cfg.class_scale, inception_var));
        }
        let loss = Var::weighted_sum(&terms)?;
        let loss_value = loss.item().as_f64();
        check_finite(step, "total_loss", loss_value)?;
        g.backward(loss)?;
        let grad = g.grad_or_zero(xv);
        let lr = schedule.lr_at(step)?;
        if monitored {
            let rec = GenRecord {
                step,
                lr,
                j_kl: stats,
                prior_loss: prior,
                inception_loss: inception,
                loss: loss_value,
            };
            if let Some(m) = metrics.as_deref_mut() {
                m.log(rec)?;
            }
            records.push(rec);
        }
        drop(g);
        opt.step(&mut [&mut x], &[grad], lr)?;
    }
    let batch = snapshot(model, reference, cfg, &x, &targets, scheme, initial)?;
    if snapshot_steps.contains(&cfg.budget) {
        snapshots.push((cfg.budget, batch.clone()));
    }
    Ok(GenerationTrace {
        records,
        snapshots,
        batch,
    })
}

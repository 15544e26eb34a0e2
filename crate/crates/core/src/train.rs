//! Supervised training of a classifier with cross-entropy (produces the
//! teacher every other stage starts from).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::{standard_augment, Dataset};
use crate::distill::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{ForwardOptions, Model};
use crate::tensor::optim::{OptimizerKind, OptimizerState};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::{Element, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Evaluate on the validation set every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            warmup_steps: 100,
            weight_decay: 5e-4,
            eval_every: 500,
            augment: true,
        }
    }
}

/// Adds `decay·θ` to the gradients of conv and linear weights.
pub(crate) fn apply_weight_decay<E: Element>(
    model: &Model<E>,
    grads: &mut [Tensor<E>],
    decay: f64,
) {
    if decay == 0.0 {
        return;
    }
    let d = E::from_f64(decay);
    for (p, g) in model.params().iter().zip(grads.iter_mut()) {
        if p.name.ends_with(".weight") {
            for (gv, &w) in g.data_mut().iter_mut().zip(p.value.data()) {
                *gv += d * w;
            }
        }
    }
}

pub(crate) fn check_finite(step: usize, component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            component: component.to_string(),
            value,
        })
    }
}

/// Cross-entropy training with SGD-momentum on a warmup + cosine schedule,
/// sampling batches with replacement. Returns the final validation report.
pub fn train_classifier<E: Element>(
    model: &mut Model<E>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    metrics: &mut Metrics,
) -> Result<EvalReport> {
    if train.labels().is_none() {
        return Err(Error::Data("training needs labels".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::config("training batch size must be at least 2"));
    }
    let schedule = LrSchedule::warmup_cosine(cfg.lr, cfg.warmup_steps.min(cfg.steps), cfg.steps)?;
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..cfg.steps {
        let idx = train.sample_indices(cfg.batch_size, &mut rng);
        let labels = train.batch_labels(&idx)?;
        let pad = if cfg.augment { 4 } else { 0 };
        let batch = standard_augment(&train.images::<E>(&idx), pad, cfg.augment, &mut rng)?;
        let (loss, mut grads) = {
            let g = Graph::new();
            let params = model.bind(&g, true);
            let out = model.forward(&params, g.constant(batch), ForwardOptions::train())?;
            let loss = out.logits.cross_entropy(&labels)?;
            let value = loss.item().as_f64();
            check_finite(step, "cross_entropy", value)?;
            g.backward(loss)?;
            let grads: Vec<Tensor<E>> = params.iter().map(|&p| g.grad_or_zero(p)).collect();
            model.update_state(&out)?;
            (value, grads)
        };
        apply_weight_decay(model, &mut grads, cfg.weight_decay);
        let lr = schedule.lr_at(step)?;
        opt.step(&mut model.params_mut(), &grads, lr)?;
        let mut rec = json!({"step": step + 1, "lr": lr, "loss": loss});
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            rec["val_top1"] = json!(evaluate(model, val)?.top1);
        }
        if (step + 1) % 50 == 0 || rec.get("val_top1").is_some() {
            metrics.log(&rec)?;
        }
    }
    let report = evaluate(model, val)?;
    metrics.log(json!({"step": cfg.steps, "val_top1": report.top1}))?;
    Ok(report)
}

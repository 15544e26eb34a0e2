//! Quantized knowledge distillation and the cross-entropy fine-tune baseline.

mod eval;

pub use eval::{evaluate, mean_std, EvalReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::{splitmix64, standard_augment, Dataset};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{ForwardOptions, Model};
use crate::tensor::optim::{OptimizerKind, OptimizerState};
use crate::tensor::schedule::LrSchedule;
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::train::{apply_weight_decay, check_finite};

/// Pixels of zero padding for the random crops applied to every batch.
pub const AUGMENT_PAD: usize = 4;

/// Which loss terms and input transforms a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Kd,
    KdIq,
    KdMix,
    #[default]
    KdIqMix,
    /// Cross-entropy on ground-truth labels.
    Ce,
}

impl Objective {
    pub const ABLATION: [Objective; 4] = [
        Objective::Kd,
        Objective::KdIq,
        Objective::KdMix,
        Objective::KdIqMix,
    ];

    pub fn uses_iq(self) -> bool {
        matches!(self, Objective::KdIq | Objective::KdIqMix)
    }

    pub fn uses_mix(self) -> bool {
        matches!(self, Objective::KdMix | Objective::KdIqMix)
    }

    pub fn label(self) -> &'static str {
        match self {
            Objective::Kd => "KD",
            Objective::KdIq => "KD+IQ",
            Objective::KdMix => "KD+Mix",
            Objective::KdIqMix => "KD+IQ+Mix",
            Objective::Ce => "CE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub objective: Objective,
    /// Weight of the logit distillation loss.
    pub alpha: f64,
    /// Weight of the intermediate feature loss.
    pub beta: f64,
    /// Upper bound of the mixup coefficient.
    pub mix_rate: f64,
    /// Feature taps for the IQ loss; `None` uses the student's tap set.
    pub taps: Option<Vec<String>>,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Keep the student's running BN statistics fixed (batch statistics
    /// are still used for normalization).
    pub freeze_bn: bool,
    pub augment: bool,
    /// Evaluations over the run (the last one is at the final step).
    pub evals: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            objective: Objective::KdIqMix,
            alpha: 1.0,
            beta: 0.01,
            mix_rate: 0.5,
            taps: None,
            lr: 0.1,
            momentum: 0.9,
            warmup_steps: 100,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 64,
            freeze_bn: false,
            augment: true,
            evals: 20,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_rate) {
            return Err(Error::config(format!(
                "mix_rate must lie in [0, 1], got {}",
                self.mix_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("learning rate must be >= 0"));
        }
        Ok(())
    }

    fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::warmup_cosine(self.lr, self.warmup_steps.min(self.steps), self.steps)
    }

    fn is_eval_step(&self, step: usize) -> bool {
        let every = (self.steps / self.evals.max(1)).max(1);
        step == self.steps || step % every == 0
    }
}

/// `(1 − λ)·x_i + λ·x_{B−1−i}` with λ drawn uniformly from `[0, mix_rate]`.
/// A single-sample batch is returned unchanged.
pub fn input_mix<E: Element, R: Rng + ?Sized>(
    x: &Tensor<E>,
    mix_rate: f64,
    rng: &mut R,
) -> Result<(Tensor<E>, f64)> {
    if !(0.0..=1.0).contains(&mix_rate) {
        return Err(Error::config(format!(
            "mix_rate must lie in [0, 1], got {mix_rate}"
        )));
    }
    let lambda = rng.random_range(0.0..=mix_rate);
    Ok((mix_with(x, lambda), lambda))
}

/// Mixes each sample with its partner in the reversed batch.
pub fn mix_with<E: Element>(x: &Tensor<E>, lambda: f64) -> Tensor<E> {
    let n = x.batch_size();
    if n < 2 {
        return x.clone();
    }
    let (keep, take) = (E::from_f64(1.0 - lambda), E::from_f64(lambda));
    let mut out = x.clone();
    for i in 0..n {
        let partner = x.row(n - 1 - i);
        for (o, (&a, &b)) in out.row_mut(i).iter_mut().zip(x.row(i).iter().zip(partner)) {
            *o = keep * a + take * b;
        }
    }
    out
}

/// Mean over taps of the smooth-L1 distance; only the student side carries
/// a gradient.
pub fn iq_loss<'g, E: Element>(
    teacher: &[Var<'g, E>],
    student: &[Var<'g, E>],
) -> Result<Var<'g, E>> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::config(format!(
            "IQ loss needs matching non-empty tap lists, got {} teacher and {} student",
            teacher.len(),
            student.len()
        )));
    }
    let w = 1.0 / teacher.len() as f64;
    let terms = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| Ok((w, s.smooth_l1(t.detach())?)))
        .collect::<Result<Vec<_>>>()?;
    Var::weighted_sum(&terms)
}

/// Per-step loss values of a fine-tuning run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub lr: f64,
    pub loss_kd: f64,
    pub loss_iq: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub losses: Vec<StepLoss>,
    /// Final evaluation (when a validation set was given).
    pub report: Option<EvalReport>,
    /// `(step, top1)` at every evaluation point.
    pub evals: Vec<(usize, f64)>,
}

fn check_student<E: Element>(student: &Model<E>) -> Result<()> {
    if let Some(q) = student.quant() {
        if !q.is_frozen() {
            return Err(Error::usage(
                "student activation ranges must be calibrated and frozen before fine-tuning",
            ));
        }
    }
    Ok(())
}

fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Fine-tunes `student` toward `teacher` on `data` (labels ignored). The
/// teacher runs in eval mode and is never modified.
pub fn distill<E: Element>(
    teacher: &Model<E>,
    student: &mut Model<E>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &DistillConfig,
    metrics: &mut Metrics,
) -> Result<DistillOutcome> {
    if cfg.objective == Objective::Ce {
        return finetune_ce(student, data, val, cfg, metrics);
    }
    cfg.validate()?;
    check_student(student)?;
    if data.is_empty() {
        return Err(Error::Data("distillation data is empty".into()));
    }
    if data.chw() != student.arch().input_chw || teacher.arch() != student.arch() {
        return Err(Error::config("teacher, student and data shapes disagree"));
    }
    let use_iq = cfg.objective.uses_iq() && cfg.beta > 0.0;
    let use_mix = cfg.objective.uses_mix();
    let mut teacher_view = teacher.clone();
    if let Some(t) = &cfg.taps {
        student.set_taps(t)?;
    }
    teacher_view.set_taps(student.taps().names())?;
    run(
        student,
        data,
        val,
        cfg,
        metrics,
        |g, student, params, x, rngs| {
            let x = if use_mix {
                input_mix(&x, cfg.mix_rate, &mut rngs.mix)?.0
            } else {
                x
            };
            let t_params = teacher_view.bind(g, false);
            let mut t_opts = ForwardOptions::eval();
            let mut s_opts = ForwardOptions::train();
            if use_iq {
                t_opts = t_opts.with_taps();
                s_opts = s_opts.with_taps();
            }
            let t_out = teacher_view.forward(&t_params, g.constant(x.clone()), t_opts)?;
            let s_out = student.forward(params, g.constant(x), s_opts)?;
            let kd = s_out.logits.kd_kl(t_out.logits)?;
            let mut terms = vec![(cfg.alpha, kd)];
            let mut iq_value = 0.0;
            if use_iq {
                let iq = iq_loss(&t_out.taps, &s_out.taps)?;
                iq_value = iq.item().as_f64();
                terms.push((cfg.beta, iq));
            }
            Ok((
                Var::weighted_sum(&terms)?,
                kd.item().as_f64(),
                iq_value,
                s_out,
            ))
        },
    )
}

/// Cross-entropy fine-tuning on ground-truth labels with the same loop.
pub fn finetune_ce<E: Element>(
    student: &mut Model<E>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &DistillConfig,
    metrics: &mut Metrics,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    check_student(student)?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::Data("cross-entropy fine-tuning needs ground-truth labels".into()))?
        .to_vec();
    if data.is_empty() {
        return Err(Error::Data("fine-tuning data is empty".into()));
    }
    run(
        student,
        data,
        val,
        cfg,
        metrics,
        |g, student, params, x, rngs| {
            let y: Vec<usize> = rngs.batch.iter().map(|&i| labels[i]).collect();
            let out = student.forward(params, g.constant(x), ForwardOptions::train())?;
            let ce = out.logits.cross_entropy(&y)?;
            let v = ce.item().as_f64();
            Ok((ce, v, 0.0, out))
        },
    )
}

struct StepRngs {
    mix: ChaCha8Rng,
    batch: Vec<usize>,
}

type StepResult<'g, E> = (Var<'g, E>, f64, f64, crate::model::ForwardOutput<'g, E>);

fn run<E: Element, F>(
    student: &mut Model<E>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &DistillConfig,
    metrics: &mut Metrics,
    mut step_fn: F,
) -> Result<DistillOutcome>
where
    F: for<'g> FnMut(
        &'g Graph<E>,
        &Model<E>,
        &[Var<'g, E>],
        Tensor<E>,
        &mut StepRngs,
    ) -> Result<StepResult<'g, E>>,
{
    let schedule = cfg.schedule()?;
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum));
    let mut rng = derive_rng(cfg.seed, 0);
    let mut rngs = StepRngs {
        mix: derive_rng(cfg.seed, 1),
        batch: Vec::new(),
    };
    let was_frozen = student.is_bn_frozen();
    if cfg.freeze_bn {
        student.freeze_bn();
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0usize);
    let result = (|| -> Result<()> {
        for step in 0..cfg.steps {
            let idx = data.sample_indices(cfg.batch_size, &mut rng);
            let pad = if cfg.augment { AUGMENT_PAD } else { 0 };
            let x = standard_augment(&data.images::<E>(&idx), pad, cfg.augment, &mut rng)?;
            rngs.batch = idx;
            let g = Graph::new();
            let params = student.bind(&g, true);
            let (loss, kd, iq, out) = step_fn(&g, student, &params, x, &mut rngs)?;
            let total = loss.item().as_f64();
            check_finite(step, "loss_kd", kd)?;
            check_finite(step, "loss_iq", iq)?;
            check_finite(step, "loss_total", total)?;
            g.backward(loss)?;
            let mut grads: Vec<Tensor<E>> = params.iter().map(|&p| g.grad_or_zero(p)).collect();
            student.update_state(&out)?;
            drop(out);
            drop(g);
            apply_weight_decay(student, &mut grads, cfg.weight_decay);
            let lr = schedule.lr_at(step)?;
            opt.step(&mut student.params_mut(), &grads, lr)?;
            losses.push(StepLoss {
                step: step + 1,
                lr,
                loss_kd: kd,
                loss_iq: iq,
                loss_total: total,
            });
            window = (window.0 + kd, window.1 + iq, window.2 + total, window.3 + 1);
            if cfg.is_eval_step(step + 1) {
                let n = window.3 as f64;
                let mut rec = json!({
                    "step": step + 1,
                    "lr": lr,
                    "loss_kd": window.0 / n,
                    "loss_iq": window.1 / n,
                    "loss_total": window.2 / n,
                });
                if let Some(v) = val {
                    let top1 = evaluate(student, v)?.top1;
                    rec["eval_top1"] = json!(top1);
                    evals.push((step + 1, top1));
                }
                metrics.log(rec)?;
                window = (0.0, 0.0, 0.0, 0);
            }
        }
        Ok(())
    })();
    if cfg.freeze_bn && !was_frozen {
        student.unfreeze_bn();
    }
    result?;
    let report = match val {
        Some(v) => Some(evaluate(student, v)?),
        None => None,
    };
    if let Some(r) = &report {
        if cfg.steps == 0 {
            metrics.log(json!({"step": 0, "eval_top1": r.top1}))?;
        }
    }
    Ok(DistillOutcome {
        losses,
        report,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_procedural, Split};
    use crate::model::ArchSpec;
    use crate::quant::{freeze_activation_ranges, quantize_model, QuantSpec};

    #[test]
    fn mix_examples() {
        let x = Tensor::<f64>::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mix_with(&x, 0.0), x);
        let m = mix_with(&x, 0.3);
        assert!((m.data()[0] - 0.7).abs() < 1e-15 && (m.data()[1] - 0.3).abs() < 1e-15);
        let one = Tensor::<f64>::new([1, 2], vec![0.2, 0.4]).unwrap();
        assert_eq!(mix_with(&one, 0.5), one);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (y, l) = input_mix(&x, 0.5, &mut rng).unwrap();
            assert!((0.0..=0.5).contains(&l));
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(input_mix(&x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn iq_mean_over_taps() {
        let g = Graph::<f64>::new();
        let t = [
            g.constant(Tensor::zeros([2])),
            g.constant(Tensor::zeros([1])),
        ];
        let s = [
            g.leaf(
                Tensor::new([2], vec![0.4f64.sqrt(), 0.4f64.sqrt()]).unwrap(),
                true,
            ),
            g.leaf(Tensor::new([1], vec![0.9]).unwrap(), true),
        ];
        let v = iq_loss(&t, &s).unwrap().item();
        assert!((v - 0.5 * (0.2 + 0.405)).abs() < 1e-12);
        assert_eq!(iq_loss(&t, &t).unwrap().item(), 0.0);
        assert!(iq_loss(&t, &s[..1]).is_err());
    }

    fn tiny() -> (Model<f32>, Dataset) {
        let arch = ArchSpec {
            stages: vec![(1, 4), (1, 8)],
            num_classes: 3,
            input_chw: [3, 8, 8],
        };
        let data = make_procedural(3, 8, 1, Split::Train)
            .unwrap()
            .adapt_to([3, 8, 8])
            .unwrap();
        (Model::build(&arch, 3).unwrap(), data)
    }

    fn small_cfg() -> DistillConfig {
        DistillConfig {
            steps: 6,
            batch_size: 8,
            warmup_steps: 2,
            evals: 3,
            ..Default::default()
        }
    }

    #[test]
    fn unfrozen_ranges_are_rejected() {
        let (teacher, data) = tiny();
        let spec = QuantSpec {
            calib_steps: 2,
            calib_batch: 8,
            ..QuantSpec::parse_wa("4w8a").unwrap()
        };
        let mut student = quantize_model(&teacher, &spec, &data, 0).unwrap();
        let err = distill(
            &teacher,
            &mut student,
            &data,
            None,
            &small_cfg(),
            &mut Metrics::new(),
        );
        assert!(matches!(err, Err(Error::Usage(_))));
        freeze_activation_ranges(&mut student).unwrap();
        let before = student.quant().unwrap().act_params();
        let t_before = teacher.clone();
        let out = distill(
            &teacher,
            &mut student,
            &data,
            Some(&data),
            &small_cfg(),
            &mut Metrics::new(),
        )
        .unwrap();
        assert_eq!(out.losses.len(), 6);
        assert_eq!(out.evals.len(), 3);
        assert_eq!(student.quant().unwrap().act_params(), before);
        assert!(teacher.same_state(&t_before));
    }

    #[test]
    fn zeroed_extras_reproduce_plain_kd() {
        let (teacher, data) = tiny();
        let plain = DistillConfig {
            objective: Objective::Kd,
            ..small_cfg()
        };
        let full = DistillConfig {
            objective: Objective::KdIqMix,
            beta: 0.0,
            mix_rate: 0.0,
            ..small_cfg()
        };
        let mut a = teacher.clone();
        let mut b = teacher.clone();
        let la = distill(&teacher, &mut a, &data, None, &plain, &mut Metrics::new()).unwrap();
        let lb = distill(&teacher, &mut b, &data, None, &full, &mut Metrics::new()).unwrap();
        assert_eq!(la.losses, lb.losses);
        assert!(a.same_state(&b));
    }

    #[test]
    fn frozen_bn_keeps_running_stats() {
        let (teacher, data) = tiny();
        let mut s = teacher.clone();
        let cfg = DistillConfig {
            freeze_bn: true,
            ..small_cfg()
        };
        distill(&teacher, &mut s, &data, None, &cfg, &mut Metrics::new()).unwrap();
        for (x, y) in s.bn_layers().iter().zip(teacher.bn_layers()) {
            assert_eq!(x.running_mean, y.running_mean);
            assert_eq!(x.running_var, y.running_var);
        }
        assert!(!s.is_bn_frozen());
    }

    #[test]
    fn ce_needs_labels_and_zero_steps_is_identity() {
        let (teacher, data) = tiny();
        let unlabeled = Dataset::from_levels(data.levels().to_vec(), data.chw(), None, 3).unwrap();
        let mut s = teacher.clone();
        let cfg = DistillConfig {
            objective: Objective::Ce,
            ..small_cfg()
        };
        assert!(matches!(
            finetune_ce(&mut s, &unlabeled, None, &cfg, &mut Metrics::new()),
            Err(Error::Data(_))
        ));
        let zero = DistillConfig { steps: 0, ..cfg };
        finetune_ce(&mut s, &data, None, &zero, &mut Metrics::new()).unwrap();
        assert!(s.same_state(&teacher));
    }
}

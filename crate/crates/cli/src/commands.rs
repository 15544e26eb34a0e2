//! One driver per pipeline stage. Each writes the resolved config,
//! `metrics.jsonl` and `report.json` into the output directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dfkd::analysis::{bias_report, fgsm_perturb, similarity_table, tail_degradation, Probe, TRAIN_NAME};
use dfkd::datagen::{dump_ppm, generate_dataset, generate_gaussian};
use dfkd::datasets::{load_dataset, make_procedural, save_dataset, subsample_balanced, uniform_noise, Dataset, Split};
use dfkd::distill::{distill, evaluate, mean_std, DistillConfig};
use dfkd::metrics::Metrics;
use dfkd::model::{load_weights, save_weights, Model};
use dfkd::quant::{freeze_activation_ranges, quantize_model, QuantState};
use dfkd::train::train_classifier;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CalibSource, GenScheme, RunConfig};

pub struct Ctx {
    pub cfg: RunConfig,
    pub seeds: usize,
    pub dump_images: bool,
    pub data: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

fn quant_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".quant.json");
    PathBuf::from(s)
}

/// Weights plus, for quantized models, the quantizer state as a JSON sidecar.
pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    save_weights(model, path)?;
    if let Some(q) = model.quant() {
        std::fs::write(quant_sidecar(path), serde_json::to_string_pretty(q)?)?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let mut model = load_weights::<f32>(path).with_context(|| format!("loading weights {}", path.display()))?;
    let side = quant_sidecar(path);
    if side.exists() {
        let text = std::fs::read_to_string(&side)?;
        let q: QuantState = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
        model.set_quant(Some(q));
    }
    Ok(model)
}

/// Worker cap from `DFKD_THREADS` (default 1).
fn threads() -> usize {
    std::env::var("DFKD_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

impl Ctx {
    fn out(&self) -> &Path {
        &self.cfg.out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn splits(&self) -> Result<(Dataset, Dataset)> {
        let m = &self.cfg.model;
        let k = m.arch.num_classes;
        Ok((
            make_procedural(k, m.train_per_class, m.data_seed, Split::Train)?,
            make_procedural(k, m.val_per_class, m.data_seed, Split::Val)?,
        ))
    }

    fn teacher(&self) -> Result<Model<f32>> {
        let path = self
            .cfg
            .model
            .weights
            .as_ref()
            .ok_or_else(|| anyhow!("missing weights: set model.weights or pass --weights"))?;
        load_model(path)
    }

    fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds.max(1) as u64).map(|i| self.cfg.seed + i).collect()
    }

    /// Runs `f` once per seed, at most `DFKD_THREADS` at a time, and returns
    /// results in seed order. Each seed's metric records are tagged and
    /// appended to `metrics` in that order.
    fn per_seed<T: Send>(&self, metrics: &mut Metrics, f: impl Fn(u64, &mut Metrics) -> Result<T> + Sync) -> Result<Vec<T>> {
        let seeds = self.seed_list();
        let mut results = Vec::with_capacity(seeds.len());
        for chunk in seeds.chunks(threads()) {
            let done: Vec<Result<(T, Metrics)>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&seed| {
                        let f = &f;
                        s.spawn(move || {
                            let mut m = Metrics::new();
                            f(seed, &mut m).map(|r| (r, m))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
            });
            for (seed, r) in chunk.iter().zip(done) {
                let (value, m) = r.with_context(|| format!("seed {seed}"))?;
                for rec in m.records() {
                    let mut rec = rec.clone();
                    if let Value::Object(map) = &mut rec {
                        map.insert("seed".into(), json!(seed));
                    }
                    metrics.log(rec)?;
                }
                results.push(value);
            }
        }
        Ok(results)
    }

    fn calib_data(&self, teacher: &Model<f32>, train: &Dataset, seed: u64) -> Result<Dataset> {
        let q = &self.cfg.quant;
        let k = teacher.arch().num_classes;
        Ok(match q.source {
            CalibSource::Real => subsample_balanced(train, q.per_class, seed)?,
            CalibSource::Gaussian => {
                let norm = train.normalization()?;
                generate_gaussian(teacher, q.per_class * k, &norm.mean, &norm.std, seed)?.to_dataset(k)?
            }
            CalibSource::File => {
                let path = q.data.as_ref().ok_or_else(|| anyhow!("quant.source = \"file\" needs quant.data"))?;
                load_dataset(path)?
            }
        })
    }
}

#[derive(Serialize)]
struct SeedSummary {
    seeds: Vec<u64>,
    top1: Vec<f64>,
    mean: f64,
    std: f64,
}

impl SeedSummary {
    fn new(seeds: Vec<u64>, top1: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&top1);
        Self { seeds, top1, mean, std }
    }
}

pub enum Command {
    Train,
    Generate,
    Calibrate,
    Distill,
    Eval,
    Measure,
    AnalyzeBias,
    AnalyzeTail,
}

pub fn run(cmd: Command, ctx: Ctx) -> Result<Value> {
    std::fs::create_dir_all(ctx.out()).with_context(|| format!("creating {}", ctx.out().display()))?;
    std::fs::write(ctx.path("config.toml"), ctx.cfg.to_toml()?)?;
    let mut metrics = Metrics::to_file(ctx.path("metrics.jsonl"))?;
    let report = match cmd {
        Command::Train => train(&ctx, &mut metrics),
        Command::Generate => generate(&ctx, &mut metrics),
        Command::Calibrate => calibrate(&ctx, &mut metrics),
        Command::Distill => distill_cmd(&ctx, &mut metrics),
        Command::Eval => eval(&ctx),
        Command::Measure => measure(&ctx),
        Command::AnalyzeBias => analyze_bias(&ctx),
        Command::AnalyzeTail => analyze_tail(&ctx),
    }?;
    std::fs::write(ctx.path("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn train(ctx: &Ctx, metrics: &mut Metrics) -> Result<Value> {
    let (train, val) = ctx.splits()?;
    let norm = train.normalization()?;
    let multi = ctx.seeds > 1;
    let runs = ctx.per_seed(metrics, |seed, m| {
        let mut model = Model::<f32>::build(&ctx.cfg.model.arch, seed)?;
        model.set_input_norm(Some(norm.clone()))?;
        let report = train_classifier(&mut model, &train, &val, &ctx.cfg.model.train, seed, m)?;
        let name = if multi { format!("teacher_s{seed}.dfkd") } else { "teacher.dfkd".into() };
        save_model(&model, &ctx.path(&name))?;
        Ok((name, report))
    })?;
    let summary = SeedSummary::new(ctx.seed_list(), runs.iter().map(|(_, r)| r.top1).collect());
    let (weights, reports): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok(json!({"command": "train", "weights": weights, "eval": reports, "summary": summary}))
}

fn generate(ctx: &Ctx, metrics: &mut Metrics) -> Result<Value> {
    let teacher = ctx.teacher()?;
    let k = teacher.arch().num_classes;
    let n = ctx.cfg.generate.samples;
    let (data, scores) = if ctx.cfg.generate.scheme == Some(GenScheme::Gaussian) {
        let norm = match teacher.input_norm() {
            Some(norm) => norm.clone(),
            None => ctx.splits()?.0.normalization()?,
        };
        let batch = generate_gaussian(&teacher, n, &norm.mean, &norm.std, ctx.cfg.seed)?;
        (batch.to_dataset(k)?, Vec::new())
    } else {
        let reference = teacher.extract_bn_reference(teacher.input_norm())?;
        let cfg = dfkd::datagen::GenConfig {
            seed: ctx.cfg.seed,
            ..ctx.cfg.gen_config()
        };
        generate_dataset(&teacher, &reference, &cfg, n, Some(metrics))?
    };
    let path = ctx.path("synthetic.ds");
    save_dataset(&data, &path)?;
    let dumped = if ctx.dump_images {
        dump_ppm(&data, &ctx.path("images"), data.len())?
    } else {
        0
    };
    let (mean, _) = mean_std(&scores);
    Ok(json!({
        "command": "generate",
        "dataset": path,
        "samples": data.len(),
        "batch_j_kl": scores,
        "mean_j_kl": if scores.is_empty() { Value::Null } else { json!(mean) },
        "images_written": dumped,
    }))
}

fn calibrate(ctx: &Ctx, metrics: &mut Metrics) -> Result<Value> {
    let teacher = ctx.teacher()?;
    let (train, val) = ctx.splits()?;
    let fp32 = evaluate(&teacher, &val)?;
    let multi = ctx.seeds > 1;
    let runs = ctx.per_seed(metrics, |seed, m| {
        let calib = ctx.calib_data(&teacher, &train, seed)?;
        let student = quantize_model(&teacher, &ctx.cfg.quant.spec, &calib, seed)?;
        let report = evaluate(&student, &val)?;
        m.log(json!({"calib_samples": calib.len(), "top1": report.top1}))?;
        let name = if multi { format!("student_s{seed}.dfkd") } else { "student.dfkd".into() };
        save_model(&student, &ctx.path(&name))?;
        Ok((name, report))
    })?;
    let summary = SeedSummary::new(ctx.seed_list(), runs.iter().map(|(_, r)| r.top1).collect());
    let (students, reports): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok(json!({
        "command": "calibrate",
        "quant": ctx.cfg.quant.spec.label(),
        "fp32": fp32,
        "students": students,
        "eval": reports,
        "summary": summary,
    }))
}

fn distill_cmd(ctx: &Ctx, metrics: &mut Metrics) -> Result<Value> {
    let teacher = ctx.teacher()?;
    let (train, val) = ctx.splits()?;
    let file_data = ctx.cfg.distill.data.as_ref().map(load_dataset).transpose()?;
    let fixed_student = ctx.cfg.distill.student.as_deref().map(load_model).transpose()?;
    let multi = ctx.seeds > 1;
    let runs = ctx.per_seed(metrics, |seed, m| {
        let mut student = match &fixed_student {
            Some(s) => s.clone(),
            None => quantize_model(&teacher, &ctx.cfg.quant.spec, &ctx.calib_data(&teacher, &train, seed)?, seed)?,
        };
        if !student.quant().is_some_and(|q| q.is_frozen()) {
            freeze_activation_ranges(&mut student)?;
        }
        let before = evaluate(&student, &val)?.top1;
        let data = match &file_data {
            Some(d) => d.clone(),
            None => subsample_balanced(&train, ctx.cfg.distill.per_class, seed)?,
        };
        let cfg = DistillConfig {
            seed,
            ..ctx.cfg.distill.config.clone()
        };
        let outcome = distill(&teacher, &mut student, &data, Some(&val), &cfg, m)?;
        let report = outcome.report.ok_or_else(|| anyhow!("distillation produced no evaluation"))?;
        let name = if multi { format!("student_s{seed}.dfkd") } else { "student.dfkd".into() };
        save_model(&student, &ctx.path(&name))?;
        Ok((name, before, report))
    })?;
    let summary = SeedSummary::new(ctx.seed_list(), runs.iter().map(|r| r.2.top1).collect());
    let students: Vec<_> = runs.iter().map(|r| r.0.clone()).collect();
    let before: Vec<_> = runs.iter().map(|r| r.1).collect();
    let reports: Vec<_> = runs.into_iter().map(|r| r.2).collect();
    Ok(json!({
        "command": "distill",
        "objective": ctx.cfg.distill.config.objective.label(),
        "students": students,
        "top1_before": before,
        "eval": reports,
        "summary": summary,
    }))
}

fn eval(ctx: &Ctx) -> Result<Value> {
    let model = ctx.teacher()?;
    let data = match &ctx.data {
        Some(p) => load_dataset(p)?,
        None => ctx.splits()?.1,
    };
    let report = evaluate(&model, &data.adapt_to(model.arch().input_chw)?)?;
    println!("top1 {:.4} on {} samples", report.top1, report.samples);
    Ok(json!({"command": "eval", "eval": report}))
}

fn measure(ctx: &Ctx) -> Result<Value> {
    let teacher = ctx.teacher()?;
    let (train, val) = ctx.splits()?;
    let reference = teacher.extract_bn_reference(teacher.input_norm())?;
    let ms = &ctx.cfg.measure;
    let mut probes = vec![Probe::new(TRAIN_NAME, train), Probe::new("heldout", val.clone())];
    for &eps in &ms.fgsm_eps {
        probes.push(Probe::new(format!("fgsm_{eps}"), fgsm_perturb(&teacher, &val, eps)?));
    }
    if ms.noise_samples > 0 {
        probes.push(Probe::new("noise", uniform_noise(ms.noise_samples, teacher.arch().input_chw, ctx.cfg.seed)));
    }
    for p in &ms.probes {
        let data = load_dataset(&p.path).with_context(|| format!("probe {}", p.name))?;
        probes.push(if p.foreign {
            Probe::foreign(&p.name, data)
        } else {
            Probe::new(&p.name, data)
        });
    }
    let id = ctx.cfg.model.weights.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let table = similarity_table(&teacher, &id, &reference, &probes)?;
    let text = table.to_table();
    std::fs::write(ctx.path("similarity.txt"), &text)?;
    print!("{text}");
    Ok(json!({"command": "measure", "similarity": table}))
}

fn bias_data(ctx: &Ctx) -> Result<Dataset> {
    match ctx.data.as_ref().or(ctx.cfg.measure.bias_data.as_ref()) {
        Some(p) => Ok(load_dataset(p)?),
        None => Ok(ctx.splits()?.1),
    }
}

fn analyze_bias(ctx: &Ctx) -> Result<Value> {
    let teacher = ctx.teacher()?;
    let report = bias_report(&teacher, &bias_data(ctx)?)?;
    println!("max hard mean {:.4}, max soft mean {:.4}", report.max_hard(), report.max_soft());
    Ok(json!({"command": "analyze-bias", "bias": report}))
}

fn analyze_tail(ctx: &Ctx) -> Result<Value> {
    let teacher = ctx.teacher()?;
    let path = ctx
        .student
        .as_ref()
        .or(ctx.cfg.measure.finetuned.as_ref())
        .ok_or_else(|| anyhow!("missing fine-tuned student: set measure.finetuned or pass --student"))?;
    let student = load_model(path)?;
    let val = ctx.splits()?.1;
    let bias = bias_report(&teacher, &bias_data(ctx)?)?;
    let fp32 = evaluate(&teacher, &val)?;
    let ft = evaluate(&student, &val)?;
    if fp32.per_class.len() != ft.per_class.len() {
        bail!("teacher and student disagree on the class count");
    }
    let tail = tail_degradation(&fp32, &ft, &bias.ascending_hard())?;
    Ok(json!({"command": "analyze-tail", "bias": bias, "fp32": fp32, "finetuned": ft, "tail": tail}))
}

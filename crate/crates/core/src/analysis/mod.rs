//! Dataset correspondence scoring through BN statistics, FGSM probing,
//! prediction-bias summaries and per-class tail degradation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{BnSnapshot, StatMetric, STAT_EPS};
use crate::datasets::Dataset;
use crate::distill::EvalReport;
use crate::error::{Error, Result};
use crate::model::{BnReference, ForwardOptions, Model};
use crate::tensor::ops::softmax_rows;
use crate::tensor::{Element, Graph, Tensor};

/// Images per forward pass when streaming a dataset.
pub const MEASURE_BATCH: usize = 256;

/// Name the training set must carry in a similarity table.
pub const TRAIN_NAME: &str = "train";

/// Per-sample channel sums, reduced in sorted order so the result does not
/// depend on dataset order.
struct Moments {
    sums: Vec<Vec<Vec<f64>>>,
    sqs: Vec<Vec<Vec<f64>>>,
    counts: Vec<usize>,
}

impl Moments {
    fn new(layers: usize) -> Self {
        Self {
            sums: vec![Vec::new(); layers],
            sqs: vec![Vec::new(); layers],
            counts: vec![0; layers],
        }
    }

    fn add(&mut self, layer: usize, t: &Tensor<impl Element>) -> Result<()> {
        let (b, c, h, w) = t.dims4()?;
        let sp = h * w;
        if self.sums[layer].is_empty() {
            self.sums[layer] = vec![Vec::new(); c];
            self.sqs[layer] = vec![Vec::new(); c];
        }
        let data = t.data();
        for s in 0..b {
            for ch in 0..c {
                let plane = &data[(s * c + ch) * sp..(s * c + ch + 1) * sp];
                let (mut a, mut q) = (0.0, 0.0);
                for v in plane {
                    let v = v.as_f64();
                    a += v;
                    q += v * v;
                }
                self.sums[layer][ch].push(a);
                self.sqs[layer][ch].push(q);
            }
        }
        self.counts[layer] += b * sp;
        Ok(())
    }

    fn sorted_sum(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        v.iter().sum()
    }

    fn finish(mut self, names: Vec<String>) -> BnSnapshot {
        let mut means = Vec::with_capacity(names.len());
        let mut stds = Vec::with_capacity(names.len());
        for l in 0..names.len() {
            let n = self.counts[l] as f64;
            let (mut m, mut s) = (Vec::new(), Vec::new());
            for ch in 0..self.sums[l].len() {
                let mean = Self::sorted_sum(&mut self.sums[l][ch]) / n;
                let var = (Self::sorted_sum(&mut self.sqs[l][ch]) / n - mean * mean).max(0.0);
                m.push(mean);
                s.push((var + STAT_EPS).sqrt());
            }
            means.push(m);
            stds.push(s);
        }
        BnSnapshot { names, means, stds }
    }
}

/// Dataset-global moments at the input (when the reference has an input
/// layer) and at every BN input, streamed in batches of `batch`.
pub fn measure_moments<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    dataset: &Dataset,
    batch: usize,
) -> Result<BnSnapshot> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot measure an empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::config("measurement batch size must be positive"));
    }
    let data = dataset.adapt_to(model.arch().input_chw)?;
    let expected = model.num_bn() + usize::from(reference.input_layer);
    if reference.len() != expected {
        return Err(Error::ShapeMismatch {
            name: "bn reference layers".into(),
            expected: vec![reference.len()],
            found: vec![expected],
        });
    }
    let mut acc = Moments::new(expected);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch) {
        let images = data.images::<E>(chunk);
        let g = Graph::new();
        let params = model.bind(&g, false);
        let out = model.forward(
            &params,
            g.constant(images.clone()),
            ForwardOptions::eval().with_bn_inputs(),
        )?;
        let mut layer = 0;
        if reference.input_layer {
            acc.add(0, &images)?;
            layer = 1;
        }
        for a in &out.bn_inputs {
            acc.add(layer, &a.value())?;
            layer += 1;
        }
    }
    Ok(acc.finish(reference.layers.iter().map(|t| t.name.clone()).collect()))
}

/// 𝒥_KL of a whole dataset against the reference statistics.
pub fn measure_dataset<E: Element>(
    model: &Model<E>,
    reference: &BnReference,
    dataset: &Dataset,
) -> Result<f64> {
    measure_moments(model, reference, dataset, MEASURE_BATCH)?.j_kl(reference, StatMetric::Kl)
}

/// One probed dataset. With `own_normalization` the model's input
/// normalization is replaced by the probe's own statistics, which is how
/// foreign datasets are fed to a model.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub data: Dataset,
    pub own_normalization: bool,
}

impl Probe {
    pub fn new(name: impl Into<String>, data: Dataset) -> Self {
        Self {
            name: name.into(),
            data,
            own_normalization: false,
        }
    }

    pub fn foreign(name: impl Into<String>, data: Dataset) -> Self {
        Self {
            own_normalization: true,
            ..Self::new(name, data)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub dataset: String,
    pub raw: f64,
    pub ratio: f64,
}

/// Raw 𝒥_KL per probed dataset and its ratio to the training set value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub model: String,
    pub rows: Vec<SimilarityRow>,
}

impl SimilarityReport {
    pub fn row(&self, dataset: &str) -> Option<&SimilarityRow> {
        self.rows.iter().find(|r| r.dataset == dataset)
    }

    /// Aligned text table: one row for the model, one column per dataset.
    pub fn to_table(&self) -> String {
        let width = |s: &str| s.chars().count().max(10);
        let mut head = format!("{:<12}", "model");
        let mut ratio = format!("{:<12}", self.model);
        let mut raw = format!("{:<12}", "(raw)");
        for r in &self.rows {
            let w = width(&r.dataset);
            let _ = write!(head, " {:>w$}", r.dataset);
            let _ = write!(ratio, " {:>w$.3}", r.ratio);
            let _ = write!(raw, " {:>w$.4e}", r.raw);
        }
        format!("{head}\n{ratio}\n{raw}\n")
    }
}

/// Measures every probe and normalizes by the probe named [`TRAIN_NAME`].
pub fn similarity_table<E: Element>(
    model: &Model<E>,
    model_id: &str,
    reference: &BnReference,
    probes: &[Probe],
) -> Result<SimilarityReport> {
    if !probes.iter().any(|p| p.name == TRAIN_NAME) {
        return Err(Error::Data(format!(
            "similarity table needs a dataset named {TRAIN_NAME:?}"
        )));
    }
    let mut raws = Vec::with_capacity(probes.len());
    for p in probes {
        let raw = if p.own_normalization {
            let data = p.data.adapt_to(model.arch().input_chw)?;
            let mut m = model.clone();
            m.set_input_norm(Some(data.normalization()?))?;
            measure_dataset(&m, reference, &data)?
        } else {
            measure_dataset(model, reference, &p.data)?
        };
        raws.push(raw);
    }
    let train = probes
        .iter()
        .position(|p| p.name == TRAIN_NAME)
        .map(|i| raws[i])
        .unwrap();
    Ok(SimilarityReport {
        model: model_id.to_string(),
        rows: probes
            .iter()
            .zip(&raws)
            .map(|(p, &raw)| SimilarityRow {
                dataset: p.name.clone(),
                raw,
                ratio: if p.name == TRAIN_NAME {
                    1.0
                } else {
                    raw / train
                },
            })
            .collect(),
    })
}

/// Sign of the cross-entropy input gradient for a batch (eval mode).
pub fn fgsm_sign<E: Element>(
    model: &Model<E>,
    images: &Tensor<E>,
    labels: &[usize],
) -> Result<Tensor<E>> {
    let g = Graph::new();
    let params = model.bind(&g, false);
    let x = g.leaf(images.clone(), true);
    let out = model.forward(&params, x, ForwardOptions::eval())?;
    g.backward(out.logits.cross_entropy(labels)?)?;
    Ok(g.grad_or_zero(x).map(|v| {
        if v > E::zero() {
            E::one()
        } else if v < E::zero() {
            -E::one()
        } else {
            E::zero()
        }
    }))
}

/// `clamp(x + ε·sign(∇ₓ CE), 0, 1)` on float images.
pub fn fgsm_images<E: Element>(
    model: &Model<E>,
    images: &Tensor<E>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor<E>> {
    check_epsilon(epsilon)?;
    let sign = fgsm_sign(model, images, labels)?;
    let eps = E::from_f64(epsilon);
    images.zip_map(&sign, |x, s| {
        let v = x + eps * s;
        if v < E::zero() {
            E::zero()
        } else if v > E::one() {
            E::one()
        } else {
            v
        }
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::config(format!(
            "FGSM epsilon must be a finite value >= 0, got {epsilon}"
        )));
    }
    Ok(())
}

/// FGSM over a labeled dataset. Pixels are stored in 1/255 steps, so the
/// step is rounded down to whole levels to keep `‖x' − x‖∞ ≤ ε`.
pub fn fgsm_perturb<E: Element>(
    model: &Model<E>,
    dataset: &Dataset,
    epsilon: f64,
) -> Result<Dataset> {
    check_epsilon(epsilon)?;
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Data("FGSM needs a labeled dataset".into()))?;
    let step = (epsilon * 255.0 + 1e-9).floor().min(255.0) as i32;
    let mut pixels = dataset.levels().to_vec();
    if step > 0 {
        let per = dataset.chw().iter().product::<usize>();
        let indices: Vec<usize> = (0..dataset.len()).collect();
        for chunk in indices.chunks(MEASURE_BATCH) {
            let sign = fgsm_sign(
                model,
                &dataset.images::<E>(chunk),
                &dataset.batch_labels(chunk)?,
            )?;
            for (k, &i) in chunk.iter().enumerate() {
                for (p, s) in pixels[i * per..(i + 1) * per].iter_mut().zip(sign.row(k)) {
                    let s = s.as_f64() as i32;
                    *p = (*p as i32 + s * step).clamp(0, 255) as u8;
                }
            }
        }
    }
    Dataset::from_levels(
        pixels,
        dataset.chw(),
        Some(labels.to_vec()),
        dataset.num_classes(),
    )
}

/// Mean soft and hard predictions over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub soft_mean: Vec<f64>,
    pub hard_mean: Vec<f64>,
    /// Classes by descending soft mean.
    pub order: Vec<usize>,
    pub samples: usize,
}

impl BiasReport {
    pub fn max_hard(&self) -> f64 {
        self.hard_mean.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_soft(&self) -> f64 {
        self.soft_mean.iter().copied().fold(0.0, f64::max)
    }

    /// Classes by ascending hard-prediction frequency, ties by index.
    pub fn ascending_hard(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.hard_mean.len()).collect();
        idx.sort_by(|&a, &b| {
            self.hard_mean[a]
                .total_cmp(&self.hard_mean[b])
                .then(a.cmp(&b))
        });
        idx
    }
}

pub fn bias_report<E: Element>(model: &Model<E>, dataset: &Dataset) -> Result<BiasReport> {
    if dataset.is_empty() {
        return Err(Error::Data("bias report of an empty dataset".into()));
    }
    let data = dataset.adapt_to(model.arch().input_chw)?;
    let k = model.arch().num_classes;
    let mut soft = vec![0.0; k];
    let mut hard = vec![0.0; k];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(MEASURE_BATCH) {
        let logits = model.predict(&data.images::<E>(chunk))?;
        let probs = softmax_rows(&logits);
        for r in 0..chunk.len() {
            for (s, p) in soft.iter_mut().zip(probs.row(r)) {
                *s += p.as_f64();
            }
        }
        for c in logits.argmax_rows() {
            hard[c] += 1.0;
        }
    }
    let n = data.len() as f64;
    soft.iter_mut().chain(hard.iter_mut()).for_each(|v| *v /= n);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| soft[b].total_cmp(&soft[a]).then(a.cmp(&b)));
    Ok(BiasReport {
        soft_mean: soft,
        hard_mean: hard,
        order,
        samples: data.len(),
    })
}

/// Mean relative accuracy degradation over the `n` least-favored classes,
/// for every `n`, counting only classes that degrade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub order: Vec<usize>,
    /// `(s_fp32 − s_ft)/s_fp32` per class in `order`; `None` when `s_fp32 = 0`.
    pub per_class: Vec<Option<f64>>,
    /// Entry `n − 1` covers the first `n` classes of `order`.
    pub tail_means: Vec<f64>,
    pub excluded: Vec<usize>,
}

pub fn tail_degradation(fp32: &EvalReport, ft: &EvalReport, order: &[usize]) -> Result<TailReport> {
    let k = fp32.per_class.len();
    let present = |r: &EvalReport| r.class_counts.iter().map(|&n| n > 0).collect::<Vec<_>>();
    if ft.per_class.len() != k || present(fp32) != present(ft) {
        return Err(Error::Data(
            "tail degradation needs reports over the same classes".into(),
        ));
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..k).collect::<Vec<_>>() {
        return Err(Error::Data(format!(
            "class ordering must be a permutation of 0..{k}"
        )));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    let mut tail_means = Vec::with_capacity(k);
    let (mut sum, mut count) = (0.0, 0usize);
    for &c in order {
        let (s0, s1) = (fp32.per_class[c], ft.per_class[c]);
        let d = if s0 > 0.0 {
            Some((s0 - s1) / s0)
        } else {
            log::warn!("class {c} has zero reference accuracy and is left out of the tail means");
            excluded.push(c);
            None
        };
        if let Some(d) = d.filter(|&d| d > 0.0) {
            sum += d;
            count += 1;
        }
        per_class.push(d);
        tail_means.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    Ok(TailReport {
        order: order.to_vec(),
        per_class,
        tail_means,
        excluded,
    })
}

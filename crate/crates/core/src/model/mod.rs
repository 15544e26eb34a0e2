//! Small residual classifiers with batch-norm statistics access, tap points
//! for intermediate features, optional fake quantization and weight files.

mod io;

pub use io::{load_weights, save_weights};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Normalization;
use crate::error::{Error, Result};
use crate::quant::{QuantParams, QuantState};
use crate::tensor::ops::BatchStats;
pub use crate::tensor::ops::NormMode as Mode;
use crate::tensor::{Element, Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Floor applied to running variances when extracting a reference.
pub const VAR_FLOOR: f64 = 1e-12;

/// Residual architecture: `(blocks, channels)` per stage, class count and
/// input `C×H×W`. Every stage after the first halves the resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub stages: Vec<(usize, usize)>,
    pub num_classes: usize,
    pub input_chw: [usize; 3],
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchSpec {
    /// Three single-block stages of 16, 32 and 64 channels on 3×32×32, 10 classes.
    pub fn desk() -> Self {
        Self {
            stages: vec![(1, 16), (1, 32), (1, 64)],
            num_classes: 10,
            input_chw: [3, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_chw;
        if self.stages.is_empty() || self.stages.iter().any(|&(b, ch)| b == 0 || ch == 0) {
            return Err(Error::config(format!("invalid stages {:?}", self.stages)));
        }
        if self.num_classes < 2 || c == 0 {
            return Err(Error::config(
                "need at least two classes and one input channel",
            ));
        }
        let div = 1usize << (self.stages.len() - 1);
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "input {h}×{w} not divisible by {div} for {} stages",
                self.stages.len()
            )));
        }
        Ok(())
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Arc<Tensor<E>>,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: usize,
    stride: usize,
    pad: usize,
    quant: usize,
}

/// Batch-norm layer with running estimates.
#[derive(Clone, Debug)]
pub struct BnLayer<E: Element> {
    pub name: String,
    gamma: usize,
    beta: usize,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    bn1: usize,
    conv2: Conv,
    bn2: usize,
    shortcut: Option<Conv>,
}

/// Ordered tap names resolved to forward positions (0 = stem output,
/// `i + 1` = output of block `i`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapSet {
    names: Vec<String>,
    points: Vec<usize>,
}

impl TapSet {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Target statistics of one reference layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnTarget {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub std: Vec<f64>,
}

/// Stored moments `(μ̂, σ̂)` of every BN layer in forward order, optionally
/// preceded by the dataset normalization as a synthetic input layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnReference {
    pub layers: Vec<BnTarget>,
    pub input_layer: bool,
}

impl BnReference {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// What a forward pass records besides the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub taps: bool,
    /// Keep the input of every BN layer (for statistics matching).
    pub bn_inputs: bool,
    /// Record per-sample input ranges of quantized layers instead of
    /// quantizing activations.
    pub calibrate: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            taps: false,
            bn_inputs: false,
            calibrate: false,
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            ..Self::eval()
        }
    }

    pub fn with_taps(mut self) -> Self {
        self.taps = true;
        self
    }

    pub fn with_bn_inputs(mut self) -> Self {
        self.bn_inputs = true;
        self
    }
}

pub struct ForwardOutput<'g, E: Element> {
    pub logits: Var<'g, E>,
    /// Tapped features in tap-set order.
    pub taps: Vec<Var<'g, E>>,
    pub bn_inputs: Vec<Var<'g, E>>,
    /// Train-mode batch statistics per BN layer.
    pub batch_stats: Vec<BatchStats<E>>,
    /// Per quantized layer, per-sample `(min, max)` of its input.
    pub act_ranges: Vec<Vec<(f64, f64)>>,
}

#[derive(Clone, Debug)]
pub struct Model<E: Element = f32> {
    arch: ArchSpec,
    params: Vec<Param<E>>,
    bns: Vec<BnLayer<E>>,
    stem: Conv,
    stem_bn: usize,
    blocks: Vec<Block>,
    block_names: Vec<String>,
    fc_weight: usize,
    fc_bias: usize,
    fc_quant: usize,
    quant_names: Vec<String>,
    taps: TapSet,
    input_norm: Option<Normalization>,
    frozen_bn: bool,
    quant: Option<QuantState>,
}

fn he_normal<E: Element>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<E> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    Tensor::randn(shape, 0.0, (2.0 / fan_in).sqrt(), rng)
}

struct Builder<E: Element> {
    params: Vec<Param<E>>,
    bns: Vec<BnLayer<E>>,
    quant_names: Vec<String>,
    rng: ChaCha8Rng,
}

impl<E: Element> Builder<E> {
    fn param(&mut self, name: String, value: Tensor<E>) -> usize {
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let w = he_normal([cout, cin, k, k], &mut self.rng);
        let weight = self.param(format!("{name}.weight"), w);
        self.quant_names.push(name.to_string());
        Conv {
            weight,
            stride,
            pad: k / 2,
            quant: self.quant_names.len() - 1,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> usize {
        let gamma = self.param(format!("{name}.gamma"), Tensor::ones([c]));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros([c]));
        self.bns.push(BnLayer {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: Tensor::zeros([c]),
            running_var: Tensor::ones([c]),
        });
        self.bns.len() - 1
    }
}

/// Per-sample `(min, max)` of a batch.
fn sample_ranges<E: Element>(t: &Tensor<E>) -> Vec<(f64, f64)> {
    (0..t.batch_size())
        .map(|i| {
            t.row(i)
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let v = v.as_f64();
                    (lo.min(v), hi.max(v))
                })
        })
        .collect()
}

impl<E: Element> Model<E> {
    /// Builds the residual network with seeded He-normal conv weights,
    /// `γ = 1`, `β = 0`, zero FC bias and unit running variances.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            bns: Vec::new(),
            quant_names: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c0 = arch.stages[0].1;
        let stem = b.conv("stem.conv", arch.input_chw[0], c0, 3, 1);
        let stem_bn = b.bn("stem.bn", c0);
        let mut blocks = Vec::new();
        let mut block_names = Vec::new();
        let mut cin = c0;
        for (s, &(n_blocks, cout)) in arch.stages.iter().enumerate() {
            for i in 0..n_blocks {
                let name = format!("stage{}.block{}", s + 1, i);
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, 3, stride);
                let bn1 = b.bn(&format!("{name}.bn1"), cout);
                let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1);
                let bn2 = b.bn(&format!("{name}.bn2"), cout);
                let shortcut = (stride != 1 || cin != cout)
                    .then(|| b.conv(&format!("{name}.shortcut"), cin, cout, 1, stride));
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                });
                block_names.push(name);
                cin = cout;
            }
        }
        let k = arch.num_classes;
        let fc = Tensor::randn([k, cin], 0.0, 1.0 / (cin as f64).sqrt(), &mut b.rng);
        let fc_weight = b.param("fc.weight".into(), fc);
        let fc_bias = b.param("fc.bias".into(), Tensor::zeros([k]));
        b.quant_names.push("fc".into());
        let fc_quant = b.quant_names.len() - 1;
        let mut model = Self {
            arch: arch.clone(),
            params: b.params,
            bns: b.bns,
            stem,
            stem_bn,
            blocks,
            block_names,
            fc_weight,
            fc_bias,
            fc_quant,
            quant_names: b.quant_names,
            taps: TapSet {
                names: Vec::new(),
                points: Vec::new(),
            },
            input_norm: None,
            frozen_bn: false,
            quant: None,
        };
        let defaults: Vec<String> = (1..=arch.stages.len())
            .map(|s| format!("stage{s}"))
            .collect();
        model.set_taps(&defaults)?;
        Ok(model)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &*p.value)
    }

    /// Mutable views of all parameters, in [`params`](Self::params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        self.params
            .iter_mut()
            .map(|p| Arc::make_mut(&mut p.value))
            .collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| Arc::make_mut(&mut p.value))
    }

    pub fn bn_layers(&self) -> &[BnLayer<E>] {
        &self.bns
    }

    pub fn bn_layers_mut(&mut self) -> &mut [BnLayer<E>] {
        &mut self.bns
    }

    pub fn num_bn(&self) -> usize {
        self.bns.len()
    }

    /// Names of the conv/linear layers, in forward order.
    pub fn quant_layer_names(&self) -> &[String] {
        &self.quant_names
    }

    /// Valid tap names: `stem`, `stage<s>` and `stage<s>.block<b>`.
    pub fn tap_points(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem".to_string(), 0)];
        let mut idx = 0;
        for (s, &(n, _)) in self.arch.stages.iter().enumerate() {
            for i in 0..n {
                out.push((self.block_names[idx].clone(), idx + 1));
                idx += 1;
                if i + 1 == n {
                    out.push((format!("stage{}", s + 1), idx));
                }
            }
        }
        out
    }

    pub fn resolve_taps(&self, names: &[String]) -> Result<TapSet> {
        let points = self.tap_points();
        let mut resolved = Vec::with_capacity(names.len());
        for n in names {
            let hits: Vec<usize> = points
                .iter()
                .filter(|(p, _)| p == n)
                .map(|&(_, i)| i)
                .collect();
            match hits.as_slice() {
                [i] => resolved.push(*i),
                _ => {
                    return Err(Error::config(format!(
                        "tap {n:?} does not name a layer; valid taps: {}",
                        points
                            .iter()
                            .map(|p| p.0.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    )))
                }
            }
        }
        Ok(TapSet {
            names: names.to_vec(),
            points: resolved,
        })
    }

    pub fn set_taps(&mut self, names: &[String]) -> Result<()> {
        self.taps = self.resolve_taps(names)?;
        Ok(())
    }

    pub fn taps(&self) -> &TapSet {
        &self.taps
    }

    /// Sets the input normalization applied before the stem; values are
    /// rounded to the storage precision so weight files round-trip exactly.
    pub fn set_input_norm(&mut self, norm: Option<Normalization>) -> Result<()> {
        if let Some(n) = &norm {
            if n.mean.len() != self.arch.input_chw[0] || n.std.len() != n.mean.len() {
                return Err(Error::config(
                    "normalization channel count does not match the model",
                ));
            }
            if n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::config("normalization std must be positive"));
            }
        }
        self.input_norm = norm.map(|n| Normalization {
            mean: n.mean.iter().map(|&v| v as f32 as f64).collect(),
            std: n.std.iter().map(|&v| v as f32 as f64).collect(),
        });
        Ok(())
    }

    pub fn input_norm(&self) -> Option<&Normalization> {
        self.input_norm.as_ref()
    }

    /// Train-mode forwards keep normalizing with batch statistics but no
    /// longer move the running estimates.
    pub fn freeze_bn(&mut self) {
        self.frozen_bn = true;
    }

    pub fn unfreeze_bn(&mut self) {
        self.frozen_bn = false;
    }

    pub fn is_bn_frozen(&self) -> bool {
        self.frozen_bn
    }

    pub fn quant(&self) -> Option<&QuantState> {
        self.quant.as_ref()
    }

    pub fn quant_mut(&mut self) -> Option<&mut QuantState> {
        self.quant.as_mut()
    }

    pub fn set_quant(&mut self, q: Option<QuantState>) {
        self.quant = q;
    }

    /// Per-channel weight quantizers derived from the current master weights.
    pub fn weight_quant_params(&self) -> Result<Vec<QuantParams>> {
        let q = self
            .quant
            .as_ref()
            .ok_or_else(|| Error::usage("model is not quantized"))?;
        let weights: Vec<usize> = self
            .conv_layers()
            .map(|c| c.weight)
            .chain([self.fc_weight])
            .collect();
        q.layers
            .iter()
            .zip(weights)
            .map(|(l, w)| QuantParams::symmetric_per_channel(&self.params[w].value, l.weight_bits))
            .collect()
    }

    fn conv_layers(&self) -> impl Iterator<Item = &Conv> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| {
            [Some(&b.conv1), Some(&b.conv2), b.shortcut.as_ref()]
                .into_iter()
                .flatten()
        }))
    }

    /// Registers every parameter in `g`.
    pub fn bind<'g>(&self, g: &'g Graph<E>, trainable: bool) -> Vec<Var<'g, E>> {
        self.params
            .iter()
            .map(|p| g.leaf_shared(p.value.clone(), trainable))
            .collect()
    }

    pub fn forward<'g>(
        &self,
        params: &[Var<'g, E>],
        x: Var<'g, E>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'g, E>> {
        if params.len() != self.params.len() {
            return Err(Error::usage(format!(
                "{} bound parameters for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != self.arch.input_chw {
            return Err(Error::ShapeMismatch {
                name: "model input".into(),
                expected: [
                    &[shape.first().copied().unwrap_or(0)][..],
                    &self.arch.input_chw,
                ]
                .concat(),
                found: shape,
            });
        }
        let mut out = ForwardOutput {
            logits: x,
            taps: Vec::new(),
            bn_inputs: Vec::new(),
            batch_stats: Vec::new(),
            act_ranges: if opts.calibrate {
                vec![Vec::new(); self.quant_names.len()]
            } else {
                Vec::new()
            },
        };
        if opts.calibrate && self.quant.is_none() {
            return Err(Error::usage("calibration forward on an unquantized model"));
        }
        let mut feats: Vec<Option<Var<'g, E>>> = vec![None; self.blocks.len() + 1];
        let mut h = x;
        if let Some(n) = &self.input_norm {
            let scale: Vec<f64> = n.std.iter().map(|s| 1.0 / s).collect();
            let shift: Vec<f64> = n.mean.iter().zip(&n.std).map(|(m, s)| -m / s).collect();
            h = h.channel_affine(&scale, &shift)?;
        }
        h = self.conv(&self.stem, params, h, opts, &mut out)?;
        h = self.bn(self.stem_bn, params, h, opts, &mut out)?.relu();
        feats[0] = Some(h);
        for (i, b) in self.blocks.iter().enumerate() {
            let inp = h;
            let mut a = self.conv(&b.conv1, params, inp, opts, &mut out)?;
            a = self.bn(b.bn1, params, a, opts, &mut out)?.relu();
            a = self.conv(&b.conv2, params, a, opts, &mut out)?;
            a = self.bn(b.bn2, params, a, opts, &mut out)?;
            let s = match &b.shortcut {
                Some(c) => self.conv(c, params, inp, opts, &mut out)?,
                None => inp,
            };
            h = a.add(s)?.relu();
            feats[i + 1] = Some(h);
        }
        if opts.taps {
            out.taps = self
                .taps
                .points
                .iter()
                .map(|&p| feats[p].unwrap())
                .collect();
        }
        let pooled = h.global_avg_pool()?;
        let (pooled, w) = self.quantized(
            self.fc_quant,
            params[self.fc_weight],
            pooled,
            opts,
            &mut out,
        )?;
        out.logits = pooled.linear(w, Some(params[self.fc_bias]))?;
        Ok(out)
    }

    /// Applies fake quantization to a layer's input and weight when the model
    /// is quantized.
    fn quantized<'g>(
        &self,
        layer: usize,
        w: Var<'g, E>,
        h: Var<'g, E>,
        opts: ForwardOptions,
        out: &mut ForwardOutput<'g, E>,
    ) -> Result<(Var<'g, E>, Var<'g, E>)> {
        let Some(q) = &self.quant else {
            return Ok((h, w));
        };
        let lq = &q.layers[layer];
        let h = if opts.calibrate {
            out.act_ranges[layer] = sample_ranges(&h.value());
            h
        } else if let Some(p) = &lq.act_params {
            h.fake_quant(p, true)?
        } else {
            h
        };
        let wp = QuantParams::symmetric_per_channel(&w.value(), lq.weight_bits)?;
        Ok((h, w.fake_quant(&wp, true)?))
    }

    fn conv<'g>(
        &self,
        c: &Conv,
        params: &[Var<'g, E>],
        h: Var<'g, E>,
        opts: ForwardOptions,
        out: &mut ForwardOutput<'g, E>,
    ) -> Result<Var<'g, E>> {
        let (h, w) = self.quantized(c.quant, params[c.weight], h, opts, out)?;
        h.conv2d(w, None, c.stride, c.pad)
    }

    fn bn<'g>(
        &self,
        idx: usize,
        params: &[Var<'g, E>],
        h: Var<'g, E>,
        opts: ForwardOptions,
        out: &mut ForwardOutput<'g, E>,
    ) -> Result<Var<'g, E>> {
        let layer = &self.bns[idx];
        if opts.bn_inputs {
            out.bn_inputs.push(h);
        }
        let (g, b) = (params[layer.gamma], params[layer.beta]);
        match opts.mode {
            Mode::Eval => h.batch_norm_eval(g, b, &layer.running_mean, &layer.running_var, BN_EPS),
            Mode::Train => {
                let (y, stats) = h.batch_norm_train(g, b, BN_EPS)?;
                out.batch_stats.push(stats);
                Ok(y)
            }
        }
    }

    /// Commits the side effects of a forward pass: running BN updates
    /// (train mode, unless frozen) and calibration observations.
    pub fn update_state(&mut self, out: &ForwardOutput<'_, E>) -> Result<()> {
        if !self.frozen_bn {
            for (layer, stats) in self.bns.iter_mut().zip(&out.batch_stats) {
                stats.update_running(&mut layer.running_mean, &mut layer.running_var, BN_MOMENTUM);
            }
        }
        if !out.act_ranges.is_empty() {
            let q = self
                .quant
                .as_mut()
                .ok_or_else(|| Error::usage("model is not quantized"))?;
            q.observe(&out.act_ranges)?;
        }
        Ok(())
    }

    /// Forward pass that also commits side effects.
    pub fn forward_mut<'g>(
        &mut self,
        params: &[Var<'g, E>],
        x: Var<'g, E>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'g, E>> {
        let out = self.forward(params, x, opts)?;
        self.update_state(&out)?;
        Ok(out)
    }

    /// Eval-mode logits for a batch of images, processed in chunks.
    pub fn predict(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        const CHUNK: usize = 256;
        let n = images.batch_size();
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let g = Graph::new();
            let params = self.bind(&g, false);
            let x = g.constant(images.slice_batch(start, (start + CHUNK).min(n)));
            parts.push(
                self.forward(&params, x, ForwardOptions::eval())?
                    .logits
                    .value(),
            );
        }
        let refs: Vec<&Tensor<E>> = parts.iter().map(|t| &**t).collect();
        if refs.is_empty() {
            return Ok(Tensor::zeros([0, self.arch.num_classes]));
        }
        Tensor::concat(&refs)
    }

    /// Copies `(μ̂, σ̂)` from every BN layer; with `dataset_norm` the input
    /// normalization is prepended as layer 0.
    pub fn extract_bn_reference(
        &self,
        dataset_norm: Option<&Normalization>,
    ) -> Result<BnReference> {
        if self.bns.is_empty() {
            return Err(Error::UnsupportedModel(
                "model has no batch-norm layers".into(),
            ));
        }
        let mut layers = Vec::with_capacity(self.bns.len() + 1);
        if let Some(n) = dataset_norm {
            if n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Data(
                    "dataset normalization std must be positive".into(),
                ));
            }
            layers.push(BnTarget {
                name: "input".into(),
                mean: n.mean.clone(),
                var: n.std.iter().map(|s| s * s).collect(),
                std: n.std.clone(),
            });
        }
        for l in &self.bns {
            let var: Vec<f64> = l.running_var.data().iter().map(|v| v.as_f64()).collect();
            layers.push(BnTarget {
                name: l.name.clone(),
                mean: l.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                std: var.iter().map(|v| v.max(VAR_FLOOR).sqrt()).collect(),
                var,
            });
        }
        Ok(BnReference {
            layers,
            input_layer: dataset_norm.is_some(),
        })
    }

    /// Same model in another element type.
    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|l| BnLayer {
                    name: l.name.clone(),
                    gamma: l.gamma,
                    beta: l.beta,
                    running_mean: l.running_mean.cast(),
                    running_var: l.running_var.cast(),
                })
                .collect(),
            stem: self.stem.clone(),
            stem_bn: self.stem_bn,
            blocks: self.blocks.clone(),
            block_names: self.block_names.clone(),
            fc_weight: self.fc_weight,
            fc_bias: self.fc_bias,
            fc_quant: self.fc_quant,
            quant_names: self.quant_names.clone(),
            taps: self.taps.clone(),
            input_norm: self.input_norm.clone(),
            frozen_bn: self.frozen_bn,
            quant: self.quant.clone(),
        }
    }

    /// Exact equality of parameters and running statistics.
    pub fn same_state(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
            && self.bns.len() == other.bns.len()
            && self
                .bns
                .iter()
                .zip(&other.bns)
                .all(|(a, b)| a.running_mean == b.running_mean && a.running_var == b.running_var)
    }
}

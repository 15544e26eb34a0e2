use serde::{Deserialize, Serialize};

use super::calib::RangeEstimator;
use super::fake::{check_bits, QuantParams};
use crate::error::{Error, Result};

/// Bit widths for one named layer, overriding the defaults.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub layer: String,
    pub wbits: u8,
    pub abits: u8,
}

/// A `#w#a` plan: default weight/activation bits plus per-layer overrides.
/// Batch-norm layers are never quantized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSpec {
    pub weights_bits: u8,
    pub act_bits: u8,
    pub overrides: Vec<LayerOverride>,
    pub calib_steps: usize,
    pub calib_batch: usize,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            weights_bits: 8,
            act_bits: 8,
            overrides: Vec::new(),
            calib_steps: 20,
            calib_batch: 32,
        }
    }
}

impl QuantSpec {
    pub fn new(weights_bits: u8, act_bits: u8) -> Self {
        Self {
            weights_bits,
            act_bits,
            ..Self::default()
        }
    }

    /// Parses the `#w#a` notation, e.g. `"2w4a"`.
    pub fn parse_wa(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("expected <bits>w<bits>a, got {s:?}"));
        let (w, a) = s.trim().split_once('w').ok_or_else(bad)?;
        let a = a.strip_suffix('a').ok_or_else(bad)?;
        let spec = Self::new(w.parse().map_err(|_| bad())?, a.parse().map_err(|_| bad())?);
        check_bits(spec.weights_bits)?;
        check_bits(spec.act_bits)?;
        Ok(spec)
    }

    pub fn with_override(mut self, layer: &str, wbits: u8, abits: u8) -> Self {
        self.overrides.push(LayerOverride {
            layer: layer.to_string(),
            wbits,
            abits,
        });
        self
    }

    /// Checks bit ranges and that every override names one of `layers`.
    pub fn validate(&self, layers: &[String]) -> Result<()> {
        check_bits(self.weights_bits)?;
        check_bits(self.act_bits)?;
        for o in &self.overrides {
            check_bits(o.wbits)?;
            check_bits(o.abits)?;
            if !layers.contains(&o.layer) {
                return Err(Error::config(format!(
                    "quantization override names unknown layer {:?}; quantizable layers: {}",
                    o.layer,
                    layers.join(", ")
                )));
            }
        }
        if self.calib_batch == 0 {
            return Err(Error::config("calib_batch must be positive"));
        }
        Ok(())
    }

    pub fn bits_for(&self, layer: &str) -> (u8, u8) {
        self.overrides
            .iter()
            .rev()
            .find(|o| o.layer == layer)
            .map_or((self.weights_bits, self.act_bits), |o| (o.wbits, o.abits))
    }

    pub fn label(&self) -> String {
        format!("{}w{}a", self.weights_bits, self.act_bits)
    }
}

/// Quantizer state of one conv/linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub name: String,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub estimator: RangeEstimator,
    /// Set once calibration finalizes; used to quantize the layer input.
    pub act_params: Option<QuantParams>,
}

/// Quantization attached to a model: per-layer bit widths, estimators and
/// activation parameters. Weight parameters are derived from the fp32
/// master weights at every forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub spec: QuantSpec,
    pub layers: Vec<LayerQuant>,
    frozen: bool,
}

impl QuantState {
    pub fn new(spec: QuantSpec, layer_names: &[String]) -> Result<Self> {
        spec.validate(layer_names)?;
        let layers = layer_names
            .iter()
            .map(|name| {
                let (weight_bits, act_bits) = spec.bits_for(name);
                LayerQuant {
                    name: name.clone(),
                    weight_bits,
                    act_bits,
                    estimator: RangeEstimator::default(),
                    act_params: None,
                }
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_calibrated(&self) -> bool {
        self.layers.iter().all(|l| l.act_params.is_some())
    }

    /// Feeds per-sample `(min, max)` observations of each layer input.
    pub fn observe(&mut self, ranges: &[Vec<(f64, f64)>]) -> Result<()> {
        if self.frozen {
            return Err(Error::usage(
                "activation ranges are frozen; calibration is closed",
            ));
        }
        if ranges.len() != self.layers.len() {
            return Err(Error::usage(format!(
                "{} range observations for {} quantized layers",
                ranges.len(),
                self.layers.len()
            )));
        }
        for (layer, obs) in self.layers.iter_mut().zip(ranges) {
            for &(lo, hi) in obs {
                layer.estimator.observe(lo, hi)?;
            }
        }
        Ok(())
    }

    /// Derives activation parameters from the estimators.
    pub fn finalize(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::usage(
                "activation ranges are frozen; calibration is closed",
            ));
        }
        for layer in &mut self.layers {
            let p = layer
                .estimator
                .finalize(layer.act_bits)
                .map_err(|e| Error::usage(format!("layer {}: {e}", layer.name)))?;
            layer.act_params = Some(p);
        }
        Ok(())
    }

    /// Makes every activation range read-only.
    pub fn freeze(&mut self) -> Result<()> {
        if !self.is_calibrated() {
            return Err(Error::usage(
                "cannot freeze activation ranges of an uncalibrated student",
            ));
        }
        for layer in &mut self.layers {
            layer.estimator.freeze();
        }
        self.frozen = true;
        Ok(())
    }

    pub fn act_params(&self) -> Vec<Option<QuantParams>> {
        self.layers.iter().map(|l| l.act_params.clone()).collect()
    }
}

//! Uniform fake quantization: `x̂ = (clamp(round(x/s) + z, qmin, qmax) − z)·s`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Scale(s), zero point and integer range of a quantizer.
///
/// One scale means per-tensor; otherwise there is one scale per slice of the
/// leading axis (output channel of a weight).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f64>,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

/// Signed two's-complement range `[−2^(b−1), 2^(b−1) − 1]`.
pub fn signed_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

/// Unsigned range `[0, 2^b − 1]`.
pub fn unsigned_range(bits: u8) -> (i32, i32) {
    (0, (1i32 << bits) - 1)
}

impl QuantParams {
    pub fn per_tensor(scale: f64, zero_point: i32, qmin: i32, qmax: i32) -> Result<Self> {
        let p = Self {
            scales: vec![scale],
            zero_point,
            qmin,
            qmax,
        };
        p.validate()?;
        Ok(p)
    }

    /// Symmetric per-output-channel weight quantizer with zero point 0 and
    /// `s_c = max|w_c| / (2^(b−1) − 1)`.
    pub fn symmetric_per_channel<E: Element>(weight: &Tensor<E>, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let (qmin, qmax) = signed_range(bits);
        let channels = weight.batch_size();
        let scales = (0..channels)
            .map(|c| {
                let m = weight
                    .row(c)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
                if m > 0.0 {
                    m / qmax as f64
                } else {
                    // all-zero channel: any positive scale reproduces it exactly
                    1.0
                }
            })
            .collect();
        let p = Self {
            scales,
            zero_point: 0,
            qmin,
            qmax,
        };
        p.validate()?;
        Ok(p)
    }

    /// Affine per-tensor quantizer covering `[lo, hi]`, which is widened to
    /// contain zero so that zero is exactly representable.
    pub fn affine_from_range(lo: f64, hi: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Data(format!(
                "invalid activation range [{lo}, {hi}]"
            )));
        }
        let (qmin, qmax) = unsigned_range(bits);
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let scale = ((hi - lo) / (qmax - qmin) as f64).max(f64::MIN_POSITIVE.sqrt());
        let zero_point = ((qmin as f64 - lo / scale).round() as i32).clamp(qmin, qmax);
        Self::per_tensor(scale, zero_point, qmin, qmax)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!(
                "quantizer scales must be positive, got {:?}",
                self.scales
            )));
        }
        if self.qmin >= self.qmax || self.zero_point < self.qmin || self.zero_point > self.qmax {
            return Err(Error::config(format!(
                "zero point {} outside [{}, {}]",
                self.zero_point, self.qmin, self.qmax
            )));
        }
        Ok(())
    }

    pub fn is_per_channel(&self) -> bool {
        self.scales.len() > 1
    }

    fn scale_for(&self, row: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[row]
        }
    }

    /// Real value of the largest representable level.
    pub fn max_representable(&self, row: usize) -> f64 {
        (self.qmax - self.zero_point) as f64 * self.scale_for(row)
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::config(format!(
            "bit width must be in [2, 8], got {bits}"
        )));
    }
    Ok(())
}

/// Quantize-dequantize with round-half-away-from-zero. Also returns the
/// straight-through mask (1 where the pre-clamp level was representable).
pub fn fake_quant_tensor<E: Element>(
    x: &Tensor<E>,
    params: &QuantParams,
) -> Result<(Tensor<E>, Tensor<E>)> {
    params.validate()?;
    let rows = if params.is_per_channel() {
        x.batch_size()
    } else {
        1
    };
    if params.is_per_channel() && params.scales.len() != rows {
        return Err(Error::config(format!(
            "{} channel scales for tensor with {rows} channels",
            params.scales.len()
        )));
    }
    let per_row = x.len() / rows.max(1);
    let (z, qmin, qmax) = (
        params.zero_point as f64,
        params.qmin as f64,
        params.qmax as f64,
    );
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut mask = Tensor::zeros(x.shape().to_vec());
    for r in 0..rows {
        let s = params.scale_for(r);
        let range = r * per_row..(r + 1) * per_row;
        for ((o, m), &v) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&mut mask.data_mut()[range.clone()])
            .zip(&x.data()[range])
        {
            let q = (v.as_f64() / s).round() + z;
            let inside = q >= qmin && q <= qmax;
            *o = E::from_f64((q.clamp(qmin, qmax) - z) * s);
            *m = if inside { E::one() } else { E::zero() };
        }
    }
    Ok((out, mask))
}

impl<'g, E: Element> Var<'g, E> {
    /// Fake-quantizes; with `ste` the gradient is passed straight through
    /// inside the representable range and zeroed where the input saturated.
    /// Without it the op is treated as a constant.
    pub fn fake_quant(self, params: &QuantParams, ste: bool) -> Result<Var<'g, E>> {
        let (out, mask) = fake_quant_tensor(&self.value(), params)?;
        if !ste {
            return Ok(self.graph.constant(out));
        }
        let mask = Arc::new(mask);
        Ok(self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&mask, |d, m| d * m).unwrap())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn q1(x: f64, p: &QuantParams) -> f64 {
        let t = Tensor::<f64>::new([1], vec![x]).unwrap();
        fake_quant_tensor(&t, p).unwrap().0.item()
    }

    #[test]
    fn rounding_and_saturation() {
        let p = QuantParams::per_tensor(0.1, 0, -8, 7).unwrap();
        assert!((q1(0.26, &p) - 0.3).abs() < 1e-12);
        assert!((q1(5.0, &p) - 0.7).abs() < 1e-12);
        assert!((q1(-5.0, &p) + 0.8).abs() < 1e-12);
        // half away from zero
        assert!((q1(0.25, &p) - 0.3).abs() < 1e-12);
        assert!((q1(-0.25, &p) + 0.3).abs() < 1e-12);
    }

    #[test]
    fn weight_scale_is_max_over_qmax() {
        let w = Tensor::<f64>::new([2, 2], vec![0.5, -0.25, 0.1, -0.3]).unwrap();
        let p = QuantParams::symmetric_per_channel(&w, 4).unwrap();
        assert!((p.scales[0] - 0.5 / 7.0).abs() < 1e-15);
        assert!((p.scales[1] - 0.3 / 7.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn affine_range_example() {
        let p = QuantParams::affine_from_range(-2.0, 3.0, 8).unwrap();
        assert!((p.scales[0] - 5.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 102);
        let post_relu = QuantParams::affine_from_range(0.5, 3.0, 8).unwrap();
        assert_eq!(post_relu.zero_point, post_relu.qmin);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::per_tensor(0.0, 0, -8, 7).is_err());
        assert!(QuantParams::per_tensor(0.1, 9, -8, 7).is_err());
        assert!(check_bits(1).is_err());
        assert!(check_bits(9).is_err());
    }

    #[test]
    fn ste_mask_zero_at_saturation() {
        let g = Graph::<f64>::new();
        let p = QuantParams::per_tensor(0.1, 0, -8, 7).unwrap();
        let x = g.leaf(
            Tensor::new([4], vec![0.26, 5.0, -0.79, -0.9]).unwrap(),
            true,
        );
        let y = x.fake_quant(&p, true).unwrap();
        g.backward(y.mean()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn two_bit_weights_take_four_levels() {
        let w = Tensor::<f64>::from_fn([1, 101], |i| i as f64 / 50.0 - 1.0);
        let p = QuantParams::symmetric_per_channel(&w, 2).unwrap();
        let (q, _) = fake_quant_tensor(&w, &p).unwrap();
        let s = p.scales[0];
        let mut levels: Vec<i64> = q.data().iter().map(|v| (v / s).round() as i64).collect();
        levels.sort();
        levels.dedup();
        assert!(levels.iter().all(|l| [-2, -1, 0, 1].contains(l)));
    }
}

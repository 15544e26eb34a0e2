//! Differentiable in-batch augmentation: every sample is duplicated and each
//! copy gets one transform drawn from the enabled set (flip, crop-resize or
//! cutout), expressed as one sparse linear map so gradients of all copies sum
//! onto the original.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::ResampleMap;
use crate::tensor::{Element, Var};

pub const FLIP_PROB: f64 = 0.5;
pub const CROP_SCALE: (f64, f64) = (0.7, 1.0);
pub const CUTOUT_AREA: (f64, f64) = (0.05, 0.25);
pub const MAX_CUTOUTS: usize = 2;

/// Transforms a duplicate may draw from; each duplicate draws one uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSet {
    pub flip: bool,
    pub crop: bool,
    pub cutout: bool,
}

impl Default for AugmentSet {
    fn default() -> Self {
        Self::all()
    }
}

impl AugmentSet {
    pub fn all() -> Self {
        Self {
            flip: true,
            crop: true,
            cutout: true,
        }
    }

    pub fn none() -> Self {
        Self {
            flip: false,
            crop: false,
            cutout: false,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip: true,
            ..Self::none()
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.flip || self.crop || self.cutout)
    }
}

/// Bilinear source taps for output coordinate `o` of `out` pixels sampled
/// from the window `[start, start + len)`.
fn bilinear(o: usize, out: usize, start: usize, len: usize) -> [(usize, f64); 2] {
    let pos = start as f64 + (o as f64 + 0.5) * len as f64 / out as f64 - 0.5;
    let pos = pos.clamp(start as f64, (start + len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(start + len - 1);
    let t = pos - lo as f64;
    [(lo, 1.0 - t), (hi, t)]
}

/// Output `[B·n, C, H, W]`; copy `d` of sample `b` sits at row `d·B + b`.
/// With `n = 1` and an empty transform set the input is returned as is.
pub fn in_batch_augment<'g, E: Element, R: Rng + ?Sized>(
    x: Var<'g, E>,
    duplicates: usize,
    set: AugmentSet,
    rng: &mut R,
) -> Result<Var<'g, E>> {
    if duplicates == 0 {
        return Err(Error::config(
            "in-batch augmentation needs at least one duplicate",
        ));
    }
    if duplicates == 1 && set.is_empty() {
        return Ok(x);
    }
    let shape = x.shape();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::config(format!(
            "in-batch augmentation expects NCHW, got {shape:?}"
        )));
    };
    let plane = h * w;
    let enabled: Vec<u8> = [(set.flip, 0u8), (set.crop, 1), (set.cutout, 2)]
        .iter()
        .filter_map(|&(on, t)| on.then_some(t))
        .collect();
    let mut entries = Vec::with_capacity(duplicates * b * c * plane * 4);
    for _ in 0..duplicates {
        for s in 0..b {
            let pick = if enabled.is_empty() {
                None
            } else {
                Some(enabled[rng.random_range(0..enabled.len())])
            };
            let mirror = pick == Some(0) && rng.random_bool(FLIP_PROB);
            let (ch, cw, y0, x0) = if pick == Some(1) {
                let scale = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
                let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
                let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
                (
                    ch,
                    cw,
                    rng.random_range(0..=h - ch),
                    rng.random_range(0..=w - cw),
                )
            } else {
                (h, w, 0, 0)
            };
            let mut keep = vec![true; plane];
            if pick == Some(2) {
                let count = rng.random_range(1..=MAX_CUTOUTS);
                for _ in 0..count {
                    let area = rng.random_range(CUTOUT_AREA.0..=CUTOUT_AREA.1) * plane as f64;
                    let side = area.sqrt();
                    let rh = (side.round() as usize).clamp(1, h);
                    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
                    let (ry, rx) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
                    for yy in ry..ry + rh {
                        keep[yy * w + rx..yy * w + rx + rw].fill(false);
                    }
                }
            }
            for k in 0..c {
                let base = (s * c + k) * plane;
                for y in 0..h {
                    let ys = bilinear(y, h, y0, ch);
                    for xo in 0..w {
                        let xi = if mirror { w - 1 - xo } else { xo };
                        let xs = bilinear(xi, w, x0, cw);
                        let m = if keep[y * w + xo] { 1.0 } else { 0.0 };
                        for (sy, wy) in ys {
                            for (sx, wx) in xs {
                                entries
                                    .push(((base + sy * w + sx) as u32, E::from_f64(m * wy * wx)));
                            }
                        }
                    }
                }
            }
        }
    }
    let map = ResampleMap::new(vec![duplicates * b, c, h, w], b * c * plane, 4, entries)?;
    x.resample(Arc::new(map))
}

//! Chunked, smoothed min/max range estimation for activation quantizers.

use serde::{Deserialize, Serialize};

use super::fake::QuantParams;
use crate::error::{Error, Result};

pub const CHUNK_SIZE: usize = 16;
pub const MOMENTUM: f64 = 0.9;

/// Per-sample minima and maxima are averaged within chunks of
/// [`CHUNK_SIZE`] samples; chunk averages feed an exponential moving average
/// `r ← m·r + (1 − m)·chunk`, initialized directly by the first chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimator {
    chunk_size: usize,
    momentum: f64,
    amin: f64,
    amax: f64,
    chunks: usize,
    pending: Vec<(f64, f64)>,
    frozen: bool,
}

impl Default for RangeEstimator {
    fn default() -> Self {
        Self::new(CHUNK_SIZE, MOMENTUM)
    }
}

impl RangeEstimator {
    pub fn new(chunk_size: usize, momentum: f64) -> Self {
        Self {
            chunk_size: chunk_size.max(1),
            momentum,
            amin: 0.0,
            amax: 0.0,
            chunks: 0,
            pending: Vec::new(),
            frozen: false,
        }
    }

    pub fn chunks_seen(&self) -> usize {
        self.chunks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Current `(amin, amax)`, if at least one chunk completed.
    pub fn range(&self) -> Option<(f64, f64)> {
        (self.chunks > 0).then_some((self.amin, self.amax))
    }

    /// Adds one sample's `(min, max)`; completes a chunk every
    /// `chunk_size` samples.
    pub fn observe(&mut self, sample_min: f64, sample_max: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::usage(
                "activation range is frozen; calibration is closed",
            ));
        }
        if !(sample_min.is_finite() && sample_max.is_finite()) {
            return Err(Error::NonFinite("activation range observation".into()));
        }
        self.pending.push((sample_min, sample_max));
        if self.pending.len() == self.chunk_size {
            let n = self.chunk_size as f64;
            let cmin = self.pending.iter().map(|p| p.0).sum::<f64>() / n;
            let cmax = self.pending.iter().map(|p| p.1).sum::<f64>() / n;
            self.pending.clear();
            if self.chunks == 0 {
                self.amin = cmin;
                self.amax = cmax;
            } else {
                self.amin = self.momentum * self.amin + (1.0 - self.momentum) * cmin;
                self.amax = self.momentum * self.amax + (1.0 - self.momentum) * cmax;
            }
            self.chunks += 1;
        }
        Ok(())
    }

    /// Affine per-tensor parameters for the estimated range.
    pub fn finalize(&self, bits: u8) -> Result<QuantParams> {
        let (lo, hi) = self.range().ok_or_else(|| {
            Error::usage("range estimator finalized before a full chunk was observed")
        })?;
        QuantParams::affine_from_range(lo, hi, bits)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.pending.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(e: &mut RangeEstimator, lo: f64, hi: f64) {
        for _ in 0..CHUNK_SIZE {
            e.observe(lo, hi).unwrap();
        }
    }

    #[test]
    fn single_chunk_sets_range() {
        let mut e = RangeEstimator::default();
        feed(&mut e, -2.0, 3.0);
        assert_eq!(e.range(), Some((-2.0, 3.0)));
        let p = e.finalize(8).unwrap();
        assert!((p.scales[0] - 5.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 102);
    }

    #[test]
    fn ema_across_chunks() {
        let mut e = RangeEstimator::default();
        feed(&mut e, 0.0, 3.0);
        feed(&mut e, 0.0, 5.0);
        assert!((e.range().unwrap().1 - 3.2).abs() < 1e-12);
    }

    #[test]
    fn within_chunk_average() {
        let mut e = RangeEstimator::default();
        for i in 0..CHUNK_SIZE {
            e.observe(0.0, if i % 2 == 0 { 1.0 } else { 3.0 }).unwrap();
        }
        assert_eq!(e.range(), Some((0.0, 2.0)));
    }

    #[test]
    fn finalize_requires_a_chunk_and_freeze_blocks_updates() {
        let mut e = RangeEstimator::default();
        for _ in 0..CHUNK_SIZE - 1 {
            e.observe(0.0, 1.0).unwrap();
        }
        assert!(matches!(e.finalize(8), Err(Error::Usage(_))));
        e.observe(0.0, 1.0).unwrap();
        e.freeze();
        assert!(matches!(e.observe(0.0, 1.0), Err(Error::Usage(_))));
        assert!(e.finalize(8).is_ok());
    }

    #[test]
    fn positive_mins_clamp_to_zero_point_qmin() {
        let mut e = RangeEstimator::default();
        feed(&mut e, 0.4, 2.0);
        let p = e.finalize(4).unwrap();
        assert_eq!(p.zero_point, p.qmin);
    }
}

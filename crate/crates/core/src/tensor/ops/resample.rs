use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Sparse linear map from a flat input to an output of `out_shape`:
/// `out[i] = Σₜ wᵢₜ · in[srcᵢₜ]` with a fixed number of taps per output.
///
/// Flips, crops with bilinear resizing, cutout masks and batch duplication
/// are all instances, so a whole augmented batch is a single graph node.
#[derive(Clone, Debug)]
pub struct ResampleMap<E: Element = f32> {
    out_shape: Vec<usize>,
    in_len: usize,
    taps: usize,
    entries: Vec<(u32, E)>,
}

impl<E: Element> ResampleMap<E> {
    pub fn new(
        out_shape: Vec<usize>,
        in_len: usize,
        taps: usize,
        entries: Vec<(u32, E)>,
    ) -> Result<Self> {
        let n_out: usize = out_shape.iter().product();
        if taps == 0 || entries.len() != n_out * taps {
            return Err(Error::config(format!(
                "resample map needs {} entries, got {}",
                n_out * taps,
                entries.len()
            )));
        }
        if let Some((src, _)) = entries.iter().find(|(s, _)| *s as usize >= in_len) {
            return Err(Error::config(format!(
                "resample source {src} outside input of {in_len}"
            )));
        }
        Ok(Self {
            out_shape,
            in_len,
            taps,
            entries,
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, input: &[E]) -> Vec<E> {
        self.entries
            .chunks_exact(self.taps)
            .map(|taps| taps.iter().map(|&(s, w)| w * input[s as usize]).sum())
            .collect()
    }

    fn adjoint(&self, grad: &[E]) -> Vec<E> {
        let mut out = vec![E::zero(); self.in_len];
        for (taps, &g) in self.entries.chunks_exact(self.taps).zip(grad) {
            for &(s, w) in taps {
                out[s as usize] += w * g;
            }
        }
        out
    }
}

impl<'g, E: Element> Var<'g, E> {
    pub fn resample(self, map: Arc<ResampleMap<E>>) -> Result<Var<'g, E>> {
        let x = self.value();
        if x.len() != map.in_len {
            return Err(Error::config(format!(
                "resample map expects {} inputs, got {}",
                map.in_len,
                x.len()
            )));
        }
        let out = Tensor::new(map.out_shape.clone(), map.apply(x.data()))?;
        let shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g, _| {
            vec![Some(
                Tensor::new(shape.clone(), map.adjoint(g.data())).unwrap(),
            )]
        }))
    }
}

//! Image-classification datasets: the procedural desk dataset, the binary
//! file format, training augmentations and normalization statistics.

mod augment;
mod io;
mod procedural;

pub use augment::standard_augment;
pub use io::{load_dataset, save_dataset};
pub use procedural::{make_procedural, splitmix64, Split, SplitMix64};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel input mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Images stored as 8-bit levels (pixel value `v/255`), with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    len: usize,
    chw: [usize; 3],
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    /// Builds from raw levels; `labels` must lie in `[0, num_classes)`.
    pub fn from_levels(
        pixels: Vec<u8>,
        chw: [usize; 3],
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let per = chw.iter().product::<usize>();
        if per == 0 || pixels.len() % per != 0 {
            return Err(Error::Data(format!(
                "{} pixels do not form whole {chw:?} images",
                pixels.len()
            )));
        }
        let len = pixels.len() / per;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Data(format!("{} labels for {len} images", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= num_classes) {
                return Err(Error::Data(format!(
                    "label {bad} outside [0, {num_classes})"
                )));
            }
        }
        Ok(Self {
            pixels,
            len,
            chw,
            labels,
            num_classes,
        })
    }

    /// Quantizes a float NCHW batch in `[0,1]` to 8-bit levels.
    pub fn from_tensor<E: Element>(
        images: &Tensor<E>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let (_, c, h, w) = images.dims4()?;
        if !images.all_finite() {
            return Err(Error::NonFinite("dataset images".into()));
        }
        let pixels = images
            .data()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::from_levels(pixels, [c, h, w], labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn chw(&self) -> [usize; 3] {
        self.chw
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn levels(&self) -> &[u8] {
        &self.pixels
    }

    fn per_image(&self) -> usize {
        self.chw.iter().product()
    }

    pub fn image_levels(&self, i: usize) -> &[u8] {
        let p = self.per_image();
        &self.pixels[i * p..(i + 1) * p]
    }

    /// Float NCHW batch of the given images.
    pub fn images<E: Element>(&self, indices: &[usize]) -> Tensor<E> {
        let p = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(
                self.image_levels(i)
                    .iter()
                    .map(|&v| E::from_f64(v as f64 / 255.0)),
            );
        }
        let [c, h, w] = self.chw;
        Tensor::new([indices.len(), c, h, w], data).expect("consistent batch shape")
    }

    pub fn all_images<E: Element>(&self) -> Tensor<E> {
        self.images(&(0..self.len).collect::<Vec<_>>())
    }

    /// Labels of the given images, or a data error for unlabeled sets.
    pub fn batch_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let l = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        Ok(indices.iter().map(|&i| l[i]).collect())
    }

    pub fn with_labels(mut self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        self.labels = None;
        Self::from_levels(
            std::mem::take(&mut self.pixels),
            self.chw,
            Some(labels),
            num_classes,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            pixels.extend_from_slice(self.image_levels(i));
        }
        Self {
            pixels,
            len: indices.len(),
            chw: self.chw,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("no datasets to concatenate".into()))?;
        let labeled = first.labels.is_some();
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for d in parts {
            if d.chw != first.chw || d.labels.is_some() != labeled {
                return Err(Error::Data(
                    "concatenated datasets differ in shape or labeling".into(),
                ));
            }
            pixels.extend_from_slice(&d.pixels);
            labels.extend(d.labels.iter().flatten().copied());
        }
        let k = parts.iter().map(|d| d.num_classes).max().unwrap_or(0);
        Self::from_levels(pixels, first.chw, labeled.then_some(labels), k)
    }

    /// Per-channel mean and population standard deviation over all pixels.
    pub fn normalization(&self) -> Result<Normalization> {
        if self.is_empty() {
            return Err(Error::Data("normalization of an empty dataset".into()));
        }
        let [c, h, w] = self.chw;
        let sp = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..self.len {
            let img = self.image_levels(i);
            for ch in 0..c {
                for &v in &img[ch * sp..(ch + 1) * sp] {
                    let x = v as f64 / 255.0;
                    mean[ch] += x;
                    sq[ch] += x * x;
                }
            }
        }
        let n = (self.len * sp) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= n;
                (s / n - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    /// Per-class member indices.
    pub fn class_indices(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in labels.iter().enumerate() {
            out[l].push(i);
        }
        Ok(out)
    }

    /// Uniform indices drawn with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len)).collect()
    }

    /// Adapts to a model's input contract: single-channel images are
    /// replicated to `c` channels and everything is bilinearly resized.
    pub fn adapt_to(&self, chw: [usize; 3]) -> Result<Self> {
        if self.chw == chw {
            return Ok(self.clone());
        }
        let [c0, h0, w0] = self.chw;
        let [c, h, w] = chw;
        if c0 != c && c0 != 1 {
            return Err(Error::Data(format!(
                "cannot adapt {c0}-channel images to {c} channels"
            )));
        }
        let mut pixels = Vec::with_capacity(self.len * c * h * w);
        let sy = h0 as f64 / h as f64;
        let sx = w0 as f64 / w as f64;
        for i in 0..self.len {
            let img = self.image_levels(i);
            for ch in 0..c {
                let src = if c0 == 1 { 0 } else { ch };
                let plane = &img[src * h0 * w0..(src + 1) * h0 * w0];
                for y in 0..h {
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as f64);
                    let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
                    let y1 = (y0 + 1).min(h0 - 1);
                    for x in 0..w {
                        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as f64);
                        let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                        let x1 = (x0 + 1).min(w0 - 1);
                        let p = |yy: usize, xx: usize| plane[yy * w0 + xx] as f64;
                        let v = (1.0 - ty) * ((1.0 - tx) * p(y0, x0) + tx * p(y0, x1))
                            + ty * ((1.0 - tx) * p(y1, x0) + tx * p(y1, x1));
                        pixels.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        Self::from_levels(pixels, chw, self.labels.clone(), self.num_classes)
    }
}

/// Exactly `per_class` members of every class, chosen by a seeded shuffle.
pub fn subsample_balanced(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let classes = dataset.class_indices()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * classes.len());
    for (c, mut members) in classes.into_iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::Data(format!(
                "class {c} has {} members, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.shuffle(&mut rng);
    Ok(dataset.subset(&chosen))
}

/// Unlabeled i.i.d. uniform-noise images.
pub fn uniform_noise(n: usize, chw: [usize; 3], seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * chw.iter().product::<usize>())
        .map(|_| rng.random::<u8>())
        .collect();
    Dataset::from_levels(pixels, chw, None, 0).expect("whole images")
}

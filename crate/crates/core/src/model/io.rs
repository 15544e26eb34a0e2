//! `DFKD` weight files: magic, u16 version, u32 tensor count, then per
//! tensor a u16 name length, UTF-8 name, u8 rank, u32 extents and raw
//! little-endian f32 data. Integers are little-endian.
//!
//! Besides parameters and `<layer>.running_mean` / `<layer>.running_var`,
//! files carry `meta.input_chw` and, when set, `input_norm.mean` /
//! `input_norm.std`, so a model can be rebuilt from the file alone.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ArchSpec, Model};
use crate::datasets::Normalization;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"DFKD";
const VERSION: u16 = 1;

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn entries<E: Element>(model: &Model<E>) -> Vec<Entry> {
    let to_entry = |name: String, t: &Tensor<E>| Entry {
        name,
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
    };
    let mut out: Vec<Entry> = model
        .params()
        .iter()
        .map(|p| to_entry(p.name.clone(), &p.value))
        .collect();
    for l in model.bn_layers() {
        out.push(to_entry(
            format!("{}.running_mean", l.name),
            &l.running_mean,
        ));
        out.push(to_entry(format!("{}.running_var", l.name), &l.running_var));
    }
    let chw = model.arch().input_chw;
    out.push(Entry {
        name: "meta.input_chw".into(),
        shape: vec![3],
        data: chw.iter().map(|&v| v as f32).collect(),
    });
    if let Some(n) = model.input_norm() {
        for (name, v) in [("input_norm.mean", &n.mean), ("input_norm.std", &n.std)] {
            out.push(Entry {
                name: name.into(),
                shape: vec![v.len()],
                data: v.iter().map(|&x| x as f32).collect(),
            });
        }
    }
    out
}

pub fn encode<E: Element>(model: &Model<E>) -> Result<Vec<u8>> {
    let list = entries(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for e in list {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize || e.shape.len() > u8::MAX as usize {
            return Err(Error::format(
                e.name.clone(),
                "name or rank exceeds the format limit",
            ));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut pos = 0usize;
    let mut take = |n: usize, entry: &str| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(entry, "file truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a DFKD weight file"));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let count = u32::from_le_bytes(take(4, "count")?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let label = format!("tensor #{i}");
        let len = u16::from_le_bytes(take(2, &label)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len, &label)?)
            .map_err(|_| Error::format(label.clone(), "name is not UTF-8"))?
            .to_string();
        let rank = take(1, &name)?[0] as usize;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(take(4, &name)?.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(name.clone(), "extent overflow"))?;
        let data = take(n, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Entry { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(Error::format("trailer", "unexpected trailing bytes"));
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_weights<E: Element>(model: &Model<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

/// Infers the architecture from tensor names and shapes, then loads.
pub fn decode<E: Element>(bytes: &[u8]) -> Result<Model<E>> {
    let list = decode_entries(bytes)?;
    let by_name: HashMap<&str, &Entry> = list.iter().map(|e| (e.name.as_str(), e)).collect();
    let get = |n: &str| {
        by_name
            .get(n)
            .copied()
            .ok_or_else(|| Error::format(n, "missing tensor"))
    };
    let chw = get("meta.input_chw")?;
    if chw.data.len() != 3 {
        return Err(Error::format("meta.input_chw", "expected three extents"));
    }
    let input_chw = [
        chw.data[0] as usize,
        chw.data[1] as usize,
        chw.data[2] as usize,
    ];
    let mut stages = Vec::new();
    for s in 1.. {
        let mut blocks = 0;
        let mut channels = 0;
        while let Some(e) = by_name.get(format!("stage{s}.block{blocks}.conv1.weight").as_str()) {
            channels = e.shape.first().copied().unwrap_or(0);
            blocks += 1;
        }
        if blocks == 0 {
            break;
        }
        stages.push((blocks, channels));
    }
    let fc = get("fc.weight")?;
    let arch = ArchSpec {
        stages,
        num_classes: fc.shape.first().copied().unwrap_or(0),
        input_chw,
    };
    let mut model =
        Model::build(&arch, 0).map_err(|e| Error::format("architecture", e.to_string()))?;
    fill(&mut model, &list)?;
    Ok(model)
}

fn tensor_from<E: Element>(e: &Entry) -> Tensor<E> {
    Tensor::new(
        e.shape.clone(),
        e.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
    )
    .expect("validated extents")
}

/// Overwrites parameters, running statistics and normalization of an
/// existing model; every tensor must match by name and shape.
fn fill<E: Element>(model: &mut Model<E>, list: &[Entry]) -> Result<()> {
    let by_name: HashMap<&str, &Entry> = list.iter().map(|e| (e.name.as_str(), e)).collect();
    let fetch = |name: &str, expected: &[usize]| -> Result<Tensor<E>> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::format(name, "missing tensor"))?;
        if e.shape != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        Ok(tensor_from(e))
    };
    let names: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    let mut params = Vec::with_capacity(names.len());
    for (n, s) in &names {
        params.push(fetch(n, s)?);
    }
    let mut stats = Vec::new();
    for l in model.bn_layers() {
        let c = [l.running_mean.len()];
        stats.push((
            fetch(&format!("{}.running_mean", l.name), &c)?,
            fetch(&format!("{}.running_var", l.name), &c)?,
        ));
    }
    let norm = match (
        by_name.get("input_norm.mean"),
        by_name.get("input_norm.std"),
    ) {
        (Some(m), Some(s)) => Some(Normalization {
            mean: m.data.iter().map(|&v| v as f64).collect(),
            std: s.data.iter().map(|&v| v as f64).collect(),
        }),
        (None, None) => None,
        _ => {
            return Err(Error::format(
                "input_norm",
                "mean and std must both be present",
            ))
        }
    };
    let expected = names.len() + 2 * stats.len() + 1 + if norm.is_some() { 2 } else { 0 };
    if list.len() != expected {
        let known: Vec<String> = names
            .iter()
            .map(|(n, _)| n.clone())
            .chain(model.bn_layers().iter().flat_map(|l| {
                [
                    format!("{}.running_mean", l.name),
                    format!("{}.running_var", l.name),
                ]
            }))
            .collect();
        let extra = list
            .iter()
            .find(|e| {
                !known.contains(&e.name)
                    && !e.name.starts_with("meta.")
                    && !e.name.starts_with("input_norm.")
            })
            .map_or("tensor list".to_string(), |e| e.name.clone());
        return Err(Error::format(
            extra,
            "tensor not present in the target architecture",
        ));
    }
    model
        .set_input_norm(norm)
        .map_err(|e| Error::format("input_norm", e.to_string()))?;
    for (dst, src) in model.params_mut().into_iter().zip(params) {
        *dst = src;
    }
    for (l, (m, v)) in model.bn_layers_mut().iter_mut().zip(stats) {
        l.running_mean = m;
        l.running_var = v;
    }
    Ok(())
}

pub fn load_weights<E: Element>(path: impl AsRef<Path>) -> Result<Model<E>> {
    decode(&read_file(path.as_ref())?)
}

impl<E: Element> Model<E> {
    /// Loads a weight file into this architecture.
    pub fn load_weights_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let list = decode_entries(&read_file(path.as_ref())?)?;
        let mut staged = self.clone();
        fill(&mut staged, &list)?;
        *self = staged;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchSpec {
        ArchSpec {
            stages: vec![(1, 4), (2, 8)],
            num_classes: 3,
            input_chw: [3, 8, 8],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut m = Model::<f32>::build(&arch(), 3).unwrap();
        m.bn_layers_mut()[1].running_mean.data_mut()[0] = 0.123;
        m.set_input_norm(Some(Normalization {
            mean: vec![0.4, 0.5, 0.6],
            std: vec![0.2, 0.21, 0.22],
        }))
        .unwrap();
        let bytes = encode(&m).unwrap();
        let back: Model<f32> = decode(&bytes).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert!(back.same_state(&m));
        assert_eq!(back.input_norm(), m.input_norm());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let m = Model::<f32>::build(&arch(), 3).unwrap();
        let bytes = encode(&m).unwrap();
        for cut in [3, 9, 40, bytes.len() - 1] {
            assert!(matches!(
                decode::<f32>(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(
            matches!(decode::<f32>(&bad), Err(Error::Format { entry, .. }) if entry == "magic")
        );
    }

    #[test]
    fn mismatched_architecture_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&Model::<f32>::build(&arch(), 0).unwrap(), &path).unwrap();
        let mut other_arch = arch();
        other_arch.stages[0].1 = 6;
        let mut other = Model::<f32>::build(&other_arch, 0).unwrap();
        let err = other.load_weights_into(&path).unwrap_err();
        assert!(
            matches!(err, Error::ShapeMismatch { ref name, .. } if name == "stem.conv.weight"),
            "{err}"
        );
    }
}

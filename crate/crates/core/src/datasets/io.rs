//! `DFDS` dataset files: magic, u16 version, u32 N, u8 C, u16 H, u16 W,
//! u16 K (`0xFFFF` when unlabeled), N raw u8 CHW images, then N u16 labels
//! when labeled. All integers little-endian.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DFDS";
const VERSION: u16 = 1;
const UNLABELED: u16 = 0xFFFF;

pub fn encode(d: &Dataset) -> Result<Vec<u8>> {
    let [c, h, w] = d.chw();
    let narrow = |what: &str, v: usize, max: usize| {
        if v > max {
            Err(Error::format(
                what,
                format!("{v} exceeds the format limit {max}"),
            ))
        } else {
            Ok(v)
        }
    };
    narrow("channels", c, u8::MAX as usize)?;
    narrow("height", h, u16::MAX as usize)?;
    narrow("width", w, u16::MAX as usize)?;
    narrow("count", d.len(), u32::MAX as usize)?;
    narrow("classes", d.num_classes(), UNLABELED as usize - 1)?;
    let mut out = Vec::with_capacity(17 + d.levels().len() + 2 * d.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d.len() as u32).to_le_bytes());
    out.push(c as u8);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    let k = if d.labels().is_some() {
        d.num_classes() as u16
    } else {
        UNLABELED
    };
    out.extend_from_slice(&k.to_le_bytes());
    out.extend_from_slice(d.levels());
    for &l in d.labels().unwrap_or(&[]) {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(entry, "file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, entry: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, entry)?.try_into().unwrap()))
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a DFDS dataset file"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let n = r.u32("count")? as usize;
    let c = r.take(1, "channels")?[0] as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let k = r.u16("classes")?;
    let pixels = r.take(n * c * h * w, "images")?.to_vec();
    let (labels, classes) = if k == UNLABELED {
        (None, 0)
    } else {
        let labels = (0..n)
            .map(|_| r.u16("labels").map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        (Some(labels), k as usize)
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        ));
    }
    Dataset::from_levels(pixels, [c, h, w], labels, classes)
        .map_err(|e| Error::format("labels", e.to_string()))
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(d)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_labeled_and_unlabeled() {
        let d = Dataset::from_levels(
            (0..24).map(|v| v as u8).collect(),
            [2, 2, 3],
            Some(vec![1, 0]),
            2,
        )
        .unwrap();
        assert_eq!(decode(&encode(&d).unwrap()).unwrap(), d);
        let u = Dataset::from_levels(vec![9; 12], [1, 3, 4], None, 0).unwrap();
        let bytes = encode(&u).unwrap();
        assert_eq!(&bytes[15..17], &[0xFF, 0xFF]);
        assert_eq!(decode(&bytes).unwrap(), u);
    }

    #[test]
    fn corrupt_headers_rejected() {
        let d = Dataset::from_levels(vec![1; 4], [1, 2, 2], Some(vec![0]), 1).unwrap();
        let good = encode(&d).unwrap();
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format { entry, .. }) if entry == "version"));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(Error::Format { .. })
        ));
    }
}

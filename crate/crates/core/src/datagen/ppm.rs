use std::fs;
use std::io::Write;
use std::path::Path;

use crate::datasets::Dataset;
use crate::error::{Error, Result};

/// Binary 8-bit PPM of image `index` (gray images are replicated to RGB).
pub fn write_ppm(dataset: &Dataset, index: usize, path: &Path) -> Result<()> {
    let [c, h, w] = dataset.chw();
    if c != 1 && c != 3 {
        return Err(Error::config(format!("PPM needs 1 or 3 channels, got {c}")));
    }
    if index >= dataset.len() {
        return Err(Error::config(format!(
            "image {index} outside dataset of {}",
            dataset.len()
        )));
    }
    let px = dataset.image_levels(index);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..plane {
        for k in 0..3 {
            out.push(px[if c == 1 { i } else { k * plane + i }]);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes the first `limit` images as `sample_XXXX.ppm` into `dir`.
pub fn dump_ppm(dataset: &Dataset, dir: &Path, limit: usize) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = limit.min(dataset.len());
    for i in 0..n {
        write_ppm(dataset, i, &dir.join(format!("sample_{i:04}.ppm")))?;
    }
    Ok(n)
}

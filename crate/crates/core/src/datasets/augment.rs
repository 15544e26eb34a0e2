use rand::Rng;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Random crop from a zero-padded image (offset in `[-pad, pad]` per axis)
/// and a horizontal flip with probability 0.5 when `flip` is set. With
/// `pad = 0` and no flip the batch is returned unchanged.
pub fn standard_augment<E: Element, R: Rng + ?Sized>(
    batch: &Tensor<E>,
    pad: usize,
    flip: bool,
    rng: &mut R,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = batch.dims4()?;
    if pad == 0 && !flip {
        return Ok(batch.clone());
    }
    let p = pad as i64;
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let dy = rng.random_range(-p..=p);
        let dx = rng.random_range(-p..=p);
        let mirror = flip && rng.random_bool(0.5);
        let src = batch.row(b);
        let dst = out.row_mut(b);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as i64 + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let xx = if mirror { w - 1 - x } else { x };
                    let sx = xx as i64 + dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn disabled_is_identity_and_enabled_keeps_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::rand_uniform([4, 3, 8, 8], 0.0, 1.0, &mut rng);
        assert_eq!(standard_augment(&x, 0, false, &mut rng).unwrap(), x);
        let y = standard_augment(&x, 4, true, &mut rng).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn flip_only_mirrors() {
        let x = Tensor::<f32>::from_fn([1, 1, 1, 4], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outs: Vec<Tensor<f32>> = (0..16)
            .map(|_| standard_augment(&x, 0, true, &mut rng).unwrap())
            .collect();
        assert!(outs.iter().any(|o| o.data() == [3.0, 2.0, 1.0, 0.0]));
        assert!(outs
            .iter()
            .all(|o| o.data() == [3.0, 2.0, 1.0, 0.0] || o == &x));
    }
}

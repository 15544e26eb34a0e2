//! Convolution (im2col + gemm), fully connected layers, and the depthwise
//! Gaussian smoothing used by the image prior.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Upper bound on im2col buffer size, in elements, per gemm call.
const COLS_BUDGET: usize = 1 << 21;

pub fn conv2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.col_rows() * self.spatial()).max(1)).clamp(1, self.n)
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + k − pad` is
/// inside `[0, w)`.
fn valid_range(out: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if w + pad > k {
        ((w + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Writes the patches of sample `img` into columns `[col0, col0 + oh·ow)` of
/// `cols`, a row-major `(c·kh·kw) × ncols` matrix.
fn im2col<E: Element>(img: &[E], g: &ConvGeom, cols: &mut [E], ncols: usize, col0: usize) {
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let (lo, hi) = valid_range(g.ow, g.w, kj, g.stride, g.pad);
            for c in 0..g.c {
                let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols + col0..row * ncols + col0 + g.spatial()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(E::zero());
                    out_row[hi..].fill(E::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in out_row[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image gradient.
fn col2im<E: Element>(cols: &[E], g: &ConvGeom, ncols: usize, col0: usize, img: &mut [E]) {
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let (lo, hi) = valid_range(g.ow, g.w, kj, g.stride, g.pad);
            if lo >= hi {
                continue;
            }
            for c in 0..g.c {
                let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols + col0..row * ncols + col0 + g.spatial()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    let vals = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(vals) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(vals) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<E: Element>(
    x: &Tensor<E>,
    wt: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    g: &ConvGeom,
) -> Tensor<E> {
    let mut out = Tensor::zeros([g.n, g.o, g.oh, g.ow]);
    let (rows, sp) = (g.col_rows(), g.spatial());
    let chunk = g.chunk();
    let img_len = g.c * g.h * g.w;
    E::with_scratch(rows * chunk * sp, |cols| {
        E::with_scratch(g.o * chunk * sp, |tmp| {
            for start in (0..g.n).step_by(chunk) {
                let nb = chunk.min(g.n - start);
                let ncols = nb * sp;
                for i in 0..nb {
                    let img = &x.data()[(start + i) * img_len..(start + i + 1) * img_len];
                    im2col(img, g, cols, ncols, i * sp);
                }
                E::gemm(
                    g.o,
                    rows,
                    ncols,
                    wt.data(),
                    (rows as isize, 1),
                    cols,
                    (ncols as isize, 1),
                    tmp,
                    (ncols as isize, 1),
                    false,
                );
                let od = out.data_mut();
                for i in 0..nb {
                    for o in 0..g.o {
                        let dst =
                            &mut od[((start + i) * g.o + o) * sp..((start + i) * g.o + o + 1) * sp];
                        dst.copy_from_slice(&tmp[o * ncols + i * sp..o * ncols + (i + 1) * sp]);
                        if let Some(b) = bias {
                            let bv = b.data()[o];
                            dst.iter_mut().for_each(|v| *v += bv);
                        }
                    }
                }
            }
        })
    });
    out
}

fn conv_backward<E: Element>(
    x: &Tensor<E>,
    wt: &Tensor<E>,
    dout: &Tensor<E>,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let (rows, sp) = (g.col_rows(), g.spatial());
    let chunk = g.chunk();
    let img_len = g.c * g.h * g.w;
    let mut dx = need_x.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need_w.then(|| Tensor::zeros(wt.shape().to_vec()));
    E::with_scratch(rows * chunk * sp, |cols| {
        E::with_scratch(g.o * chunk * sp, |dtmp| {
            for start in (0..g.n).step_by(chunk) {
                let nb = chunk.min(g.n - start);
                let ncols = nb * sp;
                for i in 0..nb {
                    for o in 0..g.o {
                        let src = &dout.data()
                            [((start + i) * g.o + o) * sp..((start + i) * g.o + o + 1) * sp];
                        dtmp[o * ncols + i * sp..o * ncols + (i + 1) * sp].copy_from_slice(src);
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for i in 0..nb {
                        let img = &x.data()[(start + i) * img_len..(start + i + 1) * img_len];
                        im2col(img, g, cols, ncols, i * sp);
                    }
                    // dW += dout · colsᵀ
                    E::gemm(
                        g.o,
                        ncols,
                        rows,
                        dtmp,
                        (ncols as isize, 1),
                        cols,
                        (1, ncols as isize),
                        dw.data_mut(),
                        (rows as isize, 1),
                        true,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols = Wᵀ · dout
                    E::gemm(
                        rows,
                        g.o,
                        ncols,
                        wt.data(),
                        (1, rows as isize),
                        dtmp,
                        (ncols as isize, 1),
                        cols,
                        (ncols as isize, 1),
                        false,
                    );
                    for i in 0..nb {
                        let img =
                            &mut dx.data_mut()[(start + i) * img_len..(start + i + 1) * img_len];
                        col2im(cols, g, ncols, i * sp, img);
                    }
                }
            }
        })
    });
    (dx, dw)
}

impl<'g, E: Element> Var<'g, E> {
    /// 2-D cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(
        self,
        weight: Var<'g, E>,
        bias: Option<Var<'g, E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, E>> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4()?;
        let (o, ci, kh, kw) = wt.dims4()?;
        if ci != c {
            return Err(Error::ShapeMismatch {
                name: "conv2d weight".into(),
                expected: vec![o, c, kh, kw],
                found: wt.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let (Some(oh), Some(ow)) = (
            conv2d_output_size(h, kh, stride, padding),
            conv2d_output_size(w, kw, stride, padding),
        ) else {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        };
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            if b.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    name: "conv2d bias".into(),
                    expected: vec![o],
                    found: b.shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad: padding,
        };
        let out = conv_forward(&x, &wt, b.as_deref(), &geom);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.graph.record(out, &parents, move |dout, needs| {
            let (dx, dw) = conv_backward(&x, &wt, dout, &geom, needs[0], needs[1]);
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let sp = geom.spatial();
                    Tensor::from_fn([geom.o], |o| {
                        (0..geom.n)
                            .map(|i| {
                                dout.data()[(i * geom.o + o) * sp..(i * geom.o + o + 1) * sp]
                                    .iter()
                                    .copied()
                                    .sum::<E>()
                            })
                            .sum()
                    })
                }));
            }
            grads
        }))
    }

    /// Affine map `x · Wᵀ + b` for `x: N×F`, `W: K×F`, `b: K`.
    pub fn linear(self, weight: Var<'g, E>, bias: Option<Var<'g, E>>) -> Result<Var<'g, E>> {
        let x = self.value();
        let wt = weight.value();
        let (n, f) = x.dims2()?;
        let (k, fw) = wt.dims2()?;
        if f != fw {
            return Err(Error::ShapeMismatch {
                name: "linear weight".into(),
                expected: vec![k, f],
                found: wt.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros([n, k]);
        E::gemm(
            n,
            f,
            k,
            x.data(),
            (f as isize, 1),
            wt.data(),
            (1, f as isize),
            out.data_mut(),
            (k as isize, 1),
            false,
        );
        if let Some(b) = bias {
            let b = b.value();
            if b.shape() != [k] {
                return Err(Error::ShapeMismatch {
                    name: "linear bias".into(),
                    expected: vec![k],
                    found: b.shape().to_vec(),
                });
            }
            for i in 0..n {
                for (v, &bv) in out.row_mut(i).iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.graph.record(out, &parents, move |dout, needs| {
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros([n, f]);
                E::gemm(
                    n,
                    k,
                    f,
                    dout.data(),
                    (k as isize, 1),
                    wt.data(),
                    (f as isize, 1),
                    dx.data_mut(),
                    (f as isize, 1),
                    false,
                );
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = Tensor::zeros([k, f]);
                E::gemm(
                    k,
                    n,
                    f,
                    dout.data(),
                    (1, k as isize),
                    x.data(),
                    (f as isize, 1),
                    dw.data_mut(),
                    (f as isize, 1),
                    false,
                );
                dw
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    Tensor::from_fn([k], |j| (0..n).map(|i| dout.data()[i * k + j]).sum())
                }));
            }
            grads
        }))
    }

    /// Depthwise convolution with a normalized `size × size` Gaussian,
    /// reflection-padded so the output keeps the input's spatial size.
    pub fn gaussian_smooth(self, size: usize, sigma: f64) -> Result<Var<'g, E>> {
        let kernel: Arc<Vec<E>> = Arc::new(
            gaussian_kernel(size, sigma)?
                .into_iter()
                .map(E::from_f64)
                .collect(),
        );
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let r = size / 2;
        if r >= h || r >= w {
            return Err(Error::config(format!(
                "smoothing kernel {size} too large for {h}x{w} reflection padding"
            )));
        }
        let rows = reflect_table(h, r);
        let cols = reflect_table(w, r);
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape().to_vec());
        {
            let od = out.data_mut();
            for p in 0..n * c {
                let src = &x.data()[p * plane..(p + 1) * plane];
                let dst = &mut od[p * plane..(p + 1) * plane];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = E::zero();
                        for ki in 0..size {
                            let sy = rows[y + ki];
                            for kj in 0..size {
                                acc += kernel[ki * size + kj] * src[sy * w + cols[xx + kj]];
                            }
                        }
                        dst[y * w + xx] = acc;
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |dout, _| {
            let mut dx = Tensor::zeros(shape.clone());
            let dd = dx.data_mut();
            for p in 0..n * c {
                let g = &dout.data()[p * plane..(p + 1) * plane];
                let dst = &mut dd[p * plane..(p + 1) * plane];
                for y in 0..h {
                    for xx in 0..w {
                        let gv = g[y * w + xx];
                        for ki in 0..size {
                            let sy = rows[y + ki];
                            for kj in 0..size {
                                dst[sy * w + cols[xx + kj]] += kernel[ki * size + kj] * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}

/// Source index for each padded coordinate `0..len + 2r` under reflection
/// (edge pixel not repeated).
fn reflect_table(len: usize, r: usize) -> Vec<usize> {
    (0..len + 2 * r)
        .map(|i| {
            let p = i as isize - r as isize;
            let last = len as isize - 1;
            let q = if p < 0 {
                -p
            } else if p > last {
                2 * last - p
            } else {
                p
            };
            q as usize
        })
        .collect()
}

/// Row-major `size × size` Gaussian stencil normalized to sum to one.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::config(format!(
            "smoothing kernel size must be odd, got {size}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!(
            "smoothing sigma must be positive, got {sigma}"
        )));
    }
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 - r;
            let dx = (i % size) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    Ok(k)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Graph;

    /// Direct six-loop cross-correlation.
    fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.data()
                                            [((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_center_is_nine() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = x.conv2d(w, None, 1, 1).unwrap();
        assert_eq!(y.value().data()[4], 9.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::<f32>::new();
        let xv = Tensor::randn([2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        assert_eq!(*x.conv2d(w, None, 1, 0).unwrap().value(), xv);
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv = Tensor::<f64>::randn([1, 2, 5, 5], 0.0, 1.0, &mut rng);
        let wv = Tensor::<f64>::randn([3, 2, 3, 3], 0.0, 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let g = Graph::<f64>::new();
            let y = g
                .constant(xv.clone())
                .conv2d(g.constant(wv.clone()), None, stride, pad)
                .unwrap();
            let r = reference_conv(&xv, &wv, stride, pad);
            assert!(
                y.value().max_abs_diff(&r) < 1e-6,
                "stride {stride} pad {pad}"
            );
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([1, 2, 3, 3]));
        let w = g.constant(Tensor::ones([1, 3, 3, 3]));
        assert!(matches!(
            x.conv2d(w, None, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn linear_identity_and_bias() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn([2, 3], |i| i as f32));
        let eye = g.constant(Tensor::from_fn(
            [3, 3],
            |i| if i % 4 == 0 { 1.0 } else { 0.0 },
        ));
        assert_eq!(
            x.linear(eye, None).unwrap().value().data(),
            x.value().data()
        );
        let zero = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::new([2], vec![5.0, -1.0]).unwrap());
        assert_eq!(
            x.linear(zero, Some(b)).unwrap().value().data(),
            &[5.0, -1.0, 5.0, -1.0]
        );
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::<f64>::randn([4, 8], 0.0, 1.0, &mut rng);
        let wv = Tensor::<f64>::randn([10, 8], 0.0, 1.0, &mut rng);
        let g = Graph::<f64>::new();
        let y = g
            .constant(xv.clone())
            .linear(g.constant(wv.clone()), None)
            .unwrap();
        let reference = Tensor::from_fn([4, 10], |idx| {
            let (i, j) = (idx / 10, idx % 10);
            (0..8)
                .map(|f| xv.data()[i * 8 + f] * wv.data()[j * 8 + f])
                .sum()
        });
        assert!(y.value().max_abs_diff(&reference) < 1e-6);
    }

    #[test]
    fn smoothing_constant_image_unchanged() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 3, 8, 8], 0.37));
        let y = x.gaussian_smooth(5, 1.0).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn smoothing_impulse_reproduces_stencil() {
        let g = Graph::<f64>::new();
        let mut img = Tensor::zeros([1, 1, 5, 5]);
        img.data_mut()[12] = 1.0;
        let y = g.constant(img).gaussian_smooth(3, 1.0).unwrap();
        // Direct evaluation of the normalized stencil.
        let raw: Vec<f64> = (0..9)
            .map(|i| {
                let (dy, dx) = ((i / 3) as f64 - 1.0, (i % 3) as f64 - 1.0);
                (-(dx * dx + dy * dy) / 2.0).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        let out = y.value();
        for i in 0..3 {
            for j in 0..3 {
                let v = out.data()[(i + 1) * 5 + j + 1];
                assert!((v - raw[i * 3 + j] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(5, 0.0).is_err());
        let k = gaussian_kernel(5, 1.0).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

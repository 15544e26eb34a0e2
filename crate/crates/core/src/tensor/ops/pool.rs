use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

impl<'g, E: Element> Var<'g, E> {
    /// Average pooling over `kernel × kernel` windows, no padding.
    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'g, E>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::config(format!(
                "avg_pool2d kernel {kernel} stride {stride} invalid for {h}x{w}"
            )));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let area = E::from_usize(kernel * kernel);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = E::zero();
                    for i in 0..kernel {
                        for j in 0..kernel {
                            acc += src[(y * stride + i) * w + xx * stride + j];
                        }
                    }
                    out.data_mut()[(p * oh + y) * ow + xx] = acc / area;
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(shape.clone());
            for p in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = g.data()[(p * oh + y) * ow + xx] / area;
                        for i in 0..kernel {
                            for j in 0..kernel {
                                dx.data_mut()
                                    [p * h * w + (y * stride + i) * w + xx * stride + j] += v;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over spatial axes: `N×C×H×W → N×C`.
    pub fn global_avg_pool(self) -> Result<Var<'g, E>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let sp = h * w;
        let m = E::from_usize(sp);
        let out = Tensor::from_fn([n, c], |p| {
            x.data()[p * sp..(p + 1) * sp].iter().copied().sum::<E>() / m
        });
        let shape = x.shape().to_vec();
        Ok(self.graph.record(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(shape.clone());
            for p in 0..n * c {
                dx.data_mut()[p * sp..(p + 1) * sp].fill(g.data()[p] / m);
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn avg_pool_constant_map() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1, 2, 4, 4], 1.5));
        let y = x.avg_pool2d(2, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn global_pool_of_one_to_sixteen() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 4, 4], |i| (i + 1) as f64));
        let y = x.global_avg_pool().unwrap();
        let oracle: f64 = (1..=16).map(|v| v as f64).sum::<f64>() / 16.0;
        assert_eq!(y.value().data(), &[oracle]);
        assert_eq!(oracle, 8.5);
    }
}

use ndarray::{Array2, Array3, ArrayView2};

use super::params::Slot;
use crate::attention::FeatureMap;

/// Square-kernel 2D convolution with bias and `k/2` zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Slot,
    pub bias: Slot,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (len + 2 * pad - kernel) / stride + 1
}

impl Conv2d {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_len(h, self.kernel, self.stride),
            conv_out_len(w, self.kernel, self.stride),
        )
    }

    fn weight_view<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out_channels, self.fan_in()), self.weight.of(params)).unwrap()
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let s = self.stride as isize;
        let src = x.as_slice().expect("standard layout");
        let p = oh * ow;
        let mut cols = Array2::zeros((c * k * k, p));
        let dst = cols.as_slice_mut().unwrap();
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut dst[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, in_dim: (usize, usize, usize), oh: usize, ow: usize) -> FeatureMap {
        let (c, h, w) = in_dim;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let s = self.stride as isize;
        let p = oh * ow;
        let src = dcols.as_slice().unwrap();
        let mut out = Array3::zeros(in_dim);
        let dst = out.as_slice_mut().unwrap();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ci * h * w + iy as usize * w;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += src[row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, ConvCache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x, oh, ow);
        let mut y = self.weight_view(params).dot(&cols);
        for (mut row, b) in y.rows_mut().into_iter().zip(self.bias.of(params)) {
            row += *b;
        }
        let y = y.into_shape_with_order((self.out_channels, oh, ow)).unwrap();
        (
            y,
            ConvCache {
                cols,
                in_dim: x.dim(),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates weight/bias gradients; returns dL/dx when `need_input`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dout: &FeatureMap,
        grads: &mut [f64],
        need_input: bool,
    ) -> Option<FeatureMap> {
        let (oh, ow) = cache.out_hw;
        let d = ArrayView2::from_shape((self.out_channels, oh * ow), dout.as_slice().unwrap()).unwrap();
        let dw = d.dot(&cache.cols.t());
        for (g, v) in self.weight.of_mut(grads).iter_mut().zip(dw.iter()) {
            *g += v;
        }
        for (g, row) in self.bias.of_mut(grads).iter_mut().zip(d.rows()) {
            *g += row.sum();
        }
        need_input.then(|| {
            let dcols = self.weight_view(params).t().dot(&d);
            self.col2im(&dcols, cache.in_dim, oh, ow)
        })
    }
}

//! 2D convolution via patch-matrix (im2col) + matrix multiply.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix1, Ix2};
use rayon::prelude::*;

use super::init::Init;
use super::param::{Param, Params};
use crate::rng::{self};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Weight matrix `[c_out, c_in * k * k]`.
    pub w: Param,
    /// Bias `[c_out]`.
    pub b: Param,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    x: Array4<f32>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let std = init.std(fan_in);
        let mut w = Array2::<f32>::zeros((c_out, fan_in));
        for v in w.iter_mut() {
            *v = rng::truncated_normal(rng, std);
        }
        Self {
            w: Param::new(format!("{name}.w"), w.into_dyn()),
            b: Param::new(format!("{name}.b"), Array1::<f32>::zeros(c_out).into_dyn()),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let wmat = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let bias = self.b.value.view().into_dimensionality::<Ix1>().unwrap();

        let per_image: Vec<Array2<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = im2col(&x.index_axis(Axis(0), i), self.k, self.stride, self.pad, oh, ow);
                let mut y = wmat.dot(&cols);
                for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row.mapv_inplace(|v| v + b);
                }
                y
            })
            .collect();

        let mut out = Array4::<f32>::zeros((n, self.c_out, oh, ow));
        for (i, y) in per_image.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(y.as_slice().unwrap());
        }
        (out, ConvCache { x: x.clone() })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, gy: &Array4<f32>) -> Array4<f32> {
        let x = &cache.x;
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(gy.dim(), (n, self.c_out, oh, ow), "conv grad shape");
        let wmat = self.w.value.view().into_dimensionality::<Ix2>().unwrap();

        let parts: Vec<(Array2<f32>, Array1<f32>, Array3<f32>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let gy_i = gy.index_axis(Axis(0), i);
                let gy_mat = gy_i
                    .to_shape(((self.c_out, oh * ow), ndarray::Order::RowMajor))
                    .unwrap();
                let cols =
                    im2col(&x.index_axis(Axis(0), i), self.k, self.stride, self.pad, oh, ow);
                let dw = gy_mat.dot(&cols.t());
                let db = gy_mat.sum_axis(Axis(1));
                let dcols = wmat.t().dot(&gy_mat);
                let dx = col2im(
                    &dcols,
                    (self.c_in, h, w),
                    self.k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                );
                (dw, db, dx)
            })
            .collect();

        let mut dx = Array4::<f32>::zeros(x.raw_dim());
        let mut gw = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        let mut gb = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        for (i, (dw, db, dxi)) in parts.into_iter().enumerate() {
            gw += &dw;
            gb += &db;
            dx.index_axis_mut(Axis(0), i).assign(&dxi);
        }
        dx
    }
}

impl Params for Conv2d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Unfold `[C, H, W]` into patch columns `[C*K*K, OH*OW]` (zero padding).
fn im2col(
    x: &ArrayView3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().expect("standard copy")
        }
    };
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row_base = r * oh * ow;
                let (ox_lo, ox_end) = valid_ox_range(kx, pad, stride, w, ow);
                if ox_lo >= ox_end {
                    continue;
                }
                let count = ox_end - ox_lo;
                let ix_start = ox_lo * stride + kx - pad;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w + ix_start;
                    let dst_base = row_base + oy * ow + ox_lo;
                    if stride == 1 {
                        cs[dst_base..dst_base + count]
                            .copy_from_slice(&xs[src_base..src_base + count]);
                    } else {
                        for t in 0..count {
                            cs[dst_base + t] = xs[src_base + t * stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-column gradients back onto the input (transpose of `im2col`).
fn col2im(
    dcols: &Array2<f32>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f32> {
    let mut dx = Array3::<f32>::zeros((c, h, w));
    let ds = dcols.as_slice().expect("contiguous grads");
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row_base = r * oh * ow;
                let (ox_lo, ox_end) = valid_ox_range(kx, pad, stride, w, ow);
                if ox_lo >= ox_end {
                    continue;
                }
                let count = ox_end - ox_lo;
                let ix_start = ox_lo * stride + kx - pad;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w + ix_start;
                    let src_base = row_base + oy * ow + ox_lo;
                    for t in 0..count {
                        xs[dst_base + t * stride] += ds[src_base + t];
                    }
                }
            }
        }
    }
    dx
}

fn valid_ox_range(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > kx {
        (pad - kx).div_ceil(stride)
    } else {
        0
    };
    let hi_num = w as isize - 1 + pad as isize - kx as isize;
    if hi_num < 0 {
        return (lo, 0);
    }
    let hi = (hi_num as usize) / stride + 1;
    (lo, hi.min(ow))
}

//! 2x2 max pooling and nearest-neighbour 2x upsampling.

use ndarray::Array4;

#[derive(Debug)]
pub struct PoolCache {
    /// Flat input index of the winning element per output cell.
    argmax: Vec<u32>,
    in_shape: (usize, usize, usize, usize),
}

pub fn max_pool2(x: &Array4<f32>) -> (Array4<f32>, PoolCache) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xs = x.as_slice().unwrap();
    {
        let ys = y.as_slice_mut().unwrap();
        let mut oi = 0usize;
        for i in 0..n {
            for ci in 0..c {
                let base = (i * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i00 = base + (2 * oy) * w + 2 * ox;
                        let i01 = i00 + 1;
                        let i10 = i00 + w;
                        let i11 = i10 + 1;
                        let mut best = i00;
                        if xs[i01] > xs[best] {
                            best = i01;
                        }
                        if xs[i10] > xs[best] {
                            best = i10;
                        }
                        if xs[i11] > xs[best] {
                            best = i11;
                        }
                        ys[oi] = xs[best];
                        argmax[oi] = best as u32;
                        oi += 1;
                    }
                }
            }
        }
    }
    (
        y,
        PoolCache {
            argmax,
            in_shape: (n, c, h, w),
        },
    )
}

pub fn max_pool2_backward(cache: &PoolCache, gy: &Array4<f32>) -> Array4<f32> {
    let mut gx = Array4::<f32>::zeros(cache.in_shape);
    let gxs = gx.as_slice_mut().unwrap();
    for (gi, &src) in gy.as_slice().unwrap().iter().zip(cache.argmax.iter()) {
        gxs[src as usize] += gi;
    }
    gx
}

/// Nearest-neighbour upsampling by 2 in both spatial dimensions.
pub fn upsample2(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    for i in 0..n {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[[i, ci, yy, xx]];
                    y[[i, ci, 2 * yy, 2 * xx]] = v;
                    y[[i, ci, 2 * yy, 2 * xx + 1]] = v;
                    y[[i, ci, 2 * yy + 1, 2 * xx]] = v;
                    y[[i, ci, 2 * yy + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    y
}

/// Backward of `upsample2`: sums gradients over each 2x2 block.
pub fn upsample2_backward(gy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    gx[[i, ci, yy, xx]] = gy[[i, ci, 2 * yy, 2 * xx]]
                        + gy[[i, ci, 2 * yy, 2 * xx + 1]]
                        + gy[[i, ci, 2 * yy + 1, 2 * xx]]
                        + gy[[i, ci, 2 * yy + 1, 2 * xx + 1]];
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = array![[[[1.0f32, 2.0], [3.0, 0.0]]]];
        let (y, cache) = max_pool2(&x);
        assert_eq!(y[[0, 0, 0, 0]], 3.0);
        let gy = array![[[[5.0f32]]]];
        let gx = max_pool2_backward(&cache, &gy);
        assert_eq!(gx[[0, 0, 1, 0]], 5.0);
        assert_eq!(gx.sum(), 5.0);
    }

    #[test]
    fn upsample_round_trip_gradient() {
        let x = array![[[[1.0f32, 2.0], [3.0, 4.0]]]];
        let y = upsample2(&x);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        assert_eq!(y[[0, 0, 3, 3]], 4.0);
        let gx = upsample2_backward(&y);
        assert_eq!(gx[[0, 0, 0, 0]], 4.0);
        assert_eq!(gx[[0, 0, 1, 1]], 16.0);
    }
}

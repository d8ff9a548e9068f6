//! Activations and the channel-axis softmax, with explicit backward passes.

use ndarray::{Array4, Axis};

#[derive(Debug)]
pub struct ActCache {
    x: Array4<f32>,
}

pub fn relu(x: &Array4<f32>) -> (Array4<f32>, ActCache) {
    (x.mapv(|v| v.max(0.0)), ActCache { x: x.clone() })
}

pub fn relu_backward(cache: &ActCache, gy: &Array4<f32>) -> Array4<f32> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx)
        .and(&cache.x)
        .for_each(|g, &x| {
            if x <= 0.0 {
                *g = 0.0
            }
        });
    gx
}

pub fn leaky_relu(x: &Array4<f32>, alpha: f32) -> (Array4<f32>, ActCache) {
    (
        x.mapv(|v| if v > 0.0 { v } else { alpha * v }),
        ActCache { x: x.clone() },
    )
}

pub fn leaky_relu_backward(cache: &ActCache, gy: &Array4<f32>, alpha: f32) -> Array4<f32> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx)
        .and(&cache.x)
        .for_each(|g, &x| {
            if x <= 0.0 {
                *g *= alpha
            }
        });
    gx
}

#[derive(Debug)]
pub struct TanhCache {
    y: Array4<f32>,
}

pub fn tanh(x: &Array4<f32>) -> (Array4<f32>, TanhCache) {
    let y = x.mapv(f32::tanh);
    (y.clone(), TanhCache { y })
}

pub fn tanh_backward(cache: &TanhCache, gy: &Array4<f32>) -> Array4<f32> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx)
        .and(&cache.y)
        .for_each(|g, &y| *g *= 1.0 - y * y);
    gx
}

#[derive(Debug)]
pub struct SoftmaxCache {
    y: Array4<f32>,
}

/// Per-pixel softmax across the channel axis of `[N, C, H, W]`.
pub fn channel_softmax(x: &Array4<f32>) -> (Array4<f32>, SoftmaxCache) {
    let (n, c, h, w) = x.dim();
    let mut y = x.clone();
    for i in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let mut max = f32::NEG_INFINITY;
                for ci in 0..c {
                    max = max.max(y[[i, ci, yy, xx]]);
                }
                let mut sum = 0.0;
                for ci in 0..c {
                    let e = (y[[i, ci, yy, xx]] - max).exp();
                    y[[i, ci, yy, xx]] = e;
                    sum += e;
                }
                for ci in 0..c {
                    y[[i, ci, yy, xx]] /= sum;
                }
            }
        }
    }
    (y.clone(), SoftmaxCache { y })
}

pub fn channel_softmax_backward(cache: &SoftmaxCache, gy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = gy.dim();
    let y = &cache.y;
    let mut gx = Array4::<f32>::zeros(gy.raw_dim());
    for i in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += gy[[i, ci, yy, xx]] * y[[i, ci, yy, xx]];
                }
                for ci in 0..c {
                    gx[[i, ci, yy, xx]] = y[[i, ci, yy, xx]] * (gy[[i, ci, yy, xx]] - dot);
                }
            }
        }
    }
    gx
}

/// Sum over everything but the channel axis; used by bias-like reductions.
pub fn sum_per_channel(x: &Array4<f32>) -> Vec<f32> {
    (0..x.dim().1)
        .map(|c| x.index_axis(Axis(1), c).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Stream};

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = stream(seed, Stream::Other(3));
        let mut x = Array4::<f32>::zeros(shape);
        for v in x.iter_mut() {
            *v = normal(&mut rng);
        }
        x
    }

    #[test]
    fn softmax_outputs_simplex() {
        let x = random((2, 5, 3, 3), 1);
        let (y, _) = channel_softmax(&x);
        for i in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    let s: f32 = (0..5).map(|c| y[[i, c, yy, xx]]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = random((1, 3, 2, 2), 2);
        let coeff = random((1, 3, 2, 2), 3);
        let (_, cache) = channel_softmax(&x);
        let gx = channel_softmax_backward(&cache, &coeff);
        let loss = |x: &Array4<f32>| (&channel_softmax(x).0 * &coeff).sum();
        let eps = 1e-3;
        for ci in 0..3 {
            let mut xp = x.clone();
            xp[[0, ci, 1, 1]] += eps;
            let mut xm = x.clone();
            xm[[0, ci, 1, 1]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - gx[[0, ci, 1, 1]]).abs() < 1e-3);
        }
    }

    #[test]
    fn activation_gradients() {
        let x = random((1, 2, 3, 3), 4);
        let gy = random((1, 2, 3, 3), 5);
        let (_, c1) = leaky_relu(&x, 0.2);
        let g1 = leaky_relu_backward(&c1, &gy, 0.2);
        for (i, (&xv, (&gv, &gg))) in x.iter().zip(gy.iter().zip(g1.iter())).enumerate() {
            let expect = if xv > 0.0 { gv } else { 0.2 * gv };
            assert!((gg - expect).abs() < 1e-6, "elem {i}");
        }
        let (_, c2) = tanh(&x);
        let g2 = tanh_backward(&c2, &gy);
        for ((&xv, &gv), &gg) in x.iter().zip(gy.iter()).zip(g2.iter()) {
            let expect = gv * (1.0 - xv.tanh().powi(2));
            assert!((gg - expect).abs() < 1e-5);
        }
    }
}

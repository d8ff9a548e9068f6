//! Batch normalization over `[N, C, H, W]` feature maps.

use ndarray::{Array1, Array4, Axis, Ix1};

use super::param::{Param, Params};

const BN_EPS: f32 = 1e-5;
/// Fraction of the batch statistics folded into the running estimates.
const BN_MOMENTUM: f32 = 0.1;

/// Forward-pass mode for layers with batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and fold them into the running estimates.
    Train,
    /// Normalize by batch statistics without touching the running estimates
    /// (used for secondary passes over synthetic inputs).
    TrainFrozenStats,
    /// Normalize by the running estimates.
    Eval,
}

impl BnMode {
    pub fn is_train(self) -> bool {
        matches!(self, BnMode::Train | BnMode::TrainFrozenStats)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub c: usize,
}

#[derive(Debug)]
pub struct BnCache {
    x_hat: Array4<f32>,
    inv_std: Array1<f32>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Array1::<f32>::ones(c).into_dyn()),
            beta: Param::new(format!("{name}.beta"), Array1::<f32>::zeros(c).into_dyn()),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                Array1::<f32>::zeros(c).into_dyn(),
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                Array1::<f32>::ones(c).into_dyn(),
            ),
            c,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: BnMode) -> (Array4<f32>, BnCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c, "batchnorm channels");
        let m = (n * h * w) as f32;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();

        let (mean, var) = if mode.is_train() {
            let mut mean = Array1::<f32>::zeros(c);
            let mut var = Array1::<f32>::zeros(c);
            for ci in 0..c {
                let ch = x.index_axis(Axis(1), ci);
                let mu = ch.sum() / m;
                let v = ch.iter().map(|&e| (e - mu) * (e - mu)).sum::<f32>() / m;
                mean[ci] = mu;
                var[ci] = v;
            }
            if mode == BnMode::Train {
                let mut rm = self
                    .running_mean
                    .value
                    .view_mut()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let mut rv = self
                    .running_var
                    .value
                    .view_mut()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                for ci in 0..c {
                    rm[ci] = (1.0 - BN_MOMENTUM) * rm[ci] + BN_MOMENTUM * mean[ci];
                    rv[ci] = (1.0 - BN_MOMENTUM) * rv[ci] + BN_MOMENTUM * var[ci];
                }
            }
            (mean, var)
        } else {
            let rm = self
                .running_mean
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            let rv = self
                .running_var
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .unwrap()
                .to_owned();
            (rm, rv)
        };

        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut x_hat = x.clone();
        let mut y = Array4::<f32>::zeros(x.raw_dim());
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            let (g, b) = (gamma[ci], beta[ci]);
            let mut xh = x_hat.index_axis_mut(Axis(1), ci);
            xh.mapv_inplace(|v| (v - mu) * is);
            let mut yo = y.index_axis_mut(Axis(1), ci);
            yo.assign(&xh);
            yo.mapv_inplace(|v| g * v + b);
        }
        (
            y,
            BnCache {
                x_hat,
                inv_std,
                train: mode.is_train(),
            },
        )
    }

    pub fn backward(&mut self, cache: &BnCache, gy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f32;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut gx = Array4::<f32>::zeros(gy.raw_dim());
        let mut ggamma = self
            .gamma
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut gbeta = self
            .beta
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap();
        for ci in 0..c {
            let xh = cache.x_hat.index_axis(Axis(1), ci);
            let gy_c = gy.index_axis(Axis(1), ci);
            let sum_gy = gy_c.sum();
            let sum_gy_xh = gy_c.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f32>();
            ggamma[ci] += sum_gy_xh;
            gbeta[ci] += sum_gy;
            let scale = gamma[ci] * cache.inv_std[ci];
            let mut gx_c = gx.index_axis_mut(Axis(1), ci);
            if cache.train {
                ndarray::Zip::from(&mut gx_c).and(&gy_c).and(&xh).for_each(
                    |o, &g, &x| {
                        *o = scale * (g - sum_gy / m - x * sum_gy_xh / m);
                    },
                );
            } else {
                // Running statistics are constants w.r.t. the input.
                ndarray::Zip::from(&mut gx_c)
                    .and(&gy_c)
                    .for_each(|o, &g| *o = scale * g);
            }
        }
        gx
    }
}

impl Params for BatchNorm2d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Stream};

    fn random(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = stream(seed, Stream::Other(2));
        let mut x = Array4::<f32>::zeros((n, c, h, w));
        for v in x.iter_mut() {
            *v = normal(&mut rng) * 2.0 + 0.5;
        }
        x
    }

    #[test]
    fn train_forward_normalizes_channels() {
        let mut bn = BatchNorm2d::new("t", 3);
        let x = random(4, 3, 5, 5, 1);
        let (y, _) = bn.forward(&x, BnMode::Train);
        for ci in 0..3 {
            let ch = y.index_axis(Axis(1), ci);
            let m = ch.sum() / ch.len() as f32;
            let v = ch.iter().map(|&e| (e - m) * (e - m)).sum::<f32>() / ch.len() as f32;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn frozen_stats_mode_leaves_running_estimates() {
        let mut bn = BatchNorm2d::new("t", 2);
        let x = random(2, 2, 4, 4, 2);
        let before = bn.running_mean.value.clone();
        let _ = bn.forward(&x, BnMode::TrainFrozenStats);
        assert_eq!(bn.running_mean.value, before);
        let _ = bn.forward(&x, BnMode::Train);
        assert_ne!(bn.running_mean.value, before);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut bn = BatchNorm2d::new("t", 2);
        // non-trivial gamma/beta
        bn.gamma.value[[0]] = 1.3;
        bn.gamma.value[[1]] = 0.7;
        bn.beta.value[[1]] = 0.2;
        let x = random(2, 2, 3, 3, 3);
        let coeff = random(2, 2, 3, 3, 4);
        let (_, cache) = bn.forward(&x, BnMode::TrainFrozenStats);
        bn.zero_grads();
        let dx = bn.backward(&cache, &coeff);
        let loss = |bn: &mut BatchNorm2d, x: &Array4<f32>| {
            (&bn.forward(x, BnMode::TrainFrozenStats).0 * &coeff).sum()
        };
        let eps = 1e-2;
        for &(i, ci, yy, xx) in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let mut xp = x.clone();
            xp[[i, ci, yy, xx]] += eps;
            let mut xm = x.clone();
            xm[[i, ci, yy, xx]] -= eps;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * eps);
            let an = dx[[i, ci, yy, xx]];
            assert!((fd - an).abs() < 2e-2, "fd={fd} an={an}");
        }
        // gamma/beta grads
        for ci in 0..2 {
            let orig = bn.gamma.value[[ci]];
            bn.gamma.value[[ci]] = orig + eps;
            let lp = loss(&mut bn, &x);
            bn.gamma.value[[ci]] = orig - eps;
            let lm = loss(&mut bn, &x);
            bn.gamma.value[[ci]] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - bn.gamma.grad[[ci]]).abs() < 2e-2);
        }
    }
}

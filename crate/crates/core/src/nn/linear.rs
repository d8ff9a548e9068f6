//! Fully connected layer.

use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

use super::init::Init;
use super::param::{Param, Params};
use crate::rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`
    pub w: Param,
    /// `[out]`
    pub b: Param,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug)]
pub struct LinearCache {
    x: Array2<f32>,
}

impl Linear {
    pub fn new(name: &str, n_in: usize, n_out: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let std = init.std(n_in);
        let mut w = Array2::<f32>::zeros((n_out, n_in));
        for v in w.iter_mut() {
            *v = rng::truncated_normal(rng, std);
        }
        Self {
            w: Param::new(format!("{name}.w"), w.into_dyn()),
            b: Param::new(format!("{name}.b"), Array1::<f32>::zeros(n_out).into_dyn()),
            n_in,
            n_out,
        }
    }

    /// `x: [n, in] -> [n, out]`
    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        assert_eq!(x.dim().1, self.n_in, "linear input width");
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &b;
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, gy: &Array2<f32>) -> Array2<f32> {
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let dw = gy.t().dot(&cache.x);
        let db = gy.sum_axis(Axis(0));
        let dx = gy.dot(&w);
        let mut gw = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        gw += &dw;
        let mut gb = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        gb += &db;
        dx
    }
}

impl Params for Linear {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream(3, Stream::Init(0));
        let mut lin = Linear::new("t", 4, 3, Init::FanIn, &mut rng);
        let mut x = Array2::<f32>::zeros((2, 4));
        for v in x.iter_mut() {
            *v = rng::normal(&mut rng);
        }
        let coeff = {
            let mut c = Array2::<f32>::zeros((2, 3));
            for v in c.iter_mut() {
                *v = rng::normal(&mut rng);
            }
            c
        };
        let (_, cache) = lin.forward(&x);
        lin.zero_grads();
        let dx = lin.backward(&cache, &coeff);
        let loss = |l: &Linear, x: &Array2<f32>| (&l.forward(x).0 * &coeff).sum();
        let eps = 1e-2;
        for &(i, j) in &[(0usize, 0usize), (1, 3)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert!((fd - dx[[i, j]]).abs() < 1e-3);
        }
        for &(o, i) in &[(0usize, 0usize), (2, 3)] {
            let orig = lin.w.value[[o, i]];
            lin.w.value[[o, i]] = orig + eps;
            let lp = loss(&lin, &x);
            lin.w.value[[o, i]] = orig - eps;
            let lm = loss(&lin, &x);
            lin.w.value[[o, i]] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - lin.w.grad[[o, i]]).abs() < 1e-3);
        }
    }
}

//! Shared convolutional building block: two batch-normalized 3x3
//! convolutions with rectifier activations.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    act, BatchNorm2d, BnMode, Conv2d, Init, Param, Params,
};

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

#[derive(Debug)]
pub struct ConvBlockCache {
    c1: crate::nn::conv::ConvCache,
    b1: crate::nn::norm::BnCache,
    a1: act::ActCache,
    c2: crate::nn::conv::ConvCache,
    b2: crate::nn::norm::BnCache,
    a2: act::ActCache,
}

impl ConvBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, 1, 1, Init::FanIn, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, Init::FanIn, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
        }
    }

    pub fn forward_t(&mut self, x: &Array4<f32>, mode: BnMode) -> (Array4<f32>, ConvBlockCache) {
        let (y, c1) = self.conv1.forward(x);
        let (y, b1) = self.bn1.forward(&y, mode);
        let (y, a1) = act::relu(&y);
        let (y, c2) = self.conv2.forward(&y);
        let (y, b2) = self.bn2.forward(&y, mode);
        let (y, a2) = act::relu(&y);
        (y, ConvBlockCache { c1, b1, a1, c2, b2, a2 })
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let (y, _) = self.conv1.forward(x);
        let y = bn_eval(&self.bn1, &y);
        let y = y.mapv(|v| v.max(0.0));
        let (y, _) = self.conv2.forward(&y);
        let y = bn_eval(&self.bn2, &y);
        y.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, gy: &Array4<f32>) -> Array4<f32> {
        let g = act::relu_backward(&cache.a2, gy);
        let g = self.bn2.backward(&cache.b2, &g);
        let g = self.conv2.backward(&cache.c2, &g);
        let g = act::relu_backward(&cache.a1, &g);
        let g = self.bn1.backward(&cache.b1, &g);
        self.conv1.backward(&cache.c1, &g)
    }
}

impl Params for ConvBlock {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
    }
}

/// Read-only batch-norm forward using the running statistics.
pub fn bn_eval(bn: &BatchNorm2d, x: &Array4<f32>) -> Array4<f32> {
    let c = bn.c;
    let gamma = bn.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let beta = bn.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let rm = bn
        .running_mean
        .value
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let rv = bn
        .running_var
        .value
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let mut y = x.clone();
    for ci in 0..c {
        let scale = gamma[ci] / (rv[ci] + 1e-5).sqrt();
        let shift = beta[ci] - rm[ci] * scale;
        let mut ch = y.index_axis_mut(ndarray::Axis(1), ci);
        ch.mapv_inplace(|v| v * scale + shift);
    }
    y
}

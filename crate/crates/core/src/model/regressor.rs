//! Area regressor for the multi-task stage: predicts the normalized
//! left-ventricle pixel count from the anatomy factor.

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{act, flatten, unflatten, Conv2d, Init, Linear, Param, Params};

#[derive(Debug, Clone)]
pub struct AreaRegressor {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    flat_dims: (usize, usize, usize),
}

#[derive(Debug)]
pub struct RegressorCache {
    c1: crate::nn::conv::ConvCache,
    a1: act::ActCache,
    c2: crate::nn::conv::ConvCache,
    a2: act::ActCache,
    fc1: crate::nn::linear::LinearCache,
    fc1_pre: Array2<f32>,
    fc2: crate::nn::linear::LinearCache,
    out_pre: Array2<f32>,
}

impl AreaRegressor {
    pub fn new(
        anatomy_channels: usize,
        height: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::new("regressor.conv1", anatomy_channels, 16, 3, 2, 1, Init::FanIn, rng);
        let conv2 = Conv2d::new("regressor.conv2", 16, 16, 3, 2, 1, Init::FanIn, rng);
        let (h1, w1) = conv1.out_hw(height, width);
        let (h2, w2) = conv2.out_hw(h1, w1);
        let flat = 16 * h2 * w2;
        Self {
            conv1,
            conv2,
            fc1: Linear::new("regressor.fc1", flat, 16, Init::FanIn, rng),
            fc2: Linear::new("regressor.fc2", 16, 1, Init::FanIn, rng),
            flat_dims: (16, h2, w2),
        }
    }

    /// Rectified prediction `[N]`, one normalized pixel count per image.
    pub fn forward_t(&mut self, s: &Array4<f32>) -> (Array1<f32>, RegressorCache) {
        let (y, c1) = self.conv1.forward(s);
        let (y, a1) = act::relu(&y);
        let (y, c2) = self.conv2.forward(&y);
        let (y, a2) = act::relu(&y);
        let flat = flatten(&y);
        let (h_pre, fc1) = self.fc1.forward(&flat);
        let h = h_pre.mapv(|v| v.max(0.0));
        let (out_pre, fc2) = self.fc2.forward(&h);
        let out = out_pre.mapv(|v| v.max(0.0));
        (
            out.column(0).to_owned(),
            RegressorCache {
                c1,
                a1,
                c2,
                a2,
                fc1,
                fc1_pre: h_pre,
                fc2,
                out_pre,
            },
        )
    }

    pub fn infer(&self, s: &Array4<f32>) -> Array1<f32> {
        let (y, _) = self.conv1.forward(s);
        let y = y.mapv(|v| v.max(0.0));
        let (y, _) = self.conv2.forward(&y);
        let y = y.mapv(|v| v.max(0.0));
        let flat = flatten(&y);
        let (h, _) = self.fc1.forward(&flat);
        let h = h.mapv(|v| v.max(0.0));
        let (out, _) = self.fc2.forward(&h);
        out.column(0).mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, cache: &RegressorCache, g_out: &Array1<f32>) -> Array4<f32> {
        let mut g = Array2::from_shape_vec((g_out.len(), 1), g_out.to_vec()).unwrap();
        ndarray::Zip::from(&mut g)
            .and(&cache.out_pre)
            .for_each(|g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });
        let mut gh = self.fc2.backward(&cache.fc2, &g);
        ndarray::Zip::from(&mut gh)
            .and(&cache.fc1_pre)
            .for_each(|g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });
        let g_flat = self.fc1.backward(&cache.fc1, &gh);
        let g = unflatten(&g_flat, self.flat_dims);
        let g = act::relu_backward(&cache.a2, &g);
        let g = self.conv2.backward(&cache.c2, &g);
        let g = act::relu_backward(&cache.a1, &g);
        self.conv1.backward(&cache.c1, &g)
    }
}

impl Params for AreaRegressor {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
}

//! Mask discriminator: strided-convolution critic without batch
//! normalization, emitting one unbounded score per mask.

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{act, flatten, unflatten, Conv2d, Init, Linear, Param, Params};

const STAGES: usize = 4;

#[derive(Debug, Clone)]
pub struct MaskDiscriminator {
    convs: Vec<Conv2d>,
    head: Linear,
    flat_dims: (usize, usize, usize),
}

#[derive(Debug)]
pub struct DiscriminatorCache {
    convs: Vec<crate::nn::conv::ConvCache>,
    acts: Vec<act::ActCache>,
    head: crate::nn::linear::LinearCache,
}

impl MaskDiscriminator {
    pub fn new(
        in_channels: usize,
        base_filters: usize,
        height: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        let (mut h, mut w) = (height, width);
        for i in 0..STAGES {
            let c_out = base_filters << i;
            convs.push(Conv2d::new(
                &format!("discriminator.conv{i}"),
                c_in,
                c_out,
                4,
                2,
                1,
                Init::Fixed(0.02),
                rng,
            ));
            let (oh, ow) = convs[i].out_hw(h, w);
            h = oh;
            w = ow;
            c_in = c_out;
        }
        let head = Linear::new(
            "discriminator.head",
            c_in * h * w,
            1,
            Init::Fixed(0.02),
            rng,
        );
        Self {
            convs,
            head,
            flat_dims: (c_in, h, w),
        }
    }

    /// Scores `[N]` for a batch of masks `[N, L, H, W]`.
    pub fn forward_t(&mut self, m: &Array4<f32>) -> (Array1<f32>, DiscriminatorCache) {
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        let mut cur = m.clone();
        for conv in &self.convs {
            let (y, cc) = conv.forward(&cur);
            let (y, ac) = act::leaky_relu(&y, 0.2);
            convs.push(cc);
            acts.push(ac);
            cur = y;
        }
        let flat = flatten(&cur);
        let (score, head) = self.head.forward(&flat);
        (
            score.column(0).to_owned(),
            DiscriminatorCache { convs, acts, head },
        )
    }

    pub fn infer(&self, m: &Array4<f32>) -> Array1<f32> {
        let mut cur = m.clone();
        for conv in &self.convs {
            let (y, _) = conv.forward(&cur);
            cur = y.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        }
        let flat = flatten(&cur);
        self.head.forward(&flat).0.column(0).to_owned()
    }

    pub fn backward(&mut self, cache: &DiscriminatorCache, g_score: &Array1<f32>) -> Array4<f32> {
        let g = Array2::from_shape_vec((g_score.len(), 1), g_score.to_vec()).unwrap();
        let g_flat = self.head.backward(&cache.head, &g);
        let mut g = unflatten(&g_flat, self.flat_dims);
        for i in (0..STAGES).rev() {
            let ga = act::leaky_relu_backward(&cache.acts[i], &g, 0.2);
            g = self.convs[i].backward(&cache.convs[i], &ga);
        }
        g
    }
}

impl Params for MaskDiscriminator {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.convs {
            c.visit(f);
        }
        self.head.visit(f);
    }
}

//! Modality encoder: strided convolutions over (image ++ anatomy factor),
//! flattened into fully connected heads for the Gaussian posterior
//! parameters.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    act, flatten, unflatten, BatchNorm2d, BnMode, Conv2d, Init, Linear, Param, Params,
};

pub const LOG_VAR_MIN: f32 = -10.0;
pub const LOG_VAR_MAX: f32 = 10.0;
const DOWN_STAGES: usize = 4;
const HIDDEN: usize = 64;

#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
    fc: Linear,
    mean_head: Linear,
    log_var_head: Linear,
    flat_dims: (usize, usize, usize),
}

#[derive(Debug)]
pub struct ModalityCache {
    convs: Vec<crate::nn::conv::ConvCache>,
    norms: Vec<crate::nn::norm::BnCache>,
    acts: Vec<act::ActCache>,
    fc: crate::nn::linear::LinearCache,
    fc_act: Array2<f32>,
    mean_head: crate::nn::linear::LinearCache,
    log_var_head: crate::nn::linear::LinearCache,
    log_var_raw: Array2<f32>,
}

impl ModalityEncoder {
    pub fn new(
        in_channels: usize,
        base_filters: usize,
        latent_dims: usize,
        height: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = in_channels;
        let (mut h, mut w) = (height, width);
        for i in 0..DOWN_STAGES {
            let c_out = base_filters << i;
            convs.push(Conv2d::new(
                &format!("modality.conv{i}"),
                c_in,
                c_out,
                3,
                2,
                1,
                Init::FanIn,
                rng,
            ));
            norms.push(BatchNorm2d::new(&format!("modality.bn{i}"), c_out));
            let (oh, ow) = convs[i].out_hw(h, w);
            h = oh;
            w = ow;
            c_in = c_out;
        }
        let flat = c_in * h * w;
        Self {
            convs,
            norms,
            fc: Linear::new("modality.fc", flat, HIDDEN, Init::FanIn, rng),
            mean_head: Linear::new("modality.mean", HIDDEN, latent_dims, Init::FanIn, rng),
            log_var_head: Linear::new("modality.log_var", HIDDEN, latent_dims, Init::FanIn, rng),
            flat_dims: (c_in, h, w),
        }
    }

    /// Returns (mean `[N, n_z]`, clamped log variance `[N, n_z]`).
    pub fn forward_t(
        &mut self,
        x: &Array4<f32>,
        mode: BnMode,
    ) -> (Array2<f32>, Array2<f32>, ModalityCache) {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut acts = Vec::new();
        let mut cur = x.clone();
        for i in 0..DOWN_STAGES {
            let (y, cc) = self.convs[i].forward(&cur);
            let (y, nc) = self.norms[i].forward(&y, mode);
            let (y, ac) = act::leaky_relu(&y, 0.2);
            convs.push(cc);
            norms.push(nc);
            acts.push(ac);
            cur = y;
        }
        let flat = flatten(&cur);
        let (hid, fc) = self.fc.forward(&flat);
        let hid_act = hid.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        let (mean, mean_head) = self.mean_head.forward(&hid_act);
        let (log_var_raw, log_var_head) = self.log_var_head.forward(&hid_act);
        let log_var = log_var_raw.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        (
            mean,
            log_var,
            ModalityCache {
                convs,
                norms,
                acts,
                fc,
                fc_act: hid,
                mean_head,
                log_var_head,
                log_var_raw,
            },
        )
    }

    pub fn infer(&self, x: &Array4<f32>) -> (Array2<f32>, Array2<f32>) {
        let mut cur = x.clone();
        for i in 0..DOWN_STAGES {
            let (y, _) = self.convs[i].forward(&cur);
            let y = super::block::bn_eval(&self.norms[i], &y);
            cur = y.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        }
        let flat = flatten(&cur);
        let (hid, _) = self.fc.forward(&flat);
        let hid = hid.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        let (mean, _) = self.mean_head.forward(&hid);
        let (log_var, _) = self.log_var_head.forward(&hid);
        (mean, log_var.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)))
    }

    /// Backward from gradients on (mean, log_var); returns the input gradient.
    pub fn backward(
        &mut self,
        cache: &ModalityCache,
        g_mean: &Array2<f32>,
        g_log_var: &Array2<f32>,
    ) -> Array4<f32> {
        // clamp: zero gradient where saturated
        let mut g_lv = g_log_var.clone();
        ndarray::Zip::from(&mut g_lv)
            .and(&cache.log_var_raw)
            .for_each(|g, &raw| {
                if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw) {
                    *g = 0.0;
                }
            });
        let g_hid_a = self.mean_head.backward(&cache.mean_head, g_mean)
            + self.log_var_head.backward(&cache.log_var_head, &g_lv);
        let mut g_hid = g_hid_a;
        ndarray::Zip::from(&mut g_hid)
            .and(&cache.fc_act)
            .for_each(|g, &pre| {
                if pre <= 0.0 {
                    *g *= 0.2;
                }
            });
        let g_flat = self.fc.backward(&cache.fc, &g_hid);
        let mut g = unflatten(&g_flat, self.flat_dims);
        for i in (0..DOWN_STAGES).rev() {
            let ga = act::leaky_relu_backward(&cache.acts[i], &g, 0.2);
            let gn = self.norms[i].backward(&cache.norms[i], &ga);
            g = self.convs[i].backward(&cache.convs[i], &gn);
        }
        g
    }
}

impl Params for ModalityEncoder {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in &mut self.convs {
            c.visit(f);
        }
        for n in &mut self.norms {
            n.visit(f);
        }
        self.fc.visit(f);
        self.mean_head.visit(f);
        self.log_var_head.visit(f);
    }
}

//! Decoder: renders an image from the anatomy factor, with the modality
//! factor injected purely through per-channel affine (feature-wise linear
//! modulation) parameters. No spatial pathway from z exists.

use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{act, Conv2d, Init, Linear, Param, Params};

const HEAD_HIDDEN: usize = 64;

/// Apply a per-channel affine map broadcast over the spatial dimensions:
/// `out[h, w, k] = gamma[k] * x[h, w, k] + beta[k]`.
///
/// Standalone pure operation on a single `[K, H', W']` feature map.
pub fn film_modulate(
    feature_map: &ndarray::Array3<f32>,
    gamma: &[f32],
    beta: &[f32],
) -> Result<ndarray::Array3<f32>> {
    let (k, _, _) = feature_map.dim();
    if gamma.len() != k || beta.len() != k {
        return Err(Error::shape(
            format!("gamma/beta of length {k}"),
            format!("{}/{}", gamma.len(), beta.len()),
        ));
    }
    let mut out = feature_map.clone();
    for (ci, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
        ch.mapv_inplace(|v| gamma[ci] * v + beta[ci]);
    }
    Ok(out)
}

/// Batched modulation: `gamma`, `beta` are `[N, K]`.
fn film_batch(x: &Array4<f32>, gamma: &Array2<f32>, beta: &Array2<f32>) -> Array4<f32> {
    let (n, k, _, _) = x.dim();
    let mut y = x.clone();
    for i in 0..n {
        for ci in 0..k {
            let (g, b) = (gamma[[i, ci]], beta[[i, ci]]);
            let mut ch = y.index_axis_mut(Axis(0), i);
            let mut ch = ch.index_axis_mut(Axis(0), ci);
            ch.mapv_inplace(|v| g * v + b);
        }
    }
    y
}

#[derive(Debug)]
struct FilmCache {
    x: Array4<f32>,
    gamma: Array2<f32>,
}

/// dL/dx, dL/dgamma, dL/dbeta for one modulation stage.
fn film_backward(
    cache: &FilmCache,
    gy: &Array4<f32>,
) -> (Array4<f32>, Array2<f32>, Array2<f32>) {
    let (n, k, _, _) = gy.dim();
    let mut gx = gy.clone();
    let mut ggamma = Array2::<f32>::zeros((n, k));
    let mut gbeta = Array2::<f32>::zeros((n, k));
    for i in 0..n {
        for ci in 0..k {
            let gy_ch = gy.index_axis(Axis(0), i);
            let gy_ch = gy_ch.index_axis(Axis(0), ci);
            let x_ch = cache.x.index_axis(Axis(0), i);
            let x_ch = x_ch.index_axis(Axis(0), ci);
            ggamma[[i, ci]] = gy_ch.iter().zip(x_ch.iter()).map(|(a, b)| a * b).sum();
            gbeta[[i, ci]] = gy_ch.sum();
            let g = cache.gamma[[i, ci]];
            let mut gx_ch = gx.index_axis_mut(Axis(0), i);
            let mut gx_ch = gx_ch.index_axis_mut(Axis(0), ci);
            gx_ch.mapv_inplace(|v| v * g);
        }
    }
    (gx, ggamma, gbeta)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub stages: usize,
    pub filters: usize,
    head_fc1: Linear,
    head_fc2: Linear,
    conv_in: Conv2d,
    convs: Vec<Conv2d>,
    conv_out: Conv2d,
}

#[derive(Debug)]
pub struct DecoderCache {
    head_fc1: crate::nn::linear::LinearCache,
    head_hidden: Array2<f32>,
    head_fc2: crate::nn::linear::LinearCache,
    conv_in: crate::nn::conv::ConvCache,
    act_in: act::ActCache,
    convs: Vec<crate::nn::conv::ConvCache>,
    films: Vec<FilmCache>,
    acts: Vec<act::ActCache>,
    conv_out: crate::nn::conv::ConvCache,
    tanh: act::TanhCache,
}

impl Decoder {
    pub fn new(
        anatomy_channels: usize,
        latent_dims: usize,
        stages: usize,
        filters: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let head_fc1 = Linear::new("decoder.film_fc1", latent_dims, HEAD_HIDDEN, Init::FanIn, rng);
        let head_fc2 = Linear::new(
            "decoder.film_fc2",
            HEAD_HIDDEN,
            stages * 2 * filters,
            Init::FanIn,
            rng,
        );
        let conv_in = Conv2d::new(
            "decoder.conv_in",
            anatomy_channels,
            filters,
            3,
            1,
            1,
            Init::FanIn,
            rng,
        );
        let convs = (0..stages)
            .map(|i| {
                Conv2d::new(
                    &format!("decoder.conv{i}"),
                    filters,
                    filters,
                    3,
                    1,
                    1,
                    Init::FanIn,
                    rng,
                )
            })
            .collect();
        let conv_out = Conv2d::new("decoder.conv_out", filters, 1, 3, 1, 1, Init::FanIn, rng);
        Self {
            stages,
            filters,
            head_fc1,
            head_fc2,
            conv_in,
            convs,
            conv_out,
        }
    }

    /// Map z to per-stage (gamma, beta); gamma is predicted as 1 + residual.
    pub fn film_params(&self, z: &Array2<f32>) -> Vec<(Array2<f32>, Array2<f32>)> {
        let (hid, _) = self.head_fc1.forward(z);
        let hid = hid.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        let (raw, _) = self.head_fc2.forward(&hid);
        self.split_film(&raw)
    }

    fn split_film(&self, raw: &Array2<f32>) -> Vec<(Array2<f32>, Array2<f32>)> {
        let k = self.filters;
        (0..self.stages)
            .map(|t| {
                let base = t * 2 * k;
                let gamma = raw
                    .slice(ndarray::s![.., base..base + k])
                    .mapv(|v| 1.0 + v);
                let beta = raw.slice(ndarray::s![.., base + k..base + 2 * k]).to_owned();
                (gamma, beta)
            })
            .collect()
    }

    pub fn forward_t(
        &mut self,
        s: &Array4<f32>,
        z: &Array2<f32>,
    ) -> (Array4<f32>, DecoderCache) {
        let (hid_raw, head_fc1) = self.head_fc1.forward(z);
        let hid = hid_raw.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        let (raw, head_fc2) = self.head_fc2.forward(&hid);
        let film = self.split_film(&raw);

        let (y, conv_in) = self.conv_in.forward(s);
        let (mut cur, act_in) = act::leaky_relu(&y, 0.2);
        let mut convs = Vec::new();
        let mut films = Vec::new();
        let mut acts = Vec::new();
        for (t, (gamma, beta)) in film.iter().enumerate() {
            let (y, cc) = self.convs[t].forward(&cur);
            let modulated = film_batch(&y, gamma, beta);
            films.push(FilmCache {
                x: y,
                gamma: gamma.clone(),
            });
            let (y, ac) = act::leaky_relu(&modulated, 0.2);
            convs.push(cc);
            acts.push(ac);
            cur = y;
        }
        let (y, conv_out) = self.conv_out.forward(&cur);
        let (out, tanh) = act::tanh(&y);
        (
            out,
            DecoderCache {
                head_fc1,
                head_hidden: hid_raw,
                head_fc2,
                conv_in,
                act_in,
                convs,
                films,
                acts,
                conv_out,
                tanh,
            },
        )
    }

    pub fn infer(&self, s: &Array4<f32>, z: &Array2<f32>) -> Array4<f32> {
        let film = self.film_params(z);
        self.infer_with_film(s, &film)
    }

    /// Decode with externally supplied modulation parameters. The output is a
    /// pure function of `s` once these are fixed.
    pub fn infer_with_film(
        &self,
        s: &Array4<f32>,
        film: &[(Array2<f32>, Array2<f32>)],
    ) -> Array4<f32> {
        assert_eq!(film.len(), self.stages, "film stage count");
        let (y, _) = self.conv_in.forward(s);
        let mut cur = y.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        for (t, (gamma, beta)) in film.iter().enumerate() {
            let (y, _) = self.convs[t].forward(&cur);
            let y = film_batch(&y, gamma, beta);
            cur = y.mapv(|v| if v > 0.0 { v } else { 0.2 * v });
        }
        let (y, _) = self.conv_out.forward(&cur);
        y.mapv(f32::tanh)
    }

    /// Returns gradients w.r.t. the anatomy input and z.
    pub fn backward(
        &mut self,
        cache: &DecoderCache,
        gy: &Array4<f32>,
    ) -> (Array4<f32>, Array2<f32>) {
        let g = act::tanh_backward(&cache.tanh, gy);
        let mut g = self.conv_out.backward(&cache.conv_out, &g);
        let n = gy.dim().0;
        let k = self.filters;
        let mut g_raw = Array2::<f32>::zeros((n, self.stages * 2 * k));
        for t in (0..self.stages).rev() {
            let ga = act::leaky_relu_backward(&cache.acts[t], &g, 0.2);
            let (gx, ggamma, gbeta) = film_backward(&cache.films[t], &ga);
            let base = t * 2 * k;
            g_raw
                .slice_mut(ndarray::s![.., base..base + k])
                .assign(&ggamma);
            g_raw
                .slice_mut(ndarray::s![.., base + k..base + 2 * k])
                .assign(&gbeta);
            g = self.convs[t].backward(&cache.convs[t], &gx);
        }
        let g_in = act::leaky_relu_backward(&cache.act_in, &g, 0.2);
        let g_s = self.conv_in.backward(&cache.conv_in, &g_in);

        let mut g_hid = self.head_fc2.backward(&cache.head_fc2, &g_raw);
        ndarray::Zip::from(&mut g_hid)
            .and(&cache.head_hidden)
            .for_each(|g, &pre| {
                if pre <= 0.0 {
                    *g *= 0.2;
                }
            });
        let g_z = self.head_fc1.backward(&cache.head_fc1, &g_hid);
        (g_s, g_z)
    }
}

impl Params for Decoder {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.head_fc1.visit(f);
        self.head_fc2.visit(f);
        self.conv_in.visit(f);
        for c in &mut self.convs {
            c.visit(f);
        }
        self.conv_out.visit(f);
    }
}

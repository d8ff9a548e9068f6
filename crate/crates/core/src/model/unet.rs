//! Anatomy encoder: U-Net with skip connections, softmax output over the
//! anatomy channels.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::block::{ConvBlock, ConvBlockCache};
use crate::nn::{
    self, act, channel_softmax, channel_softmax_backward, concat_channels, max_pool2,
    max_pool2_backward, split_channels, upsample2, upsample2_backward, BnMode, Conv2d, Init,
    Param, Params,
};

#[derive(Debug, Clone)]
pub struct AnatomyEncoder {
    pub depth: usize,
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    /// Channels produced below each decoder stage (for splitting skip grads).
    below_channels: Vec<usize>,
}

#[derive(Debug)]
pub struct AnatomyCache {
    enc: Vec<ConvBlockCache>,
    pools: Vec<nn::pool::PoolCache>,
    bottleneck: ConvBlockCache,
    dec: Vec<ConvBlockCache>,
    head: nn::conv::ConvCache,
    softmax: act::SoftmaxCache,
}

impl AnatomyEncoder {
    pub fn new(
        depth: usize,
        base_filters: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let f = |i: usize| base_filters << i;
        let mut enc = Vec::new();
        let mut c_in = 1;
        for i in 0..depth {
            enc.push(ConvBlock::new(&format!("anatomy.enc{i}"), c_in, f(i), rng));
            c_in = f(i);
        }
        let bottleneck = ConvBlock::new("anatomy.bottleneck", f(depth - 1), f(depth), rng);
        let mut dec = Vec::new();
        let mut below_channels = Vec::new();
        for i in 0..depth {
            // decoder stage i consumes (below = f(i+1)) ++ (skip = f(i))
            below_channels.push(f(i + 1));
            dec.push(ConvBlock::new(
                &format!("anatomy.dec{i}"),
                f(i + 1) + f(i),
                f(i),
                rng,
            ));
        }
        let head = Conv2d::new("anatomy.head", f(0), out_channels, 1, 1, 0, Init::FanIn, rng);
        Self {
            depth,
            enc,
            bottleneck,
            dec,
            head,
            below_channels,
        }
    }

    /// Training forward; returns the per-pixel simplex map `[N, C, H, W]`.
    pub fn forward_t(&mut self, x: &Array4<f32>, mode: BnMode) -> (Array4<f32>, AnatomyCache) {
        let mut enc_caches = Vec::with_capacity(self.depth);
        let mut pools = Vec::with_capacity(self.depth);
        let mut skips = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for block in self.enc.iter_mut() {
            let (e, c) = block.forward_t(&cur, mode);
            let (p, pc) = max_pool2(&e);
            skips.push(e);
            enc_caches.push(c);
            pools.push(pc);
            cur = p;
        }
        let (mut cur, bott) = self.bottleneck.forward_t(&cur, mode);
        let mut dec_caches: Vec<Option<ConvBlockCache>> = (0..self.depth).map(|_| None).collect();
        for i in (0..self.depth).rev() {
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &skips[i]);
            let (out, c) = self.dec[i].forward_t(&cat, mode);
            dec_caches[i] = Some(c);
            cur = out;
        }
        let (logits, head) = self.head.forward(&cur);
        let (soft, softmax) = channel_softmax(&logits);
        (
            soft,
            AnatomyCache {
                enc: enc_caches,
                pools,
                bottleneck: bott,
                dec: dec_caches.into_iter().map(|c| c.unwrap()).collect(),
                head,
                softmax,
            },
        )
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut skips = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for block in &self.enc {
            let e = block.infer(&cur);
            let (p, _) = max_pool2(&e);
            skips.push(e);
            cur = p;
        }
        let mut cur = self.bottleneck.infer(&cur);
        for i in (0..self.depth).rev() {
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &skips[i]);
            cur = self.dec[i].infer(&cat);
        }
        let (logits, _) = self.head.forward(&cur);
        channel_softmax(&logits).0
    }

    /// Backward through the whole network; returns the input-image gradient.
    pub fn backward(&mut self, cache: &AnatomyCache, g_soft: &Array4<f32>) -> Array4<f32> {
        let g = channel_softmax_backward(&cache.softmax, g_soft);
        let mut g = self.head.backward(&cache.head, &g);
        let mut skip_grads: Vec<Option<Array4<f32>>> = (0..self.depth).map(|_| None).collect();
        for i in 0..self.depth {
            let g_cat = self.dec[i].backward(&cache.dec[i], &g);
            let (g_below, g_skip) = split_channels(&g_cat, self.below_channels[i]);
            skip_grads[i] = Some(g_skip);
            g = upsample2_backward(&g_below);
        }
        g = self.bottleneck.backward(&cache.bottleneck, &g);
        for i in (0..self.depth).rev() {
            let mut ge = max_pool2_backward(&cache.pools[i], &g);
            ge += skip_grads[i].as_ref().unwrap();
            g = self.enc[i].backward(&cache.enc[i], &ge);
        }
        g
    }
}

impl Params for AnatomyEncoder {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.enc {
            b.visit(f);
        }
        self.bottleneck.visit(f);
        for b in &mut self.dec {
            b.visit(f);
        }
        self.head.visit(f);
    }
}

//! Segmentor: two convolutional blocks and a 1x1 head over the anatomy
//! factor, softmax over L foreground classes plus background.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::block::{ConvBlock, ConvBlockCache};
use crate::nn::{
    act, channel_softmax, channel_softmax_backward, BnMode, Conv2d, Init, Param, Params,
};

#[derive(Debug, Clone)]
pub struct Segmentor {
    block1: ConvBlock,
    block2: ConvBlock,
    head: Conv2d,
}

#[derive(Debug)]
pub struct SegmentorCache {
    b1: ConvBlockCache,
    b2: ConvBlockCache,
    head: crate::nn::conv::ConvCache,
    softmax: act::SoftmaxCache,
}

impl Segmentor {
    pub fn new(
        anatomy_channels: usize,
        filters: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            block1: ConvBlock::new("segmentor.block1", anatomy_channels, filters, rng),
            block2: ConvBlock::new("segmentor.block2", filters, filters, rng),
            head: Conv2d::new(
                "segmentor.head",
                filters,
                num_classes + 1,
                1,
                1,
                0,
                Init::FanIn,
                rng,
            ),
        }
    }

    pub fn forward_t(&mut self, s: &Array4<f32>, mode: BnMode) -> (Array4<f32>, SegmentorCache) {
        let (y, b1) = self.block1.forward_t(s, mode);
        let (y, b2) = self.block2.forward_t(&y, mode);
        let (logits, head) = self.head.forward(&y);
        let (probs, softmax) = channel_softmax(&logits);
        (probs, SegmentorCache { b1, b2, head, softmax })
    }

    pub fn infer(&self, s: &Array4<f32>) -> Array4<f32> {
        let y = self.block1.infer(s);
        let y = self.block2.infer(&y);
        let (logits, _) = self.head.forward(&y);
        channel_softmax(&logits).0
    }

    pub fn backward(&mut self, cache: &SegmentorCache, g_probs: &Array4<f32>) -> Array4<f32> {
        let g = channel_softmax_backward(&cache.softmax, g_probs);
        let g = self.head.backward(&cache.head, &g);
        let g = self.block2.backward(&cache.b2, &g);
        self.block1.backward(&cache.b1, &g)
    }
}

impl Params for Segmentor {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.block1.visit(f);
        self.block2.visit(f);
        self.head.visit(f);
    }
}

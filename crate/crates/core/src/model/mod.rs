//! The factorization model: anatomy encoder, binarizer, modality encoder,
//! segmentor and decoder, plus the mask discriminator and the optional
//! area-regression head. Public operations work on single images; training
//! uses the batched network internals directly.

pub mod block;
pub mod discriminator;
pub mod film;
pub mod modality;
pub mod regressor;
pub mod segmentor;
pub mod unet;

use ndarray::{Array1, Array2, Array3, Array4, Axis};

pub use film::film_modulate;

use crate::config::ModelConfig;
use crate::data::{Image, ModalityFactor, ModalityPosterior, SegmentationProbs};
use crate::error::{Error, Result};
use crate::nn::{Param, Params};
use crate::rng::{self, Stream};
use discriminator::MaskDiscriminator;
use film::Decoder;
use modality::ModalityEncoder;
use regressor::AreaRegressor;
use segmentor::Segmentor;
use unet::AnatomyEncoder;

#[derive(Clone)]
pub struct FactorModel {
    pub cfg: ModelConfig,
    pub anatomy: AnatomyEncoder,
    pub modality: ModalityEncoder,
    pub decoder: Decoder,
    pub segmentor: Segmentor,
    pub discriminator: MaskDiscriminator,
    /// Present after multi-task fine-tuning.
    pub regressor: Option<AreaRegressor>,
}

impl FactorModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r0 = rng::stream(cfg.seed, Stream::Init(0));
        let mut r1 = rng::stream(cfg.seed, Stream::Init(1));
        let mut r2 = rng::stream(cfg.seed, Stream::Init(2));
        let mut r3 = rng::stream(cfg.seed, Stream::Init(3));
        let mut r4 = rng::stream(cfg.seed, Stream::Init(4));
        let anatomy =
            AnatomyEncoder::new(cfg.encoder_depth, cfg.base_filters, cfg.channels, &mut r0);
        let modality = ModalityEncoder::new(
            cfg.channels + 1,
            cfg.base_filters,
            cfg.latent_dims,
            cfg.height,
            cfg.width,
            &mut r1,
        );
        let decoder = Decoder::new(
            cfg.channels,
            cfg.latent_dims,
            cfg.film_stages,
            cfg.base_filters,
            &mut r2,
        );
        let segmentor = Segmentor::new(cfg.channels, cfg.base_filters, cfg.num_classes, &mut r3);
        let discriminator = MaskDiscriminator::new(
            cfg.num_classes,
            cfg.base_filters,
            cfg.height,
            cfg.width,
            &mut r4,
        );
        Ok(Self {
            cfg,
            anatomy,
            modality,
            decoder,
            segmentor,
            discriminator,
            regressor: None,
        })
    }

    pub fn add_regressor(&mut self) {
        if self.regressor.is_none() {
            let mut r = rng::stream(self.cfg.seed, Stream::Init(5));
            self.regressor = Some(AreaRegressor::new(
                self.cfg.channels,
                self.cfg.height,
                self.cfg.width,
                &mut r,
            ));
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let (h, w) = image.shape();
        if h != self.cfg.height || w != self.cfg.width {
            return Err(Error::shape(
                format!("{}x{} image", self.cfg.height, self.cfg.width),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    fn check_anatomy(&self, s: &Array3<f32>) -> Result<()> {
        let (c, h, w) = s.dim();
        if c != self.cfg.channels || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::shape(
                format!(
                    "{}x{}x{} anatomy factor",
                    self.cfg.channels, self.cfg.height, self.cfg.width
                ),
                format!("{c}x{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Encode one image into the soft anatomy factor `[C, H, W]`
    /// (per-pixel simplex across channels).
    pub fn encode_anatomy(&self, image: &Image) -> Result<Array3<f32>> {
        self.check_image(image)?;
        let x = image_batch(std::slice::from_ref(image));
        let soft = self.anatomy.infer(&x);
        ensure_finite(&soft, "anatomy encoder")?;
        Ok(soft.index_axis(Axis(0), 0).to_owned())
    }

    /// Encode the Gaussian posterior over the modality factor from an image
    /// and its binarized anatomy factor.
    pub fn encode_modality(
        &self,
        image: &Image,
        hard_s: &Array3<f32>,
    ) -> Result<ModalityPosterior> {
        self.check_image(image)?;
        self.check_anatomy(hard_s)?;
        let x = image_batch(std::slice::from_ref(image));
        let s = hard_s.clone().insert_axis(Axis(0));
        let joined = crate::nn::concat_channels(&x, &s);
        let (mean, log_var) = self.modality.infer(&joined);
        let post = ModalityPosterior {
            mean: mean.row(0).to_owned(),
            log_variance: log_var.row(0).to_owned(),
        };
        post.validate()?;
        Ok(post)
    }

    /// Decode an image `[H, W]` from a binarized anatomy factor and a
    /// modality factor. The output is tanh-saturated into `[-1, 1]`.
    pub fn decode(&self, hard_s: &Array3<f32>, z: &ModalityFactor) -> Result<Array2<f32>> {
        self.check_anatomy(hard_s)?;
        if z.z.len() != self.cfg.latent_dims {
            return Err(Error::shape(
                format!("z of length {}", self.cfg.latent_dims),
                format!("{}", z.z.len()),
            ));
        }
        let s = hard_s.clone().insert_axis(Axis(0));
        let zb = Array2::from_shape_vec((1, z.z.len()), z.z.to_vec()).unwrap();
        let y = self.decoder.infer(&s, &zb);
        Ok(y.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    }

    /// Per-pixel class probabilities `[L+1, H, W]` from a binarized anatomy
    /// factor.
    pub fn segment(&self, hard_s: &Array3<f32>) -> Result<SegmentationProbs> {
        self.check_anatomy(hard_s)?;
        let s = hard_s.clone().insert_axis(Axis(0));
        let probs = self.segmentor.infer(&s);
        Ok(SegmentationProbs {
            probs: probs.index_axis(Axis(0), 0).to_owned(),
        })
    }

    /// Unbounded realism score for `L` foreground mask channels `[L, H, W]`.
    pub fn discriminate(&self, mask_channels: &Array3<f32>) -> Result<f32> {
        let (l, h, w) = mask_channels.dim();
        if l != self.cfg.num_classes || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::shape(
                format!(
                    "{}x{}x{} mask",
                    self.cfg.num_classes, self.cfg.height, self.cfg.width
                ),
                format!("{l}x{h}x{w}"),
            ));
        }
        let m = mask_channels.clone().insert_axis(Axis(0));
        Ok(self.discriminator.infer(&m)[0])
    }

    /// Image-level full factorization: (soft s, hard s, posterior).
    pub fn factorize(&self, image: &Image) -> Result<(Array3<f32>, Array3<f32>, ModalityPosterior)> {
        let soft = self.encode_anatomy(image)?;
        let hard = binarize(&soft);
        let post = self.encode_modality(image, &hard)?;
        Ok((soft, hard, post))
    }

    pub fn generator_params(&mut self) -> GeneratorParams<'_> {
        GeneratorParams(self)
    }
}

/// The parameter group updated by the generator-side optimizer.
pub struct GeneratorParams<'a>(pub &'a mut FactorModel);

impl Params for GeneratorParams<'_> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.anatomy.visit(f);
        self.0.modality.visit(f);
        self.0.decoder.visit(f);
        self.0.segmentor.visit(f);
        if let Some(r) = self.0.regressor.as_mut() {
            r.visit(f);
        }
    }
}

/// All parameters, for checkpointing.
pub struct AllParams<'a>(pub &'a mut FactorModel);

impl Params for AllParams<'_> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.anatomy.visit(f);
        self.0.modality.visit(f);
        self.0.decoder.visit(f);
        self.0.segmentor.visit(f);
        self.0.discriminator.visit(f);
        if let Some(r) = self.0.regressor.as_mut() {
            r.visit(f);
        }
    }
}

/// Binarize a per-pixel simplex into a one-hot map: argmax per pixel with
/// lowest-index tie breaking. Wherever some channel exceeds 0.5 this agrees
/// with rounding every channel to the nearest integer.
pub fn binarize(soft: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = soft.dim();
    let mut hard = Array3::<f32>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for ci in 0..c {
                let v = soft[[ci, y, x]];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            hard[[best, y, x]] = 1.0;
        }
    }
    hard
}

/// Batched [`binarize`] over `[N, C, H, W]`.
pub fn binarize_batch(soft: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = soft.dim();
    let mut hard = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for ci in 0..c {
                    let v = soft[[i, ci, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                hard[[i, best, y, x]] = 1.0;
            }
        }
    }
    hard
}

/// Draw z from the posterior with the reparameterization rule
/// `z = mean + exp(0.5 * log_var) * eps`, `eps ~ N(0, I)` seeded by `rng_seed`.
pub fn sample_posterior(post: &ModalityPosterior, rng_seed: u64) -> Result<ModalityFactor> {
    post.validate()?;
    let mut rng = rng::stream(rng_seed, Stream::PosteriorNoise);
    let z = Array1::from_iter(
        post.mean
            .iter()
            .zip(post.log_variance.iter())
            .map(|(&m, &lv)| m + (0.5 * lv).exp() * rng::normal(&mut rng)),
    );
    Ok(ModalityFactor { z })
}

/// Inference-time modality factor: the posterior mean, no sampling.
pub fn posterior_mean(post: &ModalityPosterior) -> ModalityFactor {
    ModalityFactor {
        z: post.mean.clone(),
    }
}

/// Stack images into a `[N, 1, H, W]` batch.
pub fn image_batch(images: &[Image]) -> Array4<f32> {
    let (h, w) = images[0].shape();
    let mut x = Array4::<f32>::zeros((images.len(), 1, h, w));
    for (i, img) in images.iter().enumerate() {
        x.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&img.pixels);
    }
    x
}

fn ensure_finite(x: &Array4<f32>, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} produced non-finite values")));
    }
    Ok(())
}

//! The five loss terms and their weighted composition. Every operation is a
//! pure function; the `*_with_grad` variants also produce the gradients used
//! by the training loop.

use ndarray::{Array1, Array2, Array4};

use crate::config::LossWeights;
use crate::data::{ModalityFactor, ModalityPosterior, SegmentationMask, SegmentationProbs};
use crate::error::{Error, Result};

/// Division guard of the soft Dice ratio.
pub const DICE_EPS: f32 = 1e-6;

/// Per-step scalar summary of every objective component.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub kl: f32,
    pub segm: f32,
    pub adv_gen: f32,
    pub adv_disc: f32,
    pub rec: f32,
    pub z_rec: f32,
    pub total: f32,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,kl,segm,adv_gen,adv_disc,rec,z_rec,total"
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.kl, self.segm, self.adv_gen, self.adv_disc, self.rec, self.z_rec, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.kl,
            self.segm,
            self.adv_gen,
            self.adv_disc,
            self.rec,
            self.z_rec,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Closed-form divergence of a diagonal Gaussian from the unit Gaussian,
/// summed over dimensions and averaged over the batch:
/// `0.5 * sum_i (mean_i^2 + exp(logvar_i) - logvar_i - 1)`.
pub fn kl_batch(mean: &Array2<f32>, log_var: &Array2<f32>) -> f32 {
    let n = mean.dim().0 as f32;
    let mut acc = 0.0f32;
    for (&m, &lv) in mean.iter().zip(log_var.iter()) {
        acc += 0.5 * (m * m + lv.exp() - lv - 1.0);
    }
    acc / n
}

/// Gradients of [`kl_batch`] w.r.t. mean and log variance.
pub fn kl_batch_grad(mean: &Array2<f32>, log_var: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let n = mean.dim().0 as f32;
    let g_mean = mean.mapv(|m| m / n);
    let g_lv = log_var.mapv(|lv| 0.5 * (lv.exp() - 1.0) / n);
    (g_mean, g_lv)
}

/// Divergence of a single posterior from the unit-Gaussian prior.
pub fn kl_loss(post: &ModalityPosterior) -> Result<f32> {
    post.validate()?;
    let n = post.mean.len();
    let mean = Array2::from_shape_vec((1, n), post.mean.to_vec()).unwrap();
    let lv = Array2::from_shape_vec((1, n), post.log_variance.to_vec()).unwrap();
    let v = kl_batch(&mean, &lv);
    if !v.is_finite() {
        return Err(Error::Numeric("divergence is not finite".into()));
    }
    Ok(v)
}

/// Soft Dice loss over foreground channels, one ratio per image, averaged
/// over the batch: `1 - 2 * (sum(gt * pred) + eps) / (sum(gt) + sum(pred) + eps)`.
pub fn dice_batch(gt: &Array4<f32>, pred: &Array4<f32>) -> Result<f32> {
    if gt.dim() != pred.dim() {
        return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    let n = gt.dim().0;
    let mut acc = 0.0f32;
    for i in 0..n {
        let g = gt.index_axis(ndarray::Axis(0), i);
        let p = pred.index_axis(ndarray::Axis(0), i);
        let inter: f32 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        let union: f32 = g.sum() + p.sum();
        acc += 1.0 - 2.0 * (inter + DICE_EPS) / (union + DICE_EPS);
    }
    Ok(acc / n as f32)
}

/// Gradient of [`dice_batch`] w.r.t. the prediction.
pub fn dice_batch_grad(gt: &Array4<f32>, pred: &Array4<f32>) -> Array4<f32> {
    let n = gt.dim().0;
    let mut grad = Array4::<f32>::zeros(pred.raw_dim());
    for i in 0..n {
        let g = gt.index_axis(ndarray::Axis(0), i);
        let p = pred.index_axis(ndarray::Axis(0), i);
        let inter: f32 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        let union: f32 = g.sum() + p.sum();
        let denom = (union + DICE_EPS) * (union + DICE_EPS);
        let mut gr = grad.index_axis_mut(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut gr).and(&g).for_each(|o, &gv| {
            *o = -2.0 * (gv * (union + DICE_EPS) - (inter + DICE_EPS)) / denom / n as f32;
        });
    }
    grad
}

/// Dice loss between a ground-truth mask and a prediction (foreground only).
pub fn dice_loss(gt: &SegmentationMask, pred: &SegmentationProbs) -> Result<f32> {
    let fg = pred.foreground();
    if gt.classes.dim() != fg.dim() {
        return Err(Error::shape(
            format!("{:?}", gt.classes.dim()),
            format!("{:?}", fg.dim()),
        ));
    }
    let g = gt.classes.clone().insert_axis(ndarray::Axis(0));
    let p = fg.insert_axis(ndarray::Axis(0));
    dice_batch(&g, &p)
}

/// Least-squares adversarial objectives for one (fake, real) score pair:
/// discriminator drives fakes to 0 and reals to 1, the generator drives
/// fakes to 1.
pub fn adversarial_losses(score_fake: f32, score_real: f32) -> (f32, f32) {
    let gen = (score_fake - 1.0) * (score_fake - 1.0);
    let disc = score_fake * score_fake + (score_real - 1.0) * (score_real - 1.0);
    (gen, disc)
}

/// Batched LSGAN discriminator loss `mean(fake^2) + mean((real-1)^2)`.
pub fn lsgan_disc_batch(fake: &Array1<f32>, real: &Array1<f32>) -> f32 {
    let mf = fake.mapv(|f| f * f).mean().unwrap_or(0.0);
    let mr = real.mapv(|r| (r - 1.0) * (r - 1.0)).mean().unwrap_or(0.0);
    mf + mr
}

/// Gradients of [`lsgan_disc_batch`] w.r.t. (fake, real) scores.
pub fn lsgan_disc_batch_grad(fake: &Array1<f32>, real: &Array1<f32>) -> (Array1<f32>, Array1<f32>) {
    let nf = fake.len() as f32;
    let nr = real.len() as f32;
    (
        fake.mapv(|f| 2.0 * f / nf),
        real.mapv(|r| 2.0 * (r - 1.0) / nr),
    )
}

/// Batched LSGAN generator loss `mean((fake-1)^2)`.
pub fn lsgan_gen_batch(fake: &Array1<f32>) -> f32 {
    fake.mapv(|f| (f - 1.0) * (f - 1.0)).mean().unwrap_or(0.0)
}

pub fn lsgan_gen_batch_grad(fake: &Array1<f32>) -> Array1<f32> {
    let n = fake.len() as f32;
    fake.mapv(|f| 2.0 * (f - 1.0) / n)
}

/// Mean absolute error over all pixels.
pub fn mae_batch(x: &Array4<f32>, x_hat: &Array4<f32>) -> Result<f32> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", x_hat.dim())));
    }
    let n = x.len() as f32;
    Ok(x.iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f32>()
        / n)
}

/// Gradient of [`mae_batch`] w.r.t. the reconstruction.
pub fn mae_batch_grad(x: &Array4<f32>, x_hat: &Array4<f32>) -> Array4<f32> {
    let n = x.len() as f32;
    let mut g = Array4::<f32>::zeros(x.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(x)
        .and(x_hat)
        .for_each(|o, &a, &b| {
            *o = (b - a).signum() / n;
        });
    g
}

/// Mean absolute pixel difference between an image and its reconstruction.
pub fn reconstruction_loss(x: &ndarray::Array2<f32>, x_hat: &ndarray::Array2<f32>) -> Result<f32> {
    if x.dim() != x_hat.dim() {
        return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", x_hat.dim())));
    }
    let n = x.len() as f32;
    Ok(x.iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f32>()
        / n)
}

/// Mean absolute difference per dimension between a sampled modality factor
/// and its re-encoded counterpart.
pub fn z_reconstruction_loss(z_sampled: &ModalityFactor, z_reencoded: &ModalityFactor) -> f32 {
    let n = z_sampled.z.len() as f32;
    z_sampled
        .z
        .iter()
        .zip(z_reencoded.z.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f32>()
        / n
}

/// Batched L1 over `[N, n_z]` factors (mean over all entries).
pub fn z_rec_batch(z: &Array2<f32>, z_re: &Array2<f32>) -> f32 {
    let n = z.len() as f32;
    z.iter()
        .zip(z_re.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f32>()
        / n
}

/// Gradient of [`z_rec_batch`] w.r.t. the re-encoded factor.
pub fn z_rec_batch_grad(z: &Array2<f32>, z_re: &Array2<f32>) -> Array2<f32> {
    let n = z.len() as f32;
    let mut g = Array2::<f32>::zeros(z.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(z)
        .and(z_re)
        .for_each(|o, &a, &b| {
            *o = (b - a).signum() / n;
        });
    g
}

/// Weighted composition of the generator-side objective. With no labels in
/// the batch the segmentation term is omitted.
pub fn total_loss(report: &LossReport, weights: &LossWeights, has_labels: bool) -> Result<f32> {
    weights.validate()?;
    let segm = if has_labels { report.segm } else { 0.0 };
    Ok(weights.kl * report.kl
        + weights.segm * segm
        + weights.adv * report.adv_gen
        + weights.rec * report.rec
        + weights.z_rec * report.z_rec)
}

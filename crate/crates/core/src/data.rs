//! Core data types: images, masks and the two latent factors.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

/// A single 2D grayscale image with acquisition metadata.
///
/// Pixel values live in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Image {
    pub pixels: Array2<f32>,
    /// Pixel area in mm^2 per pixel.
    pub resolution: f32,
    /// Slice thickness in mm.
    pub thickness: f32,
    pub subject: u32,
    pub phase: u32,
    pub slice: u32,
    pub modality: String,
}

impl Image {
    pub fn validate(&self) -> Result<()> {
        for &v in self.pixels.iter() {
            if !v.is_finite() {
                return Err(Error::Numeric("image contains non-finite pixels".into()));
            }
            if !(-1.0 - 1e-5..=1.0 + 1e-5).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "pixel value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Ground-truth segmentation: `L` binary foreground channels, layout `[L, H, W]`.
///
/// Channels are pairwise disjoint; pixels on no channel are background.
#[derive(Debug, Clone)]
pub struct SegmentationMask {
    pub classes: Array3<f32>,
}

impl SegmentationMask {
    pub fn num_classes(&self) -> usize {
        self.classes.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.classes.dim();
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f32;
                for c in 0..self.num_classes() {
                    let v = self.classes[[c, y, x]];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::InvalidInput(
                            "ground-truth mask must be binary".into(),
                        ));
                    }
                    sum += v;
                }
                if sum > 1.0 {
                    return Err(Error::InvalidInput(
                        "mask channels overlap at a pixel".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-pixel class index map: 0 = background, 1..=L = foreground classes.
    pub fn to_labels(&self) -> Array2<u8> {
        let (l, h, w) = self.classes.dim();
        let mut labels = Array2::<u8>::zeros((h, w));
        for c in 0..l {
            for y in 0..h {
                for x in 0..w {
                    if self.classes[[c, y, x]] > 0.5 {
                        labels[[y, x]] = (c + 1) as u8;
                    }
                }
            }
        }
        labels
    }

    pub fn from_labels(labels: &Array2<u8>, num_classes: usize) -> Self {
        let (h, w) = labels.dim();
        let mut classes = Array3::<f32>::zeros((num_classes, h, w));
        for y in 0..h {
            for x in 0..w {
                let v = labels[[y, x]] as usize;
                if v >= 1 && v <= num_classes {
                    classes[[v - 1, y, x]] = 1.0;
                }
            }
        }
        Self { classes }
    }
}

/// Per-pixel class probabilities predicted by the segmentor:
/// `L` foreground channels plus one background channel, layout `[L+1, H, W]`.
#[derive(Debug, Clone)]
pub struct SegmentationProbs {
    pub probs: Array3<f32>,
}

impl SegmentationProbs {
    /// Foreground channels only (drops the trailing background channel).
    pub fn foreground(&self) -> Array3<f32> {
        let (lp1, _, _) = self.probs.dim();
        self.probs
            .slice(ndarray::s![..lp1 - 1, .., ..])
            .to_owned()
    }

    /// Argmax over channels, re-encoded as a binary foreground mask.
    pub fn to_hard_mask(&self) -> SegmentationMask {
        let (lp1, h, w) = self.probs.dim();
        let mut classes = Array3::<f32>::zeros((lp1 - 1, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for c in 0..lp1 {
                    let v = self.probs[[c, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                if best < lp1 - 1 {
                    classes[[best, y, x]] = 1.0;
                }
            }
        }
        SegmentationMask { classes }
    }
}

/// Gaussian posterior over the modality factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPosterior {
    pub mean: Array1<f32>,
    pub log_variance: Array1<f32>,
}

impl ModalityPosterior {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.log_variance.len() {
            return Err(Error::shape(
                format!("log_variance of length {}", self.mean.len()),
                format!("{}", self.log_variance.len()),
            ));
        }
        if self
            .mean
            .iter()
            .chain(self.log_variance.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite posterior parameters".into()));
        }
        Ok(())
    }
}

/// A sampled modality factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFactor {
    pub z: Array1<f32>,
}

/// Map raw pixel intensities affinely onto `[-1, 1]`.
///
/// A constant image maps to all zeros.
pub fn normalize(raw: &Array2<f32>) -> Result<Array2<f32>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite raw pixels".into()));
    }
    let min = raw.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let max = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    if max - min <= f64::EPSILON {
        return Ok(Array2::zeros(raw.dim()));
    }
    let span = max - min;
    Ok(raw.mapv(|v| ((v as f64 - min) / span * 2.0 - 1.0) as f32))
}

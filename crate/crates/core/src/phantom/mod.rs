//! Synthetic cardiac-phantom dataset: concentric-geometry anatomy (cavity
//! disc, muscle ring, adjacent crescent) with per-subject jitter, a smooth
//! contraction cycle across phases, per-modality intensity transfer and
//! additive noise. Ground-truth masks are attached to the two extreme
//! phases only, mirroring the annotation pattern of clinical cine data.

pub mod augment;
pub mod io;
pub mod split;

use ndarray::Array2;
use rand::Rng;

use crate::data::{normalize, Image, SegmentationMask};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub use augment::augment_rotation;
pub use split::{make_split, sample_semi_supervised, SemiSupervisedSets, SplitPlan};

/// Foreground classes of the phantom, in channel order.
pub const CLASS_NAMES: [&str; 3] = ["lv_cavity", "myocardium", "rv"];

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub num_subjects: usize,
    pub slices_per_subject: usize,
    pub phases_per_subject: usize,
    /// Intensity-transfer tags, assigned round-robin over subjects.
    pub modalities: Vec<String>,
    pub noise_std: f32,
    /// Relative jitter of the base geometry per subject, in [0, 1].
    pub geometry_jitter: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_subjects: 20,
            slices_per_subject: 3,
            phases_per_subject: 10,
            modalities: vec!["A".into()],
            noise_std: 0.03,
            geometry_jitter: 0.15,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects < 3 {
            return Err(Error::InvalidConfig(
                "at least 3 subjects are needed for 3-fold splits".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig("need at least one modality".into()));
        }
        if self.phases_per_subject < 2 || self.slices_per_subject == 0 {
            return Err(Error::InvalidConfig(
                "need >= 2 phases and >= 1 slice per subject".into(),
            ));
        }
        Ok(())
    }

    /// Phases carrying ground-truth masks: the two cycle extremes.
    pub fn annotated_phases(&self) -> Vec<u32> {
        vec![0, (self.phases_per_subject / 2) as u32]
    }
}

/// One phantom subject: images over (phase, slice), masks on annotated
/// phases, geometric cavity pixel counts for every image.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: u32,
    pub modality: String,
    pub resolution: f32,
    pub thickness: f32,
    pub images: Vec<Image>,
    /// Aligned with `images`; present only on annotated phases.
    pub masks: Vec<Option<SegmentationMask>>,
    /// Aligned with `images`: exact cavity pixel count from the geometry.
    pub lv_pixel_counts: Vec<usize>,
    pub annotated_phases: Vec<u32>,
}

impl Subject {
    pub fn image_index(&self, phase: u32, slice: u32) -> Option<usize> {
        self.images
            .iter()
            .position(|im| im.phase == phase && im.slice == slice)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cx: f32,
    cy: f32,
    r_lv: f32,
    r_myo: f32,
    rv_cx: f32,
    rv_cy: f32,
    r_rv: f32,
}

impl Geometry {
    /// 0 = background, 1 = cavity, 2 = muscle ring, 3 = crescent.
    fn label_at(&self, y: f32, x: f32) -> u8 {
        let d_c = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
        if d_c <= self.r_lv {
            return 1;
        }
        if d_c <= self.r_myo {
            return 2;
        }
        let d_rv = ((x - self.rv_cx).powi(2) + (y - self.rv_cy).powi(2)).sqrt();
        if d_rv <= self.r_rv {
            return 3;
        }
        0
    }
}

/// Deterministically generate one subject. `subject_index` selects the
/// subject's random stream under `cfg.seed`.
pub fn generate_subject(cfg: &PhantomConfig, subject_index: u32) -> Result<Subject> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::Phantom(subject_index as u64));
    let s = cfg.image_size as f32;
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, scale: f32| -> f32 {
        (rng.random::<f32>() * 2.0 - 1.0) * scale
    };

    let j = cfg.geometry_jitter;
    let cx = s * 0.5 + jitter(&mut rng, s * 0.05 * j / 0.15);
    let cy = s * 0.5 + jitter(&mut rng, s * 0.05 * j / 0.15);
    let r_lv_base = s * 0.13 * (1.0 + jitter(&mut rng, j));
    let wall = s * 0.075 * (1.0 + jitter(&mut rng, j));
    let r_rv_base = s * 0.14 * (1.0 + jitter(&mut rng, j));
    let modality = cfg.modalities[(subject_index as usize) % cfg.modalities.len()].clone();
    let resolution = 1.2 + rng.random::<f32>() * 0.6;
    let thickness = 8.0 + rng.random::<f32>() * 2.0;
    // Clip so the whole geometry stays inside the image with a margin.
    let max_extent = s * 0.5 - 2.0;
    let r_myo_base = r_lv_base + wall;
    let rv_offset = r_myo_base + r_rv_base * 0.45;
    let scale_fix = (max_extent / (rv_offset + r_rv_base)).min(1.0);

    let annotated = cfg.annotated_phases();
    let phases = cfg.phases_per_subject;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut lv_pixel_counts = Vec::new();

    // Pre-draw all noise states per (phase, slice) so geometry changes
    // never shift the noise sequence.
    for phase in 0..phases {
        // Contraction: 1 at both extremes of the cycle index, smallest at
        // the middle phase (end-systole analogue).
        let t = phase as f32 / (phases.max(2) - 1) as f32;
        let contraction = 1.0 - 0.3 * (std::f32::consts::PI * t).sin();
        for slice in 0..cfg.slices_per_subject {
            let slice_scale = 1.0 - 0.12 * slice as f32;
            let geo = Geometry {
                cx,
                cy,
                r_lv: r_lv_base * contraction * slice_scale * scale_fix,
                r_myo: r_myo_base * slice_scale * scale_fix,
                rv_cx: cx - rv_offset * slice_scale * scale_fix,
                rv_cy: cy,
                r_rv: r_rv_base * (0.9 + 0.1 * contraction) * slice_scale * scale_fix,
            };
            let (pixels, labels, lv_count) =
                render(cfg, &geo, &modality, &mut rng)?;
            images.push(Image {
                pixels,
                resolution,
                thickness,
                subject: subject_index,
                phase: phase as u32,
                slice: slice as u32,
                modality: modality.clone(),
            });
            let mask = if annotated.contains(&(phase as u32)) {
                Some(SegmentationMask::from_labels(&labels, CLASS_NAMES.len()))
            } else {
                None
            };
            masks.push(mask);
            lv_pixel_counts.push(lv_count);
        }
    }

    Ok(Subject {
        id: subject_index,
        modality,
        resolution,
        thickness,
        images,
        masks,
        lv_pixel_counts,
        annotated_phases: annotated,
    })
}

fn render(
    cfg: &PhantomConfig,
    geo: &Geometry,
    modality: &str,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Array2<f32>, Array2<u8>, usize)> {
    let n = cfg.image_size;
    let mut raw = Array2::<f32>::zeros((n, n));
    let mut labels = Array2::<u8>::zeros((n, n));
    let mut lv_count = 0usize;
    let s = n as f32;
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let label = geo.label_at(fy, fx);
            labels[[y, x]] = label;
            if label == 1 {
                lv_count += 1;
            }
            let base = match label {
                1 => 0.90,
                2 => 0.45,
                3 => 0.70,
                _ => 0.20,
            };
            let d_c = ((fx - geo.cx).powi(2) + (fy - geo.cy).powi(2)).sqrt();
            let shading = 1.0 - 0.12 * (d_c / (0.75 * s)).min(1.0);
            let v = base * shading;
            let v = transfer(modality, v)?;
            let v = v + rng::normal(rng) * cfg.noise_std;
            raw[[y, x]] = v.clamp(0.0, 1.0);
        }
    }
    Ok((normalize(&raw)?, labels, lv_count))
}

/// Per-modality monotone intensity transfer on raw values in [0, 1].
pub fn transfer(modality: &str, v: f32) -> Result<f32> {
    match modality {
        "A" => Ok(v),
        // Inverted and gamma-compressed contrast.
        "B" => Ok((1.0 - v).max(0.0).powf(0.6)),
        other => Err(Error::InvalidConfig(format!(
            "unknown phantom modality '{other}'"
        ))),
    }
}

/// Generate the full cohort.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<Vec<Subject>> {
    cfg.validate()?;
    (0..cfg.num_subjects as u32)
        .map(|i| generate_subject(cfg, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            image_size: 32,
            num_subjects: 4,
            slices_per_subject: 2,
            phases_per_subject: 6,
            modalities: vec!["A".into(), "B".into()],
            noise_std: 0.02,
            geometry_jitter: 0.15,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_subject(&cfg, 2).unwrap();
        let b = generate_subject(&cfg, 2).unwrap();
        assert_eq!(a.images.len(), b.images.len());
        for (ia, ib) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(ia.pixels, ib.pixels);
        }
        let c = generate_subject(&cfg, 3).unwrap();
        assert_ne!(a.images[0].pixels, c.images[0].pixels);
    }

    #[test]
    fn masks_only_on_extreme_phases_and_disjoint() {
        let cfg = small_cfg();
        let subj = generate_subject(&cfg, 0).unwrap();
        for (img, mask) in subj.images.iter().zip(subj.masks.iter()) {
            let expect = subj.annotated_phases.contains(&img.phase);
            assert_eq!(mask.is_some(), expect, "phase {}", img.phase);
            if let Some(m) = mask {
                m.validate().unwrap();
            }
        }
    }

    #[test]
    fn lv_counts_match_mask_pixels() {
        let cfg = small_cfg();
        let subj = generate_subject(&cfg, 1).unwrap();
        for ((mask, &count), img) in subj
            .masks
            .iter()
            .zip(subj.lv_pixel_counts.iter())
            .zip(subj.images.iter())
        {
            if let Some(m) = mask {
                let mask_count = m.classes.index_axis(ndarray::Axis(0), 0).sum() as usize;
                assert_eq!(mask_count, count, "phase {} slice {}", img.phase, img.slice);
            }
            assert!(count > 0, "cavity never empty");
        }
    }

    #[test]
    fn images_normalized_and_modalities_assigned() {
        let cfg = small_cfg();
        let subjects = generate_dataset(&cfg).unwrap();
        assert_eq!(subjects[0].modality, "A");
        assert_eq!(subjects[1].modality, "B");
        for s in &subjects {
            for img in &s.images {
                img.validate().unwrap();
                let min = img.pixels.iter().cloned().fold(f32::INFINITY, f32::min);
                let max = img.pixels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert_eq!(min, -1.0);
                assert_eq!(max, 1.0);
            }
        }
    }

    #[test]
    fn contraction_shrinks_cavity_at_mid_cycle() {
        let cfg = small_cfg();
        let subj = generate_subject(&cfg, 0).unwrap();
        let ed = subj.image_index(0, 0).unwrap();
        let es = subj.image_index(cfg.phases_per_subject as u32 / 2, 0).unwrap();
        assert!(subj.lv_pixel_counts[es] < subj.lv_pixel_counts[ed]);
    }

    #[test]
    fn foreground_regions_are_connected() {
        // 4-connectivity flood fill per channel
        let cfg = small_cfg();
        let subj = generate_subject(&cfg, 2).unwrap();
        let mask = subj.masks[0].as_ref().unwrap();
        let (l, h, w) = mask.classes.dim();
        for c in 0..l {
            let ch = mask.classes.index_axis(ndarray::Axis(0), c);
            let total = ch.sum() as usize;
            assert!(total > 0, "class {c} empty");
            let start = (0..h * w)
                .find(|i| ch[[i / w, i % w]] > 0.5)
                .unwrap();
            let mut seen = vec![false; h * w];
            let mut stack = vec![start];
            seen[start] = true;
            let mut reached = 0;
            while let Some(i) = stack.pop() {
                reached += 1;
                let (y, x) = (i / w, i % w);
                for (dy, dx) in [(0i32, 1i32), (0, -1), (1, 0), (-1, 0)] {
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if !seen[ni] && ch[[ny as usize, nx as usize]] > 0.5 {
                        seen[ni] = true;
                        stack.push(ni);
                    }
                }
            }
            assert_eq!(reached, total, "class {c} disconnected");
        }
    }
}

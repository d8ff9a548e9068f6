//! Dataset directory format: one sub-directory per subject containing
//! 16-bit grayscale image PNGs, 8-bit label PNGs for annotated phases, and
//! a flat key=value metadata file.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;

use super::Subject;
use crate::config::KvMap;
use crate::data::{Image, SegmentationMask};
use crate::error::{Error, Result};

fn image_name(phase: u32, slice: u32) -> String {
    format!("img_p{phase:02}_s{slice:02}.png")
}

fn mask_name(phase: u32, slice: u32) -> String {
    format!("mask_p{phase:02}_s{slice:02}.png")
}

/// Encode `[-1, 1]` pixels as 16-bit grayscale.
fn encode_pixels(pixels: &Array2<f32>) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = pixels.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = pixels[[y as usize, x as usize]].clamp(-1.0, 1.0);
        Luma([((v + 1.0) * 0.5 * 65535.0).round() as u16])
    })
}

fn decode_pixels(buf: &ImageBuffer<Luma<u16>, Vec<u16>>) -> Array2<f32> {
    let (w, h) = buf.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        buf.get_pixel(x as u32, y as u32).0[0] as f32 / 65535.0 * 2.0 - 1.0
    })
}

pub fn write_dataset(root: &Path, subjects: &[Subject]) -> Result<()> {
    fs::create_dir_all(root)?;
    for subj in subjects {
        let dir = root.join(format!("subject_{:03}", subj.id));
        fs::create_dir_all(&dir)?;
        let mut meta = KvMap::new();
        meta.set("id", subj.id);
        meta.set("modality", &subj.modality);
        meta.set("resolution", subj.resolution);
        meta.set("thickness", subj.thickness);
        meta.set(
            "annotated_phases",
            subj.annotated_phases
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        let mut names = Vec::new();
        for ((img, mask), &count) in subj
            .images
            .iter()
            .zip(subj.masks.iter())
            .zip(subj.lv_pixel_counts.iter())
        {
            let name = image_name(img.phase, img.slice);
            encode_pixels(&img.pixels)
                .save(dir.join(&name))
                .map_err(Error::from)?;
            if let Some(m) = mask {
                let labels = m.to_labels();
                let (h, w) = labels.dim();
                let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                        Luma([labels[[y as usize, x as usize]]])
                    });
                buf.save(dir.join(mask_name(img.phase, img.slice)))
                    .map_err(Error::from)?;
            }
            meta.set(
                &format!("lv_pixels.p{:02}.s{:02}", img.phase, img.slice),
                count,
            );
            names.push((img.phase, img.slice));
        }
        meta.set(
            "images",
            names
                .iter()
                .map(|(p, s)| format!("p{p:02}s{s:02}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        fs::write(dir.join("meta.txt"), meta.to_text())?;
    }
    Ok(())
}

pub fn read_dataset(root: &Path) -> Result<Vec<Subject>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("meta.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no subject directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| read_subject(d)).collect()
}

fn read_subject(dir: &Path) -> Result<Subject> {
    let meta = KvMap::parse(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let id: u32 = meta
        .get_parsed("id")?
        .ok_or_else(|| Error::InvalidInput("meta.txt missing id".into()))?;
    let modality = meta
        .get("modality")
        .ok_or_else(|| Error::InvalidInput("meta.txt missing modality".into()))?
        .to_string();
    let resolution: f32 = meta.get_parsed("resolution")?.unwrap_or(1.0);
    let thickness: f32 = meta.get_parsed("thickness")?.unwrap_or(10.0);
    let annotated_phases: Vec<u32> = meta
        .get("annotated_phases")
        .map(|s| {
            s.split(',')
                .filter(|t| !t.is_empty())
                .filter_map(|t| t.parse().ok())
                .collect()
        })
        .unwrap_or_default();
    let image_keys = meta
        .get("images")
        .ok_or_else(|| Error::InvalidInput("meta.txt missing image list".into()))?;

    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut lv_pixel_counts = Vec::new();
    for key in image_keys.split(',').filter(|s| !s.is_empty()) {
        let (p, s) = key
            .strip_prefix('p')
            .and_then(|k| k.split_once('s'))
            .ok_or_else(|| Error::InvalidInput(format!("bad image key '{key}'")))?;
        let phase: u32 = p
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad phase in '{key}'")))?;
        let slice: u32 = s
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad slice in '{key}'")))?;
        let img_path = dir.join(image_name(phase, slice));
        let dyn_img = image::open(&img_path)?;
        let pixels = decode_pixels(&dyn_img.to_luma16());
        images.push(Image {
            pixels,
            resolution,
            thickness,
            subject: id,
            phase,
            slice,
            modality: modality.clone(),
        });
        let mask_path = dir.join(mask_name(phase, slice));
        if mask_path.exists() {
            let labels_img = image::open(&mask_path)?.to_luma8();
            let (w, h) = labels_img.dimensions();
            let labels = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                labels_img.get_pixel(x as u32, y as u32).0[0]
            });
            let num_classes = super::CLASS_NAMES.len();
            masks.push(Some(SegmentationMask::from_labels(&labels, num_classes)));
        } else {
            masks.push(None);
        }
        let count: usize = meta
            .get_parsed(&format!("lv_pixels.p{phase:02}.s{slice:02}"))?
            .unwrap_or(0);
        lv_pixel_counts.push(count);
    }
    Ok(Subject {
        id,
        modality,
        resolution,
        thickness,
        images,
        masks,
        lv_pixel_counts,
        annotated_phases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomConfig};

    #[test]
    fn round_trip_preserves_structure_and_masks() {
        let cfg = PhantomConfig {
            image_size: 32,
            num_subjects: 3,
            slices_per_subject: 2,
            phases_per_subject: 4,
            seed: 9,
            ..PhantomConfig::default()
        };
        let subjects = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &subjects).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), subjects.len());
        for (a, b) in subjects.iter().zip(loaded.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.modality, b.modality);
            assert_eq!(a.lv_pixel_counts, b.lv_pixel_counts);
            assert_eq!(a.annotated_phases, b.annotated_phases);
            assert_eq!(a.images.len(), b.images.len());
            for (ia, ib) in a.images.iter().zip(b.images.iter()) {
                assert_eq!((ia.phase, ia.slice), (ib.phase, ib.slice));
                // 16-bit quantization error bound
                let max_err = ia
                    .pixels
                    .iter()
                    .zip(ib.pixels.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0f32, f32::max);
                assert!(max_err <= 1.0 / 65535.0 * 2.0 + 1e-6);
            }
            for (ma, mb) in a.masks.iter().zip(b.masks.iter()) {
                assert_eq!(ma.is_some(), mb.is_some());
                if let (Some(x), Some(y)) = (ma, mb) {
                    assert_eq!(x.classes, y.classes);
                }
            }
        }
    }

    #[test]
    fn written_trees_are_byte_identical_for_same_seed() {
        let cfg = PhantomConfig {
            image_size: 32,
            num_subjects: 3,
            phases_per_subject: 4,
            seed: 12,
            ..PhantomConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(d1.path(), &generate_dataset(&cfg).unwrap()).unwrap();
        write_dataset(d2.path(), &generate_dataset(&cfg).unwrap()).unwrap();
        let mut files1: Vec<_> = walk(d1.path());
        let mut files2: Vec<_> = walk(d2.path());
        files1.sort();
        files2.sort();
        assert_eq!(files1.len(), files2.len());
        for (f1, f2) in files1.iter().zip(files2.iter()) {
            assert_eq!(
                f1.strip_prefix(d1.path()).unwrap(),
                f2.strip_prefix(d2.path()).unwrap()
            );
            assert_eq!(fs::read(f1).unwrap(), fs::read(f2).unwrap(), "{f1:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap().filter_map(|e| e.ok()) {
            let p = e.path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}

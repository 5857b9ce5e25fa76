//! Synthetic tiny-object scenes: smoothed noise clutter plus small
//! high-contrast rectangles with jittered intensity, and plain portable
//! graymap storage.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{AnnotationRecord, CategoryRecord, GroundTruth, GroundTruthFile, ImageRecord};
use crate::geometry::Box;
use crate::harness::config::SceneConfig;
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// In-memory training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<FeatureMap>,
    /// Ground truths per image, image_id set to the index.
    pub gts: Vec<Vec<GroundTruth>>,
}

impl Dataset {
    pub fn all_gts(&self) -> Vec<GroundTruth> {
        self.gts.iter().flatten().cloned().collect()
    }
}

/// Smoothed background: coarse uniform noise bilinearly upsampled to full
/// resolution, scaled by the clutter amplitude.
fn background(rng: &mut ChaCha8Rng, size: usize, amplitude: f64) -> FeatureMap {
    let mut image = FeatureMap::zeros(1, 1, size, size);
    if amplitude == 0.0 {
        return image;
    }
    let coarse = size / 8;
    let grid: Vec<f64> = (0..coarse * coarse)
        .map(|_| rng.gen_range(0.0..amplitude))
        .collect();
    for y in 0..size {
        for x in 0..size {
            // Sample the coarse grid at pixel centers, clamped at edges.
            let gy = (y as f64 + 0.5) / 8.0 - 0.5;
            let gx = (x as f64 + 0.5) / 8.0 - 0.5;
            let y0 = gy.floor().max(0.0) as usize;
            let x0 = gx.floor().max(0.0) as usize;
            let y1 = (y0 + 1).min(coarse - 1);
            let x1 = (x0 + 1).min(coarse - 1);
            let fy = (gy - y0 as f64).clamp(0.0, 1.0);
            let fx = (gx - x0 as f64).clamp(0.0, 1.0);
            let v = grid[y0 * coarse + x0] * (1.0 - fy) * (1.0 - fx)
                + grid[y0 * coarse + x1] * (1.0 - fy) * fx
                + grid[y1 * coarse + x0] * fy * (1.0 - fx)
                + grid[y1 * coarse + x1] * fy * fx;
            *image.at_mut(0, 0, y, x) = v;
        }
    }
    image
}

/// One scene: image in [0, 1] and tight ground-truth boxes.
pub fn gen_scene(rng: &mut ChaCha8Rng, cfg: &SceneConfig, image_id: i64) -> Result<(FeatureMap, Vec<GroundTruth>)> {
    cfg.validate()?;
    let mut image = background(rng, cfg.size, cfg.clutter);
    let n = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let mut gts = Vec::with_capacity(n);
    for _ in 0..n {
        let w = rng.gen_range(cfg.min_size..=cfg.max_size);
        let h = rng.gen_range(cfg.min_size..=cfg.max_size);
        let x0 = rng.gen_range(0..=cfg.size - w);
        let y0 = rng.gen_range(0..=cfg.size - h);
        let intensity = rng.gen_range(0.6..1.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let jitter = rng.gen_range(-0.1..0.1);
                let v = image.at(0, 0, y, x);
                *image.at_mut(0, 0, y, x) = (v + intensity + jitter).clamp(0.0, 1.0);
            }
        }
        gts.push(GroundTruth {
            bbox: Box::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)?,
            class_id: 1,
            image_id,
        });
    }
    for v in image.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((image, gts))
}

/// Deterministic dataset: image `i` is generated from seed `cfg.seed + i`.
pub fn gen_dataset(cfg: &SceneConfig, images: usize) -> Result<Dataset> {
    let mut out = Dataset {
        images: Vec::with_capacity(images),
        gts: Vec::with_capacity(images),
    };
    for i in 0..images {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let (image, gts) = gen_scene(&mut rng, cfg, i as i64)?;
        out.images.push(image);
        out.gts.push(gts);
    }
    Ok(out)
}

/// Write a single-channel map in [0, 1] as a binary portable graymap.
pub fn save_pgm(path: &Path, image: &FeatureMap) -> Result<()> {
    if image.b != 1 || image.c != 1 {
        return Err(Error::Shape(format!(
            "graymap wants a 1x1xHxW map, got {:?}",
            image.shape()
        )));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", image.w, image.h).into_bytes();
    bytes.extend(
        image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    // Header: magic, width, height, maxval, then a single whitespace byte.
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("not a binary graymap: {}", path.display()),
        )));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Config("bad width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Config("bad height".into()))?;
    let maxval: f64 = fields[3].parse().map_err(|_| Error::Config("bad maxval".into()))?;
    let pixels = &bytes[pos..];
    if pixels.len() < w * h {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated graymap",
        )));
    }
    let data = pixels[..w * h].iter().map(|&b| b as f64 / maxval).collect();
    FeatureMap::from_vec(data, 1, 1, h, w)
}

/// Write the dataset as numbered graymaps plus `gt.json`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut file = GroundTruthFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: vec![CategoryRecord {
            id: 1,
            name: "object".into(),
        }],
    };
    for (i, image) in dataset.images.iter().enumerate() {
        save_pgm(&dir.join(format!("img_{i:05}.pgm")), image)?;
        file.images.push(ImageRecord {
            id: i as i64,
            width: image.w as u32,
            height: image.h as u32,
        });
        for gt in &dataset.gts[i] {
            file.annotations.push(AnnotationRecord {
                image_id: i as i64,
                category_id: gt.class_id,
                bbox: gt.bbox.to_xywh(),
            });
        }
    }
    std::fs::write(dir.join("gt.json"), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let file = crate::eval::load_ground_truth_file(&dir.join("gt.json"))?;
    let mut images = Vec::with_capacity(file.images.len());
    let mut gts = vec![Vec::new(); file.images.len()];
    for (i, rec) in file.images.iter().enumerate() {
        images.push(load_pgm(&dir.join(format!("img_{:05}.pgm", rec.id)))?);
        for ann in file.annotations.iter().filter(|a| a.image_id == rec.id) {
            gts[i].push(GroundTruth {
                bbox: Box::from_xywh(ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3])?,
                class_id: ann.category_id,
                image_id: rec.id,
            });
        }
    }
    Ok(Dataset { images, gts })
}

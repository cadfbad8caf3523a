//! The dataset directory contract shared by `synth` and `fuse`:
//! `rgb_%04d.png`, `normal_%04d.png`, `mask_%04d.png`, a `cameras.json`
//! listing per-view extrinsics/intrinsics, and an optional
//! `ground_truth.json` record.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use viewfuse_core::camera::CameraPose;
use viewfuse_core::dataset::{MultiViewSet, ViewData};
use viewfuse_core::synth::GroundTruth;

use crate::report::atomic_write;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub views: Vec<CameraPose>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(img[[y, x, 0]]),
                    to_u8(img[[y, x, 1]]),
                    to_u8(img[[y, x, 2]]),
                ]),
            );
        }
    }
    let mut bytes = Vec::new();
    out.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    atomic_write(path, &bytes)
}

pub fn save_gray(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([to_u8(img[[y, x]])]));
        }
    }
    let mut bytes = Vec::new();
    out.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    atomic_write(path, &bytes)
}

pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .with_context(|| format!("loading {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[y, x, c]] = p[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .with_context(|| format!("loading {}", path.display()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Write a full dataset directory (images, cameras, optional ground truth).
pub fn save_dataset(
    dir: &Path,
    set: &MultiViewSet,
    truth: Option<&GroundTruth>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (v, view) in set.views.iter().enumerate() {
        save_rgb(&dir.join(format!("rgb_{v:04}.png")), &view.rgb)?;
        save_rgb(&dir.join(format!("normal_{v:04}.png")), &view.normal)?;
        save_gray(&dir.join(format!("mask_{v:04}.png")), &view.mask)?;
    }
    let cameras = CameraFile {
        views: set.views.iter().map(|v| v.pose.clone()).collect(),
    };
    atomic_write(
        &dir.join("cameras.json"),
        serde_json::to_string_pretty(&cameras)?.as_bytes(),
    )?;
    if let Some(gt) = truth {
        atomic_write(
            &dir.join("ground_truth.json"),
            serde_json::to_string_pretty(gt)?.as_bytes(),
        )?;
    }
    Ok(())
}

/// Load and validate a dataset directory. Every violation is reported with
/// the offending file or field.
pub fn load_dataset(dir: &Path) -> Result<MultiViewSet> {
    if !dir.is_dir() {
        bail!("dataset directory {} does not exist", dir.display());
    }
    let cam_path = dir.join("cameras.json");
    let cam_text = std::fs::read_to_string(&cam_path)
        .with_context(|| format!("missing camera file {}", cam_path.display()))?;
    let cameras: CameraFile = serde_json::from_str(&cam_text)
        .with_context(|| format!("parsing {}", cam_path.display()))?;
    if cameras.views.is_empty() {
        bail!("{}: no views listed", cam_path.display());
    }

    let mut views = Vec::with_capacity(cameras.views.len());
    for (v, pose) in cameras.views.iter().enumerate() {
        pose.validate()
            .map_err(|e| anyhow!("cameras.json view {v}: {e}"))?;
        let rgb_path = dir.join(format!("rgb_{v:04}.png"));
        let normal_path = dir.join(format!("normal_{v:04}.png"));
        let mask_path = dir.join(format!("mask_{v:04}.png"));
        for p in [&rgb_path, &normal_path, &mask_path] {
            if !p.is_file() {
                bail!("view {v}: missing image file {}", p.display());
            }
        }
        let rgb = load_rgb(&rgb_path)?;
        let normal = load_rgb(&normal_path)?;
        let mask = load_gray(&mask_path)?;
        views.push(ViewData {
            rgb,
            normal,
            mask,
            pose: pose.clone(),
        });
    }
    let set = MultiViewSet::new(views).map_err(|e| anyhow!("{}: {e}", dir.display()))?;
    Ok(set)
}

pub fn load_ground_truth(dir: &Path) -> Result<Option<GroundTruth>> {
    let path = dir.join("ground_truth.json");
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let gt: GroundTruth =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(gt))
}

/// The `validate_dataset` operation: load, check, and report usable views.
pub fn validate_dataset(dir: &Path) -> Result<MultiViewSet> {
    let set = load_dataset(dir)?;
    set.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(set)
}

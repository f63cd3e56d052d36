//! Per-slice composite images and a patient montage.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array4;
use thiserror::Error;

use crate::dataset::{LabelVolume, PatientStudy};

pub const PENUMBRA_RGB: [u8; 3] = [0, 255, 0];
pub const CORE_RGB: [u8; 3] = [255, 0, 0];
/// Tiles of one composite, left to right.
pub const TILES: [&str; 7] = ["cbf", "cbv", "ttp", "tmax", "mip", "ground_truth", "prediction"];

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error("prediction dims {pred:?} do not match study dims {study:?}")]
    Shape { pred: (usize, usize, usize), study: (usize, usize, usize) },
    #[error("cannot write {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, OverlayError>;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn map_tile(map: &Array4<f32>, z: usize) -> RgbImage {
    let (_, h, w, _) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb([to_u8(map[(z, y, x, 0)]), to_u8(map[(z, y, x, 1)]), to_u8(map[(z, y, x, 2)])])
    })
}

/// The MIP slice in grey.
pub fn mip_tile(study: &PatientStudy, z: usize) -> RgbImage {
    let (_, h, w) = study.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = to_u8(study.mip.0[(z, y as usize, x as usize)]);
        Rgb([g, g, g])
    })
}

/// The MIP slice with penumbra and core painted opaquely.
pub fn label_tile(study: &PatientStudy, labels: &LabelVolume, z: usize) -> RgbImage {
    let mut img = mip_tile(study, z);
    for (x, y, px) in img.enumerate_pixels_mut() {
        match labels.labels()[(z, y as usize, x as usize)] {
            1 => *px = Rgb(PENUMBRA_RGB),
            2 => *px = Rgb(CORE_RGB),
            _ => {}
        }
    }
    img
}

fn composite(study: &PatientStudy, pred: &LabelVolume, z: usize) -> RgbImage {
    let (_, h, w) = study.dims();
    let gt = study.ground_truth.clone().unwrap_or_else(|| LabelVolume::healthy(study.dims()));
    let tiles = [
        map_tile(&study.maps.cbf, z),
        map_tile(&study.maps.cbv, z),
        map_tile(&study.maps.ttp, z),
        map_tile(&study.maps.tmax, z),
        mip_tile(study, z),
        label_tile(study, &gt, z),
        label_tile(study, pred, z),
    ];
    let mut out = RgbImage::new((w * tiles.len()) as u32, h as u32);
    for (i, t) in tiles.iter().enumerate() {
        image::imageops::replace(&mut out, t, (i * w) as i64, 0);
    }
    out
}

/// Writes `slice_XXX.png` composites and `montage.png` (prediction overlays
/// of all slices on a near-square grid). Returns the written paths.
pub fn emit_overlays(study: &PatientStudy, pred: &LabelVolume, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if pred.dims() != study.dims() {
        return Err(OverlayError::Shape { pred: pred.dims(), study: study.dims() });
    }
    let io = |path: &Path, e: &dyn std::fmt::Display| OverlayError::Io { path: path.to_path_buf(), reason: e.to_string() };
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, &e))?;
    let (s, h, w) = study.dims();
    let mut written = Vec::with_capacity(s + 1);
    for z in 0..s {
        let path = out_dir.join(format!("slice_{z:03}.png"));
        composite(study, pred, z).save(&path).map_err(|e| io(&path, &e))?;
        written.push(path);
    }
    let cols = (s as f64).sqrt().ceil().max(1.0) as usize;
    let rows = s.div_ceil(cols);
    let mut montage = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for z in 0..s {
        let tile = label_tile(study, pred, z);
        image::imageops::replace(&mut montage, &tile, ((z % cols) * w) as i64, ((z / cols) * h) as i64);
    }
    let path = out_dir.join("montage.png");
    montage.save(&path).map_err(|e| io(&path, &e))?;
    written.push(path);
    Ok(written)
}

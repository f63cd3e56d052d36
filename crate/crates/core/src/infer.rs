//! Brain masking from the MIP, argmax labelling and per-patient prediction.

use std::collections::VecDeque;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Zip};
use thiserror::Error;

use crate::dataset::{LabelVolume, MipVolume, PatientStudy};
use crate::model::{ModelError, ModelGraph};
use crate::train::{make_input, slice_samples_unlabelled};

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model expects NIHSS but patient `{0}` has none")]
    MissingNihss(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InferError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask(pub Array3<bool>);

impl BrainMask {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn slice(&self, z: usize) -> ArrayView2<'_, bool> {
        self.0.slice(s![z, .., ..])
    }
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Connected components of `true` pixels (4-connectivity); labels start at 1.
fn components(mask: ArrayView2<'_, bool>) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut label = Array2::<u32>::zeros((h, w));
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[(y, x)] || label[(y, x)] != 0 {
                continue;
            }
            let id = sizes.len() as u32;
            let mut size = 0;
            label[(y, x)] = id;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[(ny, nx)] && label[(ny, nx)] == 0 {
                        label[(ny, nx)] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (label, sizes)
}

/// Keeps the largest 4-connected component; ties keep the first in raster order.
pub fn largest_component(mask: ArrayView2<'_, bool>) -> Array2<bool> {
    let (label, sizes) = components(mask);
    let best = (1..sizes.len()).fold(0usize, |b, i| if b == 0 || sizes[i] > sizes[b] { i } else { b });
    label.mapv(|l| best != 0 && l as usize == best)
}

/// Fills background regions not connected to the image border.
pub fn fill_holes(mask: ArrayView2<'_, bool>) -> Array2<bool> {
    let background = mask.mapv(|v| !v);
    let (label, sizes) = components(background.view());
    let (h, w) = mask.dim();
    let mut outside = vec![false; sizes.len()];
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && label[(y, x)] != 0 {
                outside[label[(y, x)] as usize] = true;
            }
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| mask[(y, x)] || !outside[label[(y, x)] as usize])
}

/// Per slice: threshold, keep the largest component, fill holes.
pub fn brain_mask_from_mip(mip: &MipVolume, threshold: f64) -> BrainMask {
    let (s, h, w) = mip.0.dim();
    let mut out = Array3::from_elem((s, h, w), false);
    for z in 0..s {
        let raw = mip.0.slice(s![z, .., ..]).mapv(|v| v as f64 > threshold);
        let cleaned = fill_holes(largest_component(raw.view()).view());
        out.slice_mut(s![z, .., ..]).assign(&cleaned);
    }
    BrainMask(out)
}

/// Argmax labels inside the mask, healthy outside. `probs` is `(H, W, 3)`;
/// ties go to the lower class index.
pub fn postprocess(probs: ArrayView3<'_, f32>, mask: ArrayView2<'_, bool>) -> Result<Array2<u8>> {
    let (h, w, c) = probs.dim();
    if mask.dim() != (h, w) || c == 0 {
        return Err(InferError::Shape(format!("probabilities {:?} vs mask {:?}", probs.dim(), mask.dim())));
    }
    let mut out = Array2::zeros((h, w));
    Zip::indexed(&mut out).and(&mask).for_each(|(y, x), o, &inside| {
        if inside {
            let mut best = 0;
            for k in 1..c {
                if probs[(y, x, k)] > probs[(y, x, best)] {
                    best = k;
                }
            }
            *o = best as u8;
        }
    });
    Ok(out)
}

/// Predicts every slice with dropout off and stacks the labels.
pub fn predict_patient(model: &mut ModelGraph, study: &PatientStudy, threshold: f64) -> Result<LabelVolume> {
    if model.config().inputs.nihss && study.nihss.is_none() {
        return Err(InferError::MissingNihss(study.patient_id.clone()));
    }
    let mask = brain_mask_from_mip(&study.mip, threshold);
    let (s, h, w) = study.dims();
    let mut labels = Array3::zeros((s, h, w));
    for (z, sample) in slice_samples_unlabelled(study).iter().enumerate() {
        let probs = model.forward(&make_input(&[sample]), false)?;
        let sl = postprocess(probs.slice(s![0, .., .., ..]), mask.slice(z))?;
        labels.slice_mut(s![z, .., ..]).assign(&sl);
    }
    Ok(LabelVolume::new(labels).expect("argmax over three classes"))
}

//! Tversky index and the focal Tversky objective.
//!
//! Probabilities and one-hot targets are `(pixels, classes)` arrays in `f64`.
//! All sums run over every pixel handed in, so a batch is pooled.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SeverityGroup;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: probabilities {probs:?}, targets {targets:?}")]
    ShapeMismatch { probs: Vec<usize>, targets: Vec<usize> },
    #[error("probability {value} at pixel {pixel}, class {class} lies outside [0, 1]")]
    OutOfRange { pixel: usize, class: usize, value: f64 },
    #[error("class index {0} out of range")]
    BadClass(usize),
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub gamma: f64,
    /// Weight of false negatives.
    pub alpha: f64,
    /// Weight of false positives.
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_class_weights")]
    pub class_weights: [f64; NUM_CLASSES],
    /// Extra weight on penumbra and core terms for Non-LVO samples.
    #[serde(default = "default_multiplier")]
    pub nonlvo_multiplier: f64,
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_class_weights() -> [f64; NUM_CLASSES] {
    [1.0; NUM_CLASSES]
}

fn default_multiplier() -> f64 {
    1.5
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::new(4.0 / 3.0, 0.7, 0.3)
    }
}

impl LossSpec {
    pub fn new(gamma: f64, alpha: f64, beta: f64) -> Self {
        LossSpec {
            gamma,
            alpha,
            beta,
            epsilon: default_epsilon(),
            class_weights: default_class_weights(),
            nonlvo_multiplier: default_multiplier(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LossError::InvalidSpec(m));
        if !(1.0..=3.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [1, 3]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("alpha {} / beta {} outside [0, 1]", self.alpha, self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad(format!("class weights {:?} must be positive", self.class_weights));
        }
        if !(self.nonlvo_multiplier >= 1.0 && self.nonlvo_multiplier.is_finite()) {
            return bad(format!("nonlvo_multiplier {} below 1", self.nonlvo_multiplier));
        }
        Ok(())
    }

    /// Effective weight of class `c` for a sample of `group`.
    pub fn weight(&self, class: usize, group: SeverityGroup) -> f64 {
        let w = self.class_weights[class];
        if group == SeverityGroup::NonLvo && class > 0 {
            w * self.nonlvo_multiplier
        } else {
            w
        }
    }
}

fn check(probs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<()> {
    if probs.dim() != targets.dim() {
        return Err(LossError::ShapeMismatch {
            probs: probs.shape().to_vec(),
            targets: targets.shape().to_vec(),
        });
    }
    for ((pixel, class), &value) in probs.indexed_iter() {
        if !(0.0..=1.0).contains(&value) {
            return Err(LossError::OutOfRange { pixel, class, value });
        }
    }
    Ok(())
}

struct Counts {
    tp: f64,
    fn_: f64,
    fp: f64,
}

fn counts(p: ndarray::ArrayView1<'_, f64>, g: ndarray::ArrayView1<'_, f64>) -> Counts {
    let mut c = Counts { tp: 0.0, fn_: 0.0, fp: 0.0 };
    for (&pi, &gi) in p.iter().zip(g.iter()) {
        c.tp += pi * gi;
        c.fn_ += (1.0 - pi) * gi;
        c.fp += pi * (1.0 - gi);
    }
    c
}

pub fn tversky_index(
    probs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    class: usize,
    alpha: f64,
    beta: f64,
    epsilon: f64,
) -> Result<f64> {
    check(probs, targets)?;
    if class >= probs.ncols() {
        return Err(LossError::BadClass(class));
    }
    let c = counts(probs.column(class), targets.column(class));
    Ok((c.tp + epsilon) / (c.tp + alpha * c.fn_ + beta * c.fp + epsilon))
}

pub fn focal_tversky_loss(
    probs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    spec: &LossSpec,
    group: SeverityGroup,
) -> Result<f64> {
    focal_tversky_with_grad(probs, targets, spec, group).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every probability entry.
pub fn focal_tversky_with_grad(
    probs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    spec: &LossSpec,
    group: SeverityGroup,
) -> Result<(f64, Array2<f64>)> {
    check(probs, targets)?;
    spec.validate()?;
    if probs.ncols() != NUM_CLASSES {
        return Err(LossError::BadClass(probs.ncols()));
    }
    let (alpha, beta, eps) = (spec.alpha, spec.beta, spec.epsilon);
    let inv_gamma = 1.0 / spec.gamma;
    let mut grad = Array2::zeros(probs.dim());
    let mut loss = 0.0;
    for c in 0..NUM_CLASSES {
        let (p, g) = (probs.column(c), targets.column(c));
        let k = counts(p, g);
        let num = k.tp + eps;
        let den = k.tp + alpha * k.fn_ + beta * k.fp + eps;
        let ti = num / den;
        let w = spec.weight(c, group);
        let gap = 1.0 - ti;
        loss += w * gap.max(0.0).powf(inv_gamma);
        let dl_dti = if gap > 0.0 {
            -w * inv_gamma * gap.powf(inv_gamma - 1.0)
        } else if inv_gamma == 1.0 {
            -w
        } else {
            0.0
        };
        let den2 = den * den;
        for (d, &gv) in grad.column_mut(c).iter_mut().zip(g.iter()) {
            let dden = gv * (1.0 - alpha) + beta * (1.0 - gv);
            *d = dl_dti * (gv * den - num * dden) / den2;
        }
    }
    Ok((loss, grad))
}

/// Loss over a batch whose samples may belong to different groups: each
/// group's pixels are pooled separately and the group losses are weighted by
/// their share of samples. `groups[i]` labels the `i`-th block of
/// `pixels_per_sample` rows.
pub fn batch_focal_tversky(
    probs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    spec: &LossSpec,
    groups: &[SeverityGroup],
    pixels_per_sample: usize,
) -> Result<(f64, Array2<f64>)> {
    check(probs, targets)?;
    if groups.len() * pixels_per_sample != probs.nrows() {
        return Err(LossError::ShapeMismatch {
            probs: probs.shape().to_vec(),
            targets: vec![groups.len() * pixels_per_sample, NUM_CLASSES],
        });
    }
    let n = groups.len() as f64;
    let mut grad = Array2::zeros(probs.dim());
    let mut loss = 0.0;
    let mut distinct: Vec<SeverityGroup> = groups.to_vec();
    distinct.sort();
    distinct.dedup();
    for g in distinct {
        let members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        let rows: Vec<usize> = members
            .iter()
            .flat_map(|&i| i * pixels_per_sample..(i + 1) * pixels_per_sample)
            .collect();
        let p = probs.select(Axis(0), &rows);
        let t = targets.select(Axis(0), &rows);
        let share = members.len() as f64 / n;
        let (l, dg) = focal_tversky_with_grad(p.view(), t.view(), spec, g)?;
        loss += share * l;
        for (k, &r) in rows.iter().enumerate() {
            for c in 0..NUM_CLASSES {
                grad[(r, c)] = share * dg[(k, c)];
            }
        }
    }
    Ok((loss, grad))
}

/// One-hot encoding of integer labels as `(pixels, classes)`.
pub fn one_hot(labels: &[u8]) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), NUM_CLASSES));
    for (i, &l) in labels.iter().enumerate() {
        out[(i, l as usize)] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn recall_and_dice_by_hand() {
        // pixels (0,0),(0,1),(1,0),(1,1); class-1 truth at the first two,
        // predicted at (0,0) and (1,0)
        let g = array![[0., 1.], [0., 1.], [1., 0.], [1., 0.]];
        let p = array![[0., 1.], [1., 0.], [0., 1.], [1., 0.]];
        let dice = tversky_index(p.view(), g.view(), 1, 0.5, 0.5, 1e-12).unwrap();
        assert!((dice - 0.5).abs() < 1e-9);
        let recall = tversky_index(p.view(), g.view(), 1, 1.0, 0.0, 1e-12).unwrap();
        assert!((recall - 0.5).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let g = one_hot(&[0, 1, 2, 2, 0]);
        let l = focal_tversky_loss(g.view(), g.view(), &LossSpec::default(), SeverityGroup::Lvo).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn exponent_rule() {
        // a single class at TI = 0.5 contributes 0.5^(3/4)
        let v: f64 = 0.5f64.powf(1.0 / (4.0 / 3.0));
        assert!((v - 0.59460).abs() < 1e-5);
    }

    #[test]
    fn rejects_out_of_range() {
        let p = array![[1.2, 0.0, 0.0]];
        let err = tversky_index(p.view(), p.view(), 0, 0.5, 0.5, 1e-6).unwrap_err();
        assert!(matches!(err, LossError::OutOfRange { .. }));
    }
}

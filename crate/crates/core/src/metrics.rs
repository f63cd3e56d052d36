//! Dice, Hausdorff distance and volume difference, with per-group
//! aggregation and the inter-observer comparison.

use std::fmt::{self, Write as _};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabelVolume, SeverityGroup, Spacing, TissueClass};
use crate::distance::squared_edt;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize, usize), (usize, usize, usize)),
    #[error("patient `{patient}` lacks annotator volume `{annotator}`")]
    MissingAnnotator { patient: String, annotator: String },
    #[error("nothing to aggregate")]
    Empty,
    #[error("report I/O: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::Shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` over the volume; 1 when both are empty.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, class: TissueClass) -> Result<f64> {
    check(pred, gt)?;
    let c = class as u8;
    let (mut both, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
        let (ip, ig) = (p == c, g == c);
        np += usize::from(ip);
        ng += usize::from(ig);
        both += usize::from(ip && ig);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (np + ng) as f64)
}

fn axis_spacing(s: Spacing) -> [f64; 3] {
    [s.slice_mm, s.row_mm, s.col_mm]
}

/// Distances (mm) from every voxel of `from` to the nearest voxel of `to`.
fn directed(from: &Array3<bool>, to: &Array3<bool>, spacing: Spacing) -> Vec<f64> {
    let d2 = squared_edt(to, axis_spacing(spacing));
    from.iter().zip(d2.iter()).filter(|(&f, _)| f).map(|(_, &d)| d.sqrt()).collect()
}

fn class_sets(pred: &LabelVolume, gt: &LabelVolume, class: TissueClass) -> Option<(Array3<bool>, Array3<bool>)> {
    let p = pred.mask(class);
    let g = gt.mask(class);
    if !p.iter().any(|&v| v) || !g.iter().any(|&v| v) {
        return None;
    }
    Some((p, g))
}

/// Symmetric Hausdorff distance in mm between the class voxel centres;
/// `None` when either set is empty.
pub fn hausdorff(pred: &LabelVolume, gt: &LabelVolume, class: TissueClass, spacing: Spacing) -> Result<Option<f64>> {
    check(pred, gt)?;
    Ok(class_sets(pred, gt, class).map(|(p, g)| {
        let a = directed(&p, &g, spacing).into_iter().fold(0.0, f64::max);
        let b = directed(&g, &p, spacing).into_iter().fold(0.0, f64::max);
        a.max(b)
    }))
}

/// Percentile Hausdorff: the larger of the two directed `percentile`-th
/// distances (nearest rank).
pub fn hausdorff_percentile(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class: TissueClass,
    spacing: Spacing,
    percentile: f64,
) -> Result<Option<f64>> {
    check(pred, gt)?;
    let rank = |mut d: Vec<f64>| {
        d.sort_by(|a, b| a.total_cmp(b));
        let k = ((percentile / 100.0 * d.len() as f64).ceil() as usize).clamp(1, d.len());
        d[k - 1]
    };
    Ok(class_sets(pred, gt, class).map(|(p, g)| rank(directed(&p, &g, spacing)).max(rank(directed(&g, &p, spacing)))))
}

/// `|count_g − count_p|` times the voxel volume, in ml.
pub fn volume_difference(pred: &LabelVolume, gt: &LabelVolume, class: TissueClass, spacing: Spacing) -> Result<f64> {
    check(pred, gt)?;
    let n = pred.count(class).abs_diff(gt.count(class)) as f64;
    Ok(n * spacing.row_mm * spacing.col_mm * spacing.slice_mm / 1000.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Hausdorff,
    DeltaV,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Hausdorff, Metric::DeltaV];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Hausdorff => "HD (mm)",
            Metric::DeltaV => "dV (ml)",
        }
    }
}

/// Which Hausdorff variant [`evaluate_patient`] reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum HausdorffMode {
    #[default]
    Exact,
    Percentile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub hausdorff_mm: Option<f64>,
    pub delta_v_ml: f64,
}

impl ClassMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Dice => Some(self.dice),
            Metric::Hausdorff => self.hausdorff_mm,
            Metric::DeltaV => Some(self.delta_v_ml),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub group: SeverityGroup,
    pub penumbra: ClassMetrics,
    pub core: ClassMetrics,
}

impl PatientMetrics {
    pub fn class(&self, class: TissueClass) -> &ClassMetrics {
        match class {
            TissueClass::Core => &self.core,
            _ => &self.penumbra,
        }
    }
}

pub fn evaluate_patient(
    patient_id: &str,
    group: SeverityGroup,
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: Spacing,
    mode: HausdorffMode,
) -> Result<PatientMetrics> {
    let one = |class| -> Result<ClassMetrics> {
        let hd = match mode {
            HausdorffMode::Exact => hausdorff(pred, gt, class, spacing)?,
            HausdorffMode::Percentile(p) => hausdorff_percentile(pred, gt, class, spacing, p)?,
        };
        Ok(ClassMetrics {
            dice: dice(pred, gt, class)?,
            hausdorff_mm: hd,
            delta_v_ml: volume_difference(pred, gt, class, spacing)?,
        })
    };
    Ok(PatientMetrics {
        patient_id: patient_id.to_string(),
        group,
        penumbra: one(TissueClass::Penumbra)?,
        core: one(TissueClass::Core)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupKey {
    #[serde(rename = "LVO")]
    Lvo,
    #[serde(rename = "Non-LVO")]
    NonLvo,
    #[serde(rename = "WIS")]
    Wis,
    All,
}

impl GroupKey {
    pub fn of(g: SeverityGroup) -> Self {
        match g {
            SeverityGroup::Lvo => GroupKey::Lvo,
            SeverityGroup::NonLvo => GroupKey::NonLvo,
            SeverityGroup::Wis => GroupKey::Wis,
        }
    }

    fn contains(self, g: SeverityGroup) -> bool {
        self == GroupKey::All || self == GroupKey::of(g)
    }

    pub fn label(self) -> &'static str {
        match self {
            GroupKey::Lvo => "LVO",
            GroupKey::NonLvo => "Non-LVO",
            GroupKey::Wis => "WIS",
            GroupKey::All => "All",
        }
    }
}

/// Whether `metric` is reported for patients of `group`: patients without
/// stroke carry no lesion, so only the volume difference is meaningful.
pub fn reported(group: SeverityGroup, metric: Metric) -> bool {
    group != SeverityGroup::Wis || metric == Metric::DeltaV
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: GroupKey,
    pub class: TissueClass,
    pub metric: Metric,
    pub mean: f64,
    /// Population standard deviation over patients.
    pub sd: f64,
    pub n: usize,
    /// Patients whose value was undefined (empty sets for Hausdorff).
    pub undefined: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(per_patient: &[PatientMetrics]) -> Result<MetricsReport> {
    if per_patient.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut rows = Vec::new();
    let keys = [GroupKey::Lvo, GroupKey::NonLvo, GroupKey::Wis, GroupKey::All];
    for key in keys {
        let members: Vec<&PatientMetrics> = per_patient.iter().filter(|p| key.contains(p.group)).collect();
        if members.is_empty() {
            continue;
        }
        for class in TissueClass::LESIONS {
            for metric in Metric::ALL {
                let eligible: Vec<&&PatientMetrics> = members.iter().filter(|p| reported(p.group, metric)).collect();
                if eligible.is_empty() {
                    continue;
                }
                let values: Vec<f64> = eligible.iter().filter_map(|p| p.class(class).get(metric)).collect();
                let (mean, sd) = mean_sd(&values);
                rows.push(ReportRow {
                    group: key,
                    class,
                    metric,
                    mean,
                    sd,
                    n: values.len(),
                    undefined: eligible.len() - values.len(),
                });
            }
        }
    }
    Ok(MetricsReport { rows })
}

impl MetricsReport {
    pub fn get(&self, group: GroupKey, class: TissueClass, metric: Metric) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.group == group && r.class == class && r.metric == metric)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| MetricsError::Io(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| MetricsError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| MetricsError::Io(e.to_string()))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| MetricsError::Io(e.to_string()))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| MetricsError::Io(e.to_string()))?;
        Ok(MetricsReport { rows })
    }

    /// `mean±sd` cell, or `-` when the metric is not reported.
    pub fn cell(&self, group: GroupKey, class: TissueClass, metric: Metric) -> String {
        match self.get(group, class, metric) {
            Some(r) if r.n > 0 => format!("{:.2}±{:.2}", r.mean, r.sd),
            _ => "-".to_string(),
        }
    }

    /// One line per group, columns per metric and class.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "group");
        for m in Metric::ALL {
            for c in TissueClass::LESIONS {
                let _ = write!(out, " {:>16}", format!("{} {}", m.label(), c.label()));
            }
        }
        out.push('\n');
        for key in [GroupKey::Lvo, GroupKey::NonLvo, GroupKey::Wis, GroupKey::All] {
            if !self.rows.iter().any(|r| r.group == key) {
                continue;
            }
            let _ = write!(out, "{:<8}", key.label());
            for m in Metric::ALL {
                for c in TissueClass::LESIONS {
                    let _ = write!(out, " {:>16}", self.cell(key, c, m));
                }
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Volumes of one patient for the inter-observer comparison.
#[derive(Clone, Debug)]
pub struct ObserverCase {
    pub patient_id: String,
    pub group: SeverityGroup,
    pub spacing: Spacing,
    pub pred: LabelVolume,
    /// Truth produced jointly by both annotators, when available.
    pub joint: Option<LabelVolume>,
    pub truth_a: Option<LabelVolume>,
    pub truth_b: Option<LabelVolume>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pairing {
    PredVsJoint,
    AVsB,
    PredVsA,
    PredVsB,
}

impl Pairing {
    pub const ALL: [Pairing; 4] = [Pairing::PredVsJoint, Pairing::AVsB, Pairing::PredVsA, Pairing::PredVsB];

    pub fn label(self) -> &'static str {
        match self {
            Pairing::PredVsJoint => "pred vs (A & B)",
            Pairing::AVsB => "A vs B",
            Pairing::PredVsA => "pred vs A",
            Pairing::PredVsB => "pred vs B",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterObserverReport {
    pub pairings: Vec<(Pairing, Vec<PatientMetrics>, MetricsReport)>,
}

impl InterObserverReport {
    pub fn report(&self, pairing: Pairing) -> Option<&MetricsReport> {
        self.pairings.iter().find(|(p, _, _)| *p == pairing).map(|(_, _, r)| r)
    }

    pub fn patients(&self, pairing: Pairing) -> Option<&[PatientMetrics]> {
        self.pairings.iter().find(|(p, _, _)| *p == pairing).map(|(_, v, _)| v.as_slice())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (p, _, r) in &self.pairings {
            let _ = writeln!(out, "== {} ==", p.label());
            out.push_str(&r.to_table());
        }
        out
    }
}

pub fn interobserver_report(cases: &[ObserverCase], mode: HausdorffMode) -> Result<InterObserverReport> {
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per: Vec<Vec<PatientMetrics>> = vec![Vec::new(); Pairing::ALL.len()];
    for c in cases {
        let missing = |a: &str| MetricsError::MissingAnnotator { patient: c.patient_id.clone(), annotator: a.into() };
        let a = c.truth_a.as_ref().ok_or_else(|| missing("A"))?;
        let b = c.truth_b.as_ref().ok_or_else(|| missing("B"))?;
        check(&c.pred, a)?;
        check(a, b)?;
        let consensus;
        let joint = match &c.joint {
            Some(j) => j,
            None => {
                consensus = LabelVolume::consensus(a, b);
                &consensus
            }
        };
        let pairs = [(&c.pred, joint), (a, b), (&c.pred, a), (&c.pred, b)];
        for (slot, (x, y)) in per.iter_mut().zip(pairs) {
            slot.push(evaluate_patient(&c.patient_id, c.group, x, y, c.spacing, mode)?);
        }
    }
    let pairings = Pairing::ALL
        .iter()
        .zip(per)
        .map(|(&p, v)| {
            let r = aggregate(&v)?;
            Ok((p, v, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterObserverReport { pairings })
}

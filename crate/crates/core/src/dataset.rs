//! Patient studies, the on-disk manifest, image decoding and stratified
//! train/validation/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::{s, Array3, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_VERSION: &str = "1";
pub const MAX_SLICES: usize = 64;
pub const MAX_NIHSS: u8 = 42;
/// Slice counts seen in clinical studies; outside this range only a warning is logged.
pub const TYPICAL_SLICES: (usize, usize) = (13, 27);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unsupported manifest format_version `{0}`")]
    UnsupportedVersion(String),
    #[error("duplicate patient id `{0}`")]
    DuplicateId(String),
    #[error("patient `{patient}`: field `{field}` references missing file {path}")]
    DanglingReference {
        patient: String,
        field: String,
        path: PathBuf,
    },
    #[error("patient `{patient}`: invalid field `{field}`: {reason}")]
    InvalidField {
        patient: String,
        field: String,
        reason: String,
    },
    #[error("unknown patient id `{0}`")]
    UnknownPatient(String),
    #[error("patient `{patient}`: dimension mismatch in `{field}`: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        patient: String,
        field: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("patient `{patient}`: `{field}` contains label value {value} (allowed: 0, 1, 2)")]
    InvalidLabel {
        patient: String,
        field: String,
        value: u8,
    },
    #[error("cannot decode image {path}: {reason}")]
    Undecodable { path: PathBuf, reason: String },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Vessel-occlusion severity group of a patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeverityGroup {
    #[serde(rename = "LVO")]
    Lvo,
    #[serde(rename = "NON_LVO")]
    NonLvo,
    #[serde(rename = "WIS")]
    Wis,
}

impl SeverityGroup {
    pub const ALL: [SeverityGroup; 3] = [SeverityGroup::Lvo, SeverityGroup::NonLvo, SeverityGroup::Wis];

    pub fn label(self) -> &'static str {
        match self {
            SeverityGroup::Lvo => "LVO",
            SeverityGroup::NonLvo => "Non-LVO",
            SeverityGroup::Wis => "WIS",
        }
    }
}

impl fmt::Display for SeverityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-voxel tissue class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TissueClass {
    Healthy = 0,
    Penumbra = 1,
    Core = 2,
}

impl TissueClass {
    pub const ALL: [TissueClass; 3] = [TissueClass::Healthy, TissueClass::Penumbra, TissueClass::Core];
    pub const LESIONS: [TissueClass; 2] = [TissueClass::Penumbra, TissueClass::Core];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            TissueClass::Healthy => "healthy",
            TissueClass::Penumbra => "penumbra",
            TissueClass::Core => "core",
        }
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row_mm: f64,
    pub col_mm: f64,
    pub slice_mm: f64,
}

impl Spacing {
    pub fn new(row_mm: f64, col_mm: f64, slice_mm: f64) -> Self {
        Spacing { row_mm, col_mm, slice_mm }
    }

    pub fn is_valid(&self) -> bool {
        [self.row_mm, self.col_mm, self.slice_mm]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    /// Voxel volume in millilitres.
    pub fn voxel_ml(&self) -> f64 {
        self.row_mm * self.col_mm * self.slice_mm / 1000.0
    }
}

/// Integer class labels, `(slices, height, width)`, values in {0, 1, 2}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume(Array3<u8>);

impl LabelVolume {
    /// Fails with the first offending value.
    pub fn new(labels: Array3<u8>) -> std::result::Result<Self, u8> {
        match labels.iter().find(|&&v| v > 2) {
            Some(&bad) => Err(bad),
            None => Ok(LabelVolume(labels)),
        }
    }

    pub fn healthy(dims: (usize, usize, usize)) -> Self {
        LabelVolume(Array3::zeros(dims))
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<u8> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn count(&self, class: TissueClass) -> usize {
        let c = class as u8;
        self.0.iter().filter(|&&v| v == c).count()
    }

    pub fn mask(&self, class: TissueClass) -> Array3<bool> {
        let c = class as u8;
        self.0.mapv(|v| v == c)
    }

    /// Voxelwise agreement of two annotations: a voxel keeps its class only
    /// where both agree, otherwise it becomes healthy.
    pub fn consensus(a: &LabelVolume, b: &LabelVolume) -> LabelVolume {
        let mut out = a.0.clone();
        ndarray::Zip::from(&mut out).and(&b.0).for_each(|o, &v| {
            if *o != v {
                *o = 0;
            }
        });
        LabelVolume(out)
    }
}

/// Colour-coded parametric maps, each `(slices, height, width, 3)` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricMapStack {
    pub cbf: Array4<f32>,
    pub cbv: Array4<f32>,
    pub ttp: Array4<f32>,
    pub tmax: Array4<f32>,
}

impl ParametricMapStack {
    pub fn dims(&self) -> (usize, usize, usize) {
        let (s, h, w, _) = self.cbf.dim();
        (s, h, w)
    }

    /// In the fixed order CBF, CBV, TTP, TMax.
    pub fn maps(&self) -> [&Array4<f32>; 4] {
        [&self.cbf, &self.cbv, &self.ttp, &self.tmax]
    }
}

/// Grayscale maximum-intensity projection, `(slices, height, width)` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MipVolume(pub Array3<f32>);

#[derive(Clone, Debug, PartialEq)]
pub struct PatientStudy {
    pub patient_id: String,
    pub group: SeverityGroup,
    pub nihss: Option<u8>,
    pub maps: ParametricMapStack,
    pub mip: MipVolume,
    pub spacing: Spacing,
    pub ground_truth: Option<LabelVolume>,
    pub annotator_truths: BTreeMap<String, LabelVolume>,
}

impl PatientStudy {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.maps.dims()
    }

    pub fn slices(&self) -> usize {
        self.dims().0
    }

    /// Checks every dimensional and value invariant of the study.
    pub fn validate(&self) -> Result<()> {
        let id = &self.patient_id;
        let (s, h, w) = self.dims();
        if s == 0 || s > MAX_SLICES {
            return Err(DatasetError::InvalidField {
                patient: id.clone(),
                field: "slices".into(),
                reason: format!("{s} slices, allowed 1..={MAX_SLICES}"),
            });
        }
        let names = ["cbf", "cbv", "ttp", "tmax"];
        for (name, m) in names.iter().zip(self.maps.maps()) {
            if m.dim() != (s, h, w, 3) {
                let d = m.dim();
                return Err(dim_err(id, name, &[s, h, w, 3], &[d.0, d.1, d.2, d.3]));
            }
        }
        if self.mip.0.dim() != (s, h, w) {
            let d = self.mip.0.dim();
            return Err(dim_err(id, "mip", &[s, h, w], &[d.0, d.1, d.2]));
        }
        let labels = self
            .ground_truth
            .iter()
            .map(|g| ("gt".to_string(), g))
            .chain(self.annotator_truths.iter().map(|(k, v)| (format!("annotators.{k}"), v)));
        for (name, lv) in labels {
            if lv.dims() != (s, h, w) {
                let d = lv.dims();
                return Err(dim_err(id, &name, &[s, h, w], &[d.0, d.1, d.2]));
            }
        }
        if !self.spacing.is_valid() {
            return Err(DatasetError::InvalidField {
                patient: id.clone(),
                field: "spacing_mm".into(),
                reason: format!("{:?} must be strictly positive", self.spacing),
            });
        }
        if let Some(n) = self.nihss {
            if n > MAX_NIHSS {
                return Err(DatasetError::InvalidField {
                    patient: id.clone(),
                    field: "nihss".into(),
                    reason: format!("{n} exceeds {MAX_NIHSS}"),
                });
            }
        }
        Ok(())
    }
}

fn dim_err(patient: &str, field: &str, expected: &[usize], got: &[usize]) -> DatasetError {
    DatasetError::DimensionMismatch {
        patient: patient.to_string(),
        field: field.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

/// One patient entry of the manifest. Paths are relative to the manifest's
/// directory unless absolute, ordered caudal to cranial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub group: SeverityGroup,
    pub nihss: Option<u8>,
    pub spacing_mm: [f64; 3],
    pub cbf: Vec<PathBuf>,
    pub cbv: Vec<PathBuf>,
    pub ttp: Vec<PathBuf>,
    pub tmax: Vec<PathBuf>,
    pub mip: Vec<PathBuf>,
    pub gt: Option<Vec<PathBuf>>,
    pub annotators: Option<BTreeMap<String, Vec<PathBuf>>>,
}

impl PatientRecord {
    pub fn spacing(&self) -> Spacing {
        Spacing::new(self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2])
    }

    fn path_fields(&self) -> Vec<(String, &[PathBuf])> {
        let mut out: Vec<(String, &[PathBuf])> = vec![
            ("cbf".into(), &self.cbf),
            ("cbv".into(), &self.cbv),
            ("ttp".into(), &self.ttp),
            ("tmax".into(), &self.tmax),
            ("mip".into(), &self.mip),
        ];
        if let Some(gt) = &self.gt {
            out.push(("gt".into(), gt));
        }
        if let Some(ann) = &self.annotators {
            for (k, v) in ann {
                out.push((format!("annotators.{k}"), v));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub patients: Vec<PatientRecord>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(patients: Vec<PatientRecord>, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            format_version: MANIFEST_VERSION.to_string(),
            patients,
            root: root.into(),
        }
    }

    pub fn record(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Structural checks: version, unique ids, value ranges and that every
    /// referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(DatasetError::UnsupportedVersion(self.format_version.clone()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.patients {
            if !seen.insert(p.id.as_str()) {
                return Err(DatasetError::DuplicateId(p.id.clone()));
            }
            if !p.spacing().is_valid() {
                return Err(DatasetError::InvalidField {
                    patient: p.id.clone(),
                    field: "spacing_mm".into(),
                    reason: format!("{:?} must be strictly positive", p.spacing_mm),
                });
            }
            if let Some(n) = p.nihss {
                if n > MAX_NIHSS {
                    return Err(DatasetError::InvalidField {
                        patient: p.id.clone(),
                        field: "nihss".into(),
                        reason: format!("{n} exceeds {MAX_NIHSS}"),
                    });
                }
            }
            for (field, paths) in p.path_fields() {
                if paths.is_empty() || paths.len() > MAX_SLICES {
                    return Err(DatasetError::InvalidField {
                        patient: p.id.clone(),
                        field,
                        reason: format!("{} slices, allowed 1..={MAX_SLICES}", paths.len()),
                    });
                }
                for path in paths {
                    if !self.resolve(path).is_file() {
                        return Err(DatasetError::DanglingReference {
                            patient: p.id.clone(),
                            field,
                            path: path.clone(),
                        });
                    }
                }
            }
            let n = p.cbf.len();
            if !(TYPICAL_SLICES.0..=TYPICAL_SLICES.1).contains(&n) {
                log::warn!("patient `{}` has {n} slices (clinical studies have {}-{})", p.id, TYPICAL_SLICES.0, TYPICAL_SLICES.1);
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Maps an integer sample to [0, 1] by the bit depth's maximum value.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

pub fn normalize_u16(v: u16) -> f32 {
    v as f32 / 65535.0
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| DatasetError::Undecodable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_color_slice(path: &Path) -> Result<Array3<f32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageRgb8(b) => b.into_raw().into_iter().map(normalize_u8).collect(),
        DynamicImage::ImageRgb16(b) => b.into_raw().into_iter().map(normalize_u16).collect(),
        other => {
            return Err(DatasetError::Undecodable {
                path: path.to_path_buf(),
                reason: format!("expected 8- or 16-bit RGB, found {:?}", other.color()),
            })
        }
    };
    Ok(Array3::from_shape_vec((h, w, 3), data).expect("decoder buffer size"))
}

fn read_gray_slice(path: &Path) -> Result<ndarray::Array2<f32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(normalize_u8).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(normalize_u16).collect(),
        other => {
            return Err(DatasetError::Undecodable {
                path: path.to_path_buf(),
                reason: format!("expected 8- or 16-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    Ok(ndarray::Array2::from_shape_vec((h, w), data).expect("decoder buffer size"))
}

fn read_label_slice(path: &Path) -> Result<ndarray::Array2<u8>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => Ok(ndarray::Array2::from_shape_vec((h, w), b.into_raw()).expect("decoder buffer size")),
        other => Err(DatasetError::Undecodable {
            path: path.to_path_buf(),
            reason: format!("label rasters must be 8-bit grayscale, found {:?}", other.color()),
        }),
    }
}

fn stack_color(manifest: &DatasetManifest, id: &str, field: &str, paths: &[PathBuf], hw: Option<(usize, usize)>) -> Result<Array4<f32>> {
    let mut slices = Vec::with_capacity(paths.len());
    for p in paths {
        let sl = read_color_slice(&manifest.resolve(p))?;
        let (h, w, _) = sl.dim();
        let expect = hw.unwrap_or_else(|| slices.first().map(|s: &Array3<f32>| (s.dim().0, s.dim().1)).unwrap_or((h, w)));
        if (h, w) != expect {
            return Err(dim_err(id, field, &[expect.0, expect.1], &[h, w]));
        }
        slices.push(sl);
    }
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("uniform slice shapes"))
}

fn stack_gray(manifest: &DatasetManifest, id: &str, field: &str, paths: &[PathBuf], hw: (usize, usize)) -> Result<Array3<f32>> {
    let mut out = Array3::zeros((paths.len(), hw.0, hw.1));
    for (i, p) in paths.iter().enumerate() {
        let sl = read_gray_slice(&manifest.resolve(p))?;
        if sl.dim() != hw {
            return Err(dim_err(id, field, &[hw.0, hw.1], &[sl.dim().0, sl.dim().1]));
        }
        out.slice_mut(s![i, .., ..]).assign(&sl);
    }
    Ok(out)
}

fn stack_labels(manifest: &DatasetManifest, id: &str, field: &str, paths: &[PathBuf], hw: (usize, usize)) -> Result<LabelVolume> {
    let mut out = Array3::zeros((paths.len(), hw.0, hw.1));
    for (i, p) in paths.iter().enumerate() {
        let sl = read_label_slice(&manifest.resolve(p))?;
        if sl.dim() != hw {
            return Err(dim_err(id, field, &[hw.0, hw.1], &[sl.dim().0, sl.dim().1]));
        }
        out.slice_mut(s![i, .., ..]).assign(&sl);
    }
    LabelVolume::new(out).map_err(|value| DatasetError::InvalidLabel {
        patient: id.to_string(),
        field: field.to_string(),
        value,
    })
}

/// Decodes and validates one patient's images.
pub fn load_patient(manifest: &DatasetManifest, id: &str) -> Result<PatientStudy> {
    let rec = manifest
        .record(id)
        .ok_or_else(|| DatasetError::UnknownPatient(id.to_string()))?;
    let n = rec.cbf.len();
    for (field, paths) in rec.path_fields() {
        if paths.len() != n {
            return Err(dim_err(id, &field, &[n], &[paths.len()]));
        }
    }
    let cbf = stack_color(manifest, id, "cbf", &rec.cbf, None)?;
    let hw = (cbf.dim().1, cbf.dim().2);
    let cbv = stack_color(manifest, id, "cbv", &rec.cbv, Some(hw))?;
    let ttp = stack_color(manifest, id, "ttp", &rec.ttp, Some(hw))?;
    let tmax = stack_color(manifest, id, "tmax", &rec.tmax, Some(hw))?;
    let mip = stack_gray(manifest, id, "mip", &rec.mip, hw)?;
    let ground_truth = match &rec.gt {
        Some(paths) => Some(stack_labels(manifest, id, "gt", paths, hw)?),
        None => None,
    };
    let mut annotator_truths = BTreeMap::new();
    if let Some(ann) = &rec.annotators {
        for (name, paths) in ann {
            let lv = stack_labels(manifest, id, &format!("annotators.{name}"), paths, hw)?;
            annotator_truths.insert(name.clone(), lv);
        }
    }
    let study = PatientStudy {
        patient_id: rec.id.clone(),
        group: rec.group,
        nihss: rec.nihss,
        maps: ParametricMapStack { cbf, cbv, ttp, tmax },
        mip: MipVolume(mip),
        spacing: rec.spacing(),
        ground_truth,
        annotator_truths,
    };
    study.validate()?;
    Ok(study)
}

/// Disjoint train/validation/test patient ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    pub fn parts(&self) -> [&[String]; 3] {
        [&self.train, &self.validation, &self.test]
    }

    /// Per-part counts for one severity group.
    pub fn group_counts(&self, manifest: &DatasetManifest, group: SeverityGroup) -> [usize; 3] {
        let count = |ids: &[String]| {
            ids.iter()
                .filter(|id| manifest.record(id).map(|r| r.group) == Some(group))
                .count()
        };
        [count(&self.train), count(&self.validation), count(&self.test)]
    }
}

/// Splits `n` items by `ratios` with the largest-remainder method; ties in
/// the fractional parts go to the earlier part.
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = q.floor() as usize;
    }
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Stratified split: within each severity group the patients (in manifest
/// order) are shuffled with a generator seeded by `seed`, then cut by the
/// largest-remainder sizes.
pub fn split_dataset(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let patients: Vec<(String, SeverityGroup)> = manifest.patients.iter().map(|p| (p.id.clone(), p.group)).collect();
    split_patients(&patients, ratios, seed)
}

/// [`split_dataset`] over `(id, group)` pairs.
pub fn split_patients(patients: &[(String, SeverityGroup)], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitAssignment::default();
    for group in SeverityGroup::ALL {
        let mut ids: Vec<String> = patients
            .iter()
            .filter(|(_, g)| *g == group)
            .map(|(id, _)| id.clone())
            .collect();
        ids.shuffle(&mut rng);
        let [tr, va, _] = largest_remainder(ids.len(), ratios);
        split.train.extend_from_slice(&ids[..tr]);
        split.validation.extend_from_slice(&ids[tr..tr + va]);
        split.test.extend_from_slice(&ids[tr + va..]);
    }
    Ok(split)
}

pub fn save_split(split: &SplitAssignment, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(split).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_split(path: &Path) -> Result<SplitAssignment> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Malformed(e.to_string()))
}

/// One slice of a study as channel-first model inputs.
#[derive(Clone, Debug)]
pub struct SliceInputs {
    /// CBF, CBV, TTP, TMax as `(3, H, W)` planes, flattened.
    pub maps: [Vec<f32>; 4],
    /// MIP replicated to three channels, `(3, H, W)`.
    pub mip: Vec<f32>,
}

fn hwc_to_chw(v: ArrayView2<'_, f32>, h: usize, w: usize) -> Vec<f32> {
    // v is (h*w, 3)
    let mut out = vec![0.0; 3 * h * w];
    for (p, px) in v.outer_iter().enumerate() {
        for c in 0..3 {
            out[c * h * w + p] = px[c];
        }
    }
    out
}

impl PatientStudy {
    pub fn slice_inputs(&self, index: usize) -> SliceInputs {
        let (_, h, w) = self.dims();
        let map = |m: &Array4<f32>| {
            let sl = m.slice(s![index, .., .., ..]);
            let flat = sl.to_shape((h * w, 3)).expect("contiguous slice");
            hwc_to_chw(flat.view(), h, w)
        };
        let maps = [map(&self.maps.cbf), map(&self.maps.cbv), map(&self.maps.ttp), map(&self.maps.tmax)];
        let plane: Vec<f32> = self.mip.0.slice(s![index, .., ..]).iter().copied().collect();
        let mut mip = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            mip.extend_from_slice(&plane);
        }
        SliceInputs { maps, mip }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_reproduces_cohort_totals() {
        assert_eq!(largest_remainder(152, [0.58, 0.20, 0.22]), [88, 30, 34]);
        // per-group rounding, summed, gives the published totals
        let per_group: Vec<[usize; 3]> = [77, 60, 15]
            .iter()
            .map(|&n| largest_remainder(n, [0.58, 0.20, 0.22]))
            .collect();
        let totals = (0..3).map(|i| per_group.iter().map(|g| g[i]).sum::<usize>()).collect::<Vec<_>>();
        assert_eq!(totals, vec![89, 30, 33]);
    }

    #[test]
    fn largest_remainder_by_hand() {
        // 1 × (0.34, 0.33, 0.33): floors 0,0,0; the largest fraction is 0.34
        assert_eq!(largest_remainder(1, [0.34, 0.33, 0.33]), [1, 0, 0]);
        // 10 × (0.5, 0.25, 0.25) = 5, 2.5, 2.5 -> tie goes to validation
        assert_eq!(largest_remainder(10, [0.5, 0.25, 0.25]), [5, 3, 2]);
        assert_eq!(largest_remainder(0, [0.5, 0.25, 0.25]), [0, 0, 0]);
    }

    #[test]
    fn consensus_keeps_agreement_only() {
        let a = LabelVolume::new(Array3::from_shape_vec((1, 1, 4), vec![0, 1, 2, 2]).unwrap()).unwrap();
        let b = LabelVolume::new(Array3::from_shape_vec((1, 1, 4), vec![1, 1, 2, 1]).unwrap()).unwrap();
        assert_eq!(LabelVolume::consensus(&a, &b).labels().as_slice().unwrap(), &[0, 1, 2, 0]);
    }

    #[test]
    fn label_volume_rejects_out_of_range() {
        let raw = Array3::from_shape_vec((1, 1, 3), vec![0, 3, 1]).unwrap();
        assert_eq!(LabelVolume::new(raw), Err(3));
    }
}

//! Deterministic phantom studies with controllable lesion fractions.
//!
//! Each phantom is an elliptical brain per slice. A smooth random field made
//! of Gaussian bumps decides where the lesion grows: the highest-valued brain
//! voxels become lesion, and the highest-valued voxels of the lesion's
//! in-plane interior become core. The four perfusion maps are scalar tissue
//! signatures passed through fixed colour lookup tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    normalize_u16, normalize_u8, DatasetError, DatasetManifest, LabelVolume, MipVolume, ParametricMapStack,
    PatientRecord, PatientStudy, SeverityGroup, Spacing,
};
use crate::distance::squared_edt;

pub const LVO_FRACTIONS: [f64; 3] = [0.931, 0.062, 0.007];
pub const NON_LVO_FRACTIONS: [f64; 3] = [0.976, 0.022, 0.002];
pub const WIS_FRACTIONS: [f64; 3] = [1.0, 0.0, 0.0];
pub const FIELD_OF_VIEW_MM: f64 = 220.0;
pub const SLICE_THICKNESS_MM: f64 = 5.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("core fraction {core} exceeds penumbra fraction {penumbra}")]
    InfeasibleFractions { penumbra: f64, core: f64 },
    #[error("lesion does not fit: {0}")]
    LesionDoesNotFit(String),
    #[error("cannot write {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub fn default_fractions(group: SeverityGroup) -> [f64; 3] {
    match group {
        SeverityGroup::Lvo => LVO_FRACTIONS,
        SeverityGroup::NonLvo => NON_LVO_FRACTIONS,
        SeverityGroup::Wis => WIS_FRACTIONS,
    }
}

/// Inclusive NIHSS range drawn for each group.
pub fn nihss_range(group: SeverityGroup) -> (u8, u8) {
    match group {
        SeverityGroup::Lvo => (8, 25),
        SeverityGroup::NonLvo => (2, 12),
        SeverityGroup::Wis => (0, 4),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub group: SeverityGroup,
    /// Healthy, penumbra and core shares of the brain pixels.
    pub target_fractions: [f64; 3],
    pub noise_level: f64,
    pub seed: u64,
    /// Also produce two perturbed annotator truths, `NR1` and `NR2`.
    #[serde(default)]
    pub annotators: bool,
}

impl PhantomSpec {
    pub fn new(group: SeverityGroup, slices: usize, height: usize, width: usize, seed: u64) -> Self {
        PhantomSpec {
            slices,
            height,
            width,
            group,
            target_fractions: default_fractions(group),
            noise_level: 0.03,
            seed,
            annotators: false,
        }
    }

    /// Fractions after group rules: WIS phantoms never carry a lesion.
    pub fn effective_fractions(&self) -> [f64; 3] {
        if self.group == SeverityGroup::Wis {
            WIS_FRACTIONS
        } else {
            self.target_fractions
        }
    }

    pub fn spacing(&self) -> Spacing {
        Spacing::new(
            FIELD_OF_VIEW_MM / self.height as f64,
            FIELD_OF_VIEW_MM / self.width as f64,
            SLICE_THICKNESS_MM,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.slices > crate::dataset::MAX_SLICES {
            return Err(SynthError::InvalidSpec(format!("slices = {}", self.slices)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(SynthError::InvalidSpec(format!("size {}x{} below 8x8", self.height, self.width)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(SynthError::InvalidSpec(format!("noise_level = {}", self.noise_level)));
        }
        let f = self.effective_fractions();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidSpec(format!("fractions {f:?} must be nonnegative and sum to 1")));
        }
        if f[2] > f[1] {
            return Err(SynthError::InfeasibleFractions { penumbra: f[1], core: f[2] });
        }
        if f[1] + f[2] > 0.5 {
            return Err(SynthError::LesionDoesNotFit(format!("lesion fraction {} above 0.5", f[1] + f[2])));
        }
        Ok(())
    }
}

/// A generated study together with the generator's own brain region.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub study: PatientStudy,
    pub brain: Array3<bool>,
}

/// Colour lookup tables, each mapping [0, 1] to RGB in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMap {
    Jet,
    Hot,
    CoolWarm,
}

impl ColorMap {
    pub fn apply(self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            ColorMap::Jet => {
                let ramp = |x: f64| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
                [ramp(3.0), ramp(2.0), ramp(1.0)]
            }
            ColorMap::Hot => [
                (v * 3.0).min(1.0),
                (v * 3.0 - 1.0).clamp(0.0, 1.0),
                (v * 3.0 - 2.0).clamp(0.0, 1.0),
            ],
            ColorMap::CoolWarm => {
                let (lo, mid, hi) = ([0.23, 0.30, 0.75], [0.87, 0.87, 0.87], [0.71, 0.02, 0.15]);
                let (a, b, t) = if v < 0.5 { (lo, mid, v * 2.0) } else { (mid, hi, v * 2.0 - 1.0) };
                [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
            }
        }
    }
}

/// Tissue signature of one perfusion map: healthy, penumbra and core levels,
/// and the direction in which the peri-lesional halo shifts healthy tissue.
#[derive(Clone, Copy, Debug)]
pub struct MapProfile {
    pub name: &'static str,
    pub levels: [f64; 3],
    pub colormap: ColorMap,
}

pub const MAP_PROFILES: [MapProfile; 4] = [
    MapProfile { name: "cbf", levels: [0.55, 0.30, 0.10], colormap: ColorMap::Jet },
    MapProfile { name: "cbv", levels: [0.50, 0.55, 0.15], colormap: ColorMap::Hot },
    MapProfile { name: "ttp", levels: [0.30, 0.70, 0.85], colormap: ColorMap::CoolWarm },
    MapProfile { name: "tmax", levels: [0.25, 0.75, 0.90], colormap: ColorMap::Jet },
];

const HALO_MM: f64 = 6.0;
const HALO_STRENGTH: f64 = 0.25;
const MIP_FLOOR: f64 = 0.2;

fn quantize_u8(v: f64) -> f32 {
    normalize_u8((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn quantize_u16(v: f64) -> f32 {
    normalize_u16((v.clamp(0.0, 1.0) * 65535.0).round() as u16)
}

struct Bump {
    center: [f64; 3],
    sigma: [f64; 3],
    amp: f64,
}

fn brain_ellipse(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Array3<bool> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let cy = h / 2.0 + rng.random_range(-0.03..0.03) * h;
    let cx = w / 2.0 + rng.random_range(-0.03..0.03) * w;
    let ry = h * rng.random_range(0.38..0.43);
    let rx = w * rng.random_range(0.32..0.37);
    let s = spec.slices as f64;
    Array3::from_shape_fn((spec.slices, spec.height, spec.width), |(z, y, x)| {
        let scale = 0.8 + 0.2 * (std::f64::consts::PI * (z as f64 + 0.5) / s).sin();
        let dy = (y as f64 + 0.5 - cy) / (ry * scale);
        let dx = (x as f64 + 0.5 - cx) / (rx * scale);
        dy * dy + dx * dx <= 1.0
    })
}

fn lesion_field(spec: &PhantomSpec, brain: &Array3<bool>, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let inside: Vec<(usize, usize, usize)> = brain.indexed_iter().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    let (s, h, w) = (spec.slices as f64, spec.height as f64, spec.width as f64);
    let anchor = inside[rng.random_range(0..inside.len())];
    let n_bumps = rng.random_range(2..=4);
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|i| {
            let jitter = if i == 0 { 0.0 } else { 0.12 };
            Bump {
                center: [
                    anchor.0 as f64 + rng.random_range(-1.0..=1.0) * jitter * s,
                    anchor.1 as f64 + rng.random_range(-1.0..=1.0) * jitter * h,
                    anchor.2 as f64 + rng.random_range(-1.0..=1.0) * jitter * w,
                ],
                sigma: [
                    (s * rng.random_range(0.25..0.45)).max(1.0),
                    h * rng.random_range(0.07..0.14),
                    w * rng.random_range(0.07..0.14),
                ],
                amp: if i == 0 { 1.0 } else { rng.random_range(0.3..0.8) },
            }
        })
        .collect();
    Array3::from_shape_fn(brain.dim(), |(z, y, x)| {
        bumps
            .iter()
            .map(|b| {
                let d = [
                    (z as f64 - b.center[0]) / b.sigma[0],
                    (y as f64 - b.center[1]) / b.sigma[1],
                    (x as f64 - b.center[2]) / b.sigma[2],
                ];
                b.amp * (-0.5 * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2])).exp()
            })
            .sum()
    })
}

/// Indices of the `k` largest field values among `candidates`; ties fall to
/// the lower flat index.
fn top_k(field: &Array3<f64>, candidates: &[(usize, usize, usize)], k: usize) -> Vec<(usize, usize, usize)> {
    let mut c = candidates.to_vec();
    c.sort_by(|a, b| field[*b].partial_cmp(&field[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b)));
    c.truncate(k);
    c
}

/// Voxels whose four in-plane neighbours all belong to `set`.
pub fn in_plane_interior(set: &Array3<bool>) -> Array3<bool> {
    let (_, h, w) = set.dim();
    Array3::from_shape_fn(set.dim(), |(z, y, x)| {
        set[(z, y, x)]
            && y > 0
            && x > 0
            && y + 1 < h
            && x + 1 < w
            && set[(z, y - 1, x)]
            && set[(z, y + 1, x)]
            && set[(z, y, x - 1)]
            && set[(z, y, x + 1)]
    })
}

fn smooth_texture(dim: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.05..0.25),
                rng.random_range(0.05..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.3..1.0),
            ]
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w[3]).sum();
    Array3::from_shape_fn(dim, |(z, y, x)| {
        waves
            .iter()
            .map(|wv| wv[3] * (wv[0] * y as f64 + wv[1] * x as f64 + wv[2] + 0.3 * z as f64).sin())
            .sum::<f64>()
            / norm
    })
}

/// Perturbs the lesion boundary: `grow` turns healthy brain neighbours of the
/// lesion into penumbra, otherwise boundary penumbra becomes healthy. Each
/// boundary voxel changes with probability 0.3.
fn annotator_variant(labels: &Array3<u8>, brain: &Array3<bool>, grow: bool, rng: &mut ChaCha8Rng) -> Array3<u8> {
    let (_, h, w) = labels.dim();
    let mut out = labels.clone();
    for ((z, y, x), &v) in labels.indexed_iter() {
        let neighbours = [
            (y > 0).then(|| labels[(z, y - 1, x)]),
            (y + 1 < h).then(|| labels[(z, y + 1, x)]),
            (x > 0).then(|| labels[(z, y, x - 1)]),
            (x + 1 < w).then(|| labels[(z, y, x + 1)]),
        ];
        let flip = rng.random::<f64>() < 0.3;
        if grow && v == 0 && brain[(z, y, x)] && neighbours.iter().any(|n| matches!(n, Some(1 | 2))) && flip {
            out[(z, y, x)] = 1;
        }
        if !grow && v == 1 && neighbours.iter().any(|n| *n == Some(0)) && flip {
            out[(z, y, x)] = 0;
        }
    }
    out
}

/// Generates one phantom study; fully determined by `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = (spec.slices, spec.height, spec.width);
    let brain = brain_ellipse(spec, &mut rng);
    let inside: Vec<(usize, usize, usize)> = brain.indexed_iter().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    if inside.is_empty() {
        return Err(SynthError::LesionDoesNotFit("empty brain region".into()));
    }
    let n_brain = inside.len() as f64;
    let fractions = spec.effective_fractions();
    let n_lesion = ((fractions[1] + fractions[2]) * n_brain).round() as usize;
    let n_core = (fractions[2] * n_brain).round() as usize;

    let field = lesion_field(spec, &brain, &mut rng);
    let mut labels = Array3::<u8>::zeros(dim);
    if n_lesion > 0 {
        let lesion = top_k(&field, &inside, n_lesion);
        let mut lesion_mask = Array3::from_elem(dim, false);
        for &i in &lesion {
            lesion_mask[i] = true;
            labels[i] = 1;
        }
        if n_core > 0 {
            let interior = in_plane_interior(&lesion_mask);
            let candidates: Vec<_> = interior.indexed_iter().filter(|(_, &b)| b).map(|(i, _)| i).collect();
            if candidates.len() < n_core {
                return Err(SynthError::LesionDoesNotFit(format!(
                    "core needs {n_core} voxels but the lesion interior has {}",
                    candidates.len()
                )));
            }
            for i in top_k(&field, &candidates, n_core) {
                labels[i] = 2;
            }
        }
    }

    let spacing = spec.spacing();
    let lesion_mask = labels.mapv(|v| v > 0);
    let dist2 = squared_edt(&lesion_mask, [spacing.slice_mm, spacing.row_mm, spacing.col_mm]);
    let texture = smooth_texture(dim, &mut rng);
    let noise = Normal::new(0.0, spec.noise_level.max(1e-12)).expect("finite noise level");
    let draw = |rng: &mut ChaCha8Rng| if spec.noise_level > 0.0 { noise.sample(rng) } else { 0.0 };

    let mut maps: Vec<Array4<f32>> = Vec::with_capacity(4);
    for profile in MAP_PROFILES {
        let mut rgb = Array4::<f32>::zeros((dim.0, dim.1, dim.2, 3));
        for (idx, &b) in brain.indexed_iter() {
            // Consume noise for every voxel so maps stay aligned across specs.
            let n = draw(&mut rng);
            if !b {
                continue;
            }
            let class = labels[idx] as usize;
            let mut v = profile.levels[class];
            if class == 0 && dist2[idx].is_finite() {
                let halo = (-dist2[idx].sqrt() / HALO_MM).exp();
                v += HALO_STRENGTH * halo * (profile.levels[1] - profile.levels[0]);
            }
            v += 0.05 * texture[idx] + n;
            let c = profile.colormap.apply(v);
            for ch in 0..3 {
                rgb[(idx.0, idx.1, idx.2, ch)] = quantize_u8(c[ch]);
            }
        }
        maps.push(rgb);
    }
    let mut mip = Array3::<f32>::zeros(dim);
    for (idx, &b) in brain.indexed_iter() {
        let n = draw(&mut rng);
        if b {
            mip[idx] = quantize_u16((0.6 + 0.15 * texture[idx] + n).clamp(MIP_FLOOR, 1.0));
        }
    }

    let (lo, hi) = nihss_range(spec.group);
    let nihss = rng.random_range(lo..=hi);
    let mut annotator_truths = BTreeMap::new();
    if spec.annotators {
        let a = annotator_variant(&labels, &brain, false, &mut rng);
        let b = annotator_variant(&labels, &brain, true, &mut rng);
        annotator_truths.insert("NR1".to_string(), LabelVolume::new(a).expect("labels stay in range"));
        annotator_truths.insert("NR2".to_string(), LabelVolume::new(b).expect("labels stay in range"));
    }
    let mut maps = maps.into_iter();
    let study = PatientStudy {
        patient_id: format!("phantom-{}", spec.seed),
        group: spec.group,
        nihss: Some(nihss),
        maps: ParametricMapStack {
            cbf: maps.next().expect("four maps"),
            cbv: maps.next().expect("four maps"),
            ttp: maps.next().expect("four maps"),
            tmax: maps.next().expect("four maps"),
        },
        mip: MipVolume(mip),
        spacing,
        ground_truth: Some(LabelVolume::new(labels).expect("labels stay in range")),
        annotator_truths,
    };
    Ok(Phantom { study, brain })
}

pub fn generate_patient(spec: &PhantomSpec) -> Result<PatientStudy> {
    generate_phantom(spec).map(|p| p.study)
}

/// Shared geometry and appearance for every patient of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTemplate {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub target_fractions: Option<[f64; 3]>,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
}

fn default_noise() -> f64 {
    0.03
}

impl Default for PhantomTemplate {
    fn default() -> Self {
        PhantomTemplate { slices: 8, height: 64, width: 64, target_fractions: None, noise_level: default_noise() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub counts: BTreeMap<SeverityGroup, usize>,
    #[serde(default)]
    pub templates: BTreeMap<SeverityGroup, PhantomTemplate>,
    pub seed: u64,
    #[serde(default)]
    pub annotators: bool,
}

impl CohortSpec {
    pub fn new(lvo: usize, non_lvo: usize, wis: usize, template: PhantomTemplate, seed: u64) -> Self {
        let counts = BTreeMap::from([(SeverityGroup::Lvo, lvo), (SeverityGroup::NonLvo, non_lvo), (SeverityGroup::Wis, wis)]);
        let templates = SeverityGroup::ALL.iter().map(|&g| (g, template.clone())).collect();
        CohortSpec { counts, templates, seed, annotators: false }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Patient specs in id order: LVO first, then Non-LVO, then WIS.
    pub fn patient_specs(&self) -> Result<Vec<(String, PhantomSpec)>> {
        if self.total() == 0 {
            return Err(SynthError::InvalidSpec("cohort is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.total());
        for group in SeverityGroup::ALL {
            let n = self.counts.get(&group).copied().unwrap_or(0);
            let template = self.templates.get(&group).cloned().unwrap_or_default();
            for _ in 0..n {
                let id = format!("p{:03}", out.len() + 1);
                let spec = PhantomSpec {
                    slices: template.slices,
                    height: template.height,
                    width: template.width,
                    group,
                    target_fractions: template.target_fractions.unwrap_or_else(|| default_fractions(group)),
                    noise_level: template.noise_level,
                    seed: rng.random(),
                    annotators: self.annotators,
                };
                out.push((id, spec));
            }
        }
        Ok(out)
    }
}

/// Generates the studies of a cohort in memory, ids assigned as on disk.
pub fn generate_studies(spec: &CohortSpec) -> Result<Vec<PatientStudy>> {
    spec.patient_specs()?
        .into_iter()
        .map(|(id, ps)| {
            let mut study = generate_patient(&ps)?;
            study.patient_id = id;
            Ok(study)
        })
        .collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

/// Writes a study's slices as PNG files below `dir` and returns the record
/// with paths relative to `root`.
pub fn write_study(study: &PatientStudy, root: &Path, rel_dir: &Path) -> Result<PatientRecord> {
    let dir = root.join(rel_dir);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let (s, h, w) = study.dims();
    let mut paths: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let save = |img: &dyn Fn(&Path) -> std::result::Result<(), image::ImageError>, name: String| -> Result<PathBuf> {
        let rel = rel_dir.join(name);
        let full = root.join(&rel);
        img(&full).map_err(|e| io_err(&full, e))?;
        Ok(rel)
    };
    for (profile, map) in MAP_PROFILES.iter().zip(study.maps.maps()) {
        for z in 0..s {
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = |c| to_u8(map[(z, y as usize, x as usize, c)]);
                image::Rgb([px(0), px(1), px(2)])
            });
            let rel = save(&|p| img.save(p), format!("{}_{z:03}.png", profile.name))?;
            paths.entry(profile.name.to_string()).or_default().push(rel);
        }
    }
    for z in 0..s {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([(study.mip.0[(z, y as usize, x as usize)] * 65535.0).round() as u16])
        });
        let rel = save(&|p| img.save(p), format!("mip_{z:03}.png"))?;
        paths.entry("mip".into()).or_default().push(rel);
    }
    let write_labels = |lv: &LabelVolume, stem: &str| -> Result<Vec<PathBuf>> {
        (0..s)
            .map(|z| {
                let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([lv.labels()[(z, y as usize, x as usize)]]));
                save(&|p| img.save(p), format!("{stem}_{z:03}.png"))
            })
            .collect()
    };
    let gt = study.ground_truth.as_ref().map(|g| write_labels(g, "gt")).transpose()?;
    let mut annotators = BTreeMap::new();
    for (name, lv) in &study.annotator_truths {
        annotators.insert(name.clone(), write_labels(lv, &format!("gt_{}", name.to_lowercase()))?);
    }
    let sp = study.spacing;
    let mut take = |k: &str| paths.remove(k).unwrap_or_default();
    Ok(PatientRecord {
        id: study.patient_id.clone(),
        group: study.group,
        nihss: study.nihss,
        spacing_mm: [sp.row_mm, sp.col_mm, sp.slice_mm],
        cbf: take("cbf"),
        cbv: take("cbv"),
        ttp: take("ttp"),
        tmax: take("tmax"),
        mip: take("mip"),
        gt,
        annotators: (!annotators.is_empty()).then_some(annotators),
    })
}

/// Generates every patient, writes the images and `manifest.json` into
/// `out_dir`, and returns the manifest.
pub fn generate_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut records = Vec::with_capacity(spec.total());
    for (id, ps) in spec.patient_specs()? {
        let mut study = generate_patient(&ps)?;
        study.patient_id = id.clone();
        records.push(write_study(&study, out_dir, Path::new(&id))?);
        log::debug!("wrote phantom {id} ({})", ps.group);
    }
    let manifest = DatasetManifest::new(records, out_dir);
    crate::dataset::save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Realized (healthy, penumbra, core) shares of the brain voxels.
pub fn brain_fractions(labels: &LabelVolume, brain: &Array3<bool>) -> [f64; 3] {
    let mut counts = [0usize; 3];
    let mut total = 0usize;
    for (&l, &b) in labels.labels().iter().zip(brain.iter()) {
        if b {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    let t = total.max(1) as f64;
    [counts[0] as f64 / t, counts[1] as f64 / t, counts[2] as f64 / t]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormaps_stay_in_unit_cube() {
        for cm in [ColorMap::Jet, ColorMap::Hot, ColorMap::CoolWarm] {
            for i in 0..=20 {
                let c = cm.apply(i as f64 / 20.0);
                assert!(c.iter().all(|v| (0.0..=1.0).contains(v)), "{cm:?} {c:?}");
            }
        }
    }

    #[test]
    fn interior_of_a_square() {
        let set = Array3::from_shape_fn((1, 5, 5), |(_, y, x)| (1..4).contains(&y) && (1..4).contains(&x));
        let inner = in_plane_interior(&set);
        assert_eq!(inner.iter().filter(|&&v| v).count(), 1);
        assert!(inner[(0, 2, 2)]);
    }

    #[test]
    fn infeasible_core_rejected() {
        let mut spec = PhantomSpec::new(SeverityGroup::Lvo, 4, 32, 32, 1);
        spec.target_fractions = [0.9, 0.03, 0.07];
        assert!(matches!(generate_patient(&spec), Err(SynthError::InfeasibleFractions { .. })));
    }
}

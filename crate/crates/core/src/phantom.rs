//! Deterministic synthetic short-axis phantoms with a known trabecular
//! fraction.
//!
//! Each slice is an elliptical myocardial ring (CEL) around a cavity (LVC).
//! Trabeculae (TZ) are unions of seeded disks anchored on the endocardial
//! border, clipped to the cavity, then trimmed or grown pixel by pixel until
//! the study-level VT% equals the requested value to within one pixel.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Class, Grid, LabelMask, PatientStudy, PixelSpacing, Population, SliceRecord};
use crate::quantify::{self, DEFAULT_THRESHOLD};

/// Largest share of a cavity the trabeculae may fill.
const MAX_CAVITY_FILL: f64 = 0.85;

/// Relative class intensities; multiplied by `gain` and offset by `offset`
/// to give scanner units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityModel {
    pub background: f64,
    pub wall: f64,
    pub cavity: f64,
    pub trabeculae: f64,
    /// Bright right-ventricle-like blob beside the heart.
    pub right_ventricle: Option<f64>,
    pub gain: f64,
    pub offset: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        // b-SSFP ordering: blood bright, muscle dark, trabeculae in between.
        IntensityModel {
            background: 0.35,
            wall: 0.12,
            cavity: 1.0,
            trabeculae: 0.55,
            right_ventricle: Some(0.9),
            gain: 2000.0,
            offset: 200.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_slices: usize,
    pub target_vt_percent: f64,
    /// Noise standard deviation relative to the cavity level.
    pub noise_sigma: f64,
    /// Ellipticity and wall-thickness modulation, 0 gives circles.
    pub deformation: f64,
    pub seed: u64,
    #[serde(default)]
    pub shape: ShapeModel,
    #[serde(default)]
    pub intensity: IntensityModel,
}

impl PhantomSpec {
    pub fn new(image_size: usize, n_slices: usize, target_vt_percent: f64, seed: u64) -> Self {
        PhantomSpec {
            image_size,
            n_slices,
            target_vt_percent,
            noise_sigma: 0.05,
            deformation: 0.1,
            seed,
            shape: ShapeModel::default(),
            intensity: IntensityModel::default(),
        }
    }
}

/// Geometry ranges, as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeModel {
    pub outer_radius: (f64, f64),
    /// Centre jitter around the image centre.
    pub centre_jitter: f64,
    /// Radius shrink from base to apex.
    pub apical_taper: f64,
}

impl Default for ShapeModel {
    fn default() -> Self {
        ShapeModel {
            outer_radius: (0.2, 0.27),
            centre_jitter: 0.05,
            apical_taper: 0.4,
        }
    }
}

/// Per-study geometry drawn once from the seed.
struct StudyGeometry {
    cx: f64,
    cy: f64,
    outer_radius: f64,
    wall_fraction: f64,
    ecc: f64,
    tilt: f64,
    wobble_phase: f64,
    rv_angle: f64,
}

struct SliceGeometry {
    cx: f64,
    cy: f64,
    radius: f64,
    wall_fraction: f64,
    ecc: f64,
    tilt: f64,
    wobble: f64,
    wobble_phase: f64,
}

impl SliceGeometry {
    /// Returns (normalized radius, polar angle) in the ellipse frame.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.tilt.sin_cos();
        let u = (c * dx + s * dy) / (self.radius * (1.0 + self.ecc));
        let v = (-s * dx + c * dy) / (self.radius * (1.0 - self.ecc));
        ((u * u + v * v).sqrt(), v.atan2(u))
    }

    /// Endocardial radius (normalized) at polar angle `theta`.
    fn inner(&self, theta: f64) -> f64 {
        (1.0 - self.wall_fraction) * (1.0 + self.wobble * (2.0 * theta + self.wobble_phase).sin())
    }

    /// Image point at normalized radius `r` and polar angle `theta`.
    fn point(&self, r: f64, theta: f64) -> (f64, f64) {
        let u = r * theta.cos() * self.radius * (1.0 + self.ecc);
        let v = r * theta.sin() * self.radius * (1.0 - self.ecc);
        let (s, c) = self.tilt.sin_cos();
        (self.cx + c * u - s * v, self.cy + s * u + c * v)
    }
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.image_size < 64 {
        return Err(Error::Argument(format!(
            "phantom image size must be at least 64, got {}",
            spec.image_size
        )));
    }
    if spec.n_slices == 0 || spec.n_slices > crate::model::MAX_CLINICAL_SLICES {
        return Err(Error::Argument(format!(
            "phantom slice count must be in 1..=14, got {}",
            spec.n_slices
        )));
    }
    if !(0.0..=100.0).contains(&spec.target_vt_percent) {
        return Err(Error::Argument(format!(
            "target VT% {} outside [0, 100]",
            spec.target_vt_percent
        )));
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.deformation >= 0.0) {
        return Err(Error::Argument("noise and deformation must be non-negative".into()));
    }
    let (lo, hi) = spec.shape.outer_radius;
    if !(lo > 0.0 && lo <= hi && hi < 0.4) {
        return Err(Error::Argument(format!("outer radius range {lo}..{hi} is invalid")));
    }
    Ok(())
}

fn study_geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> StudyGeometry {
    let size = spec.image_size as f64;
    let (lo, hi) = spec.shape.outer_radius;
    let jitter = spec.shape.centre_jitter * size;
    // Non-compacted hearts have a thin compact layer; thinning the wall with
    // the target keeps high VT% reachable.
    let t = (spec.target_vt_percent / 60.0).clamp(0.0, 1.0);
    let wall_fraction = (0.32 - 0.17 * t) + rng.random_range(-0.02..0.02);
    StudyGeometry {
        cx: (size - 1.0) / 2.0 + rng.random_range(-1.0..=1.0) * jitter,
        cy: (size - 1.0) / 2.0 + rng.random_range(-1.0..=1.0) * jitter,
        outer_radius: rng.random_range(lo..=hi) * size,
        wall_fraction,
        ecc: (spec.deformation * rng.random_range(0.5..=1.0)).min(0.3),
        tilt: rng.random_range(0.0..PI),
        wobble_phase: rng.random_range(0.0..2.0 * PI),
        rv_angle: rng.random_range(0.0..2.0 * PI),
    }
}

fn slice_geometry(spec: &PhantomSpec, g: &StudyGeometry, index: usize, rng: &mut ChaCha8Rng) -> SliceGeometry {
    let frac = if spec.n_slices > 1 {
        index as f64 / (spec.n_slices - 1) as f64
    } else {
        0.0
    };
    let drift = 0.01 * spec.image_size as f64;
    SliceGeometry {
        cx: g.cx + rng.random_range(-1.0..=1.0) * drift,
        cy: g.cy + rng.random_range(-1.0..=1.0) * drift,
        radius: g.outer_radius * (1.0 - spec.shape.apical_taper * frac),
        wall_fraction: g.wall_fraction,
        ecc: g.ecc,
        tilt: g.tilt,
        wobble: (0.3 * spec.deformation).min(0.1),
        wobble_phase: g.wobble_phase,
    }
}

/// Ring and cavity labels, before trabeculae.
fn base_mask(size: usize, sg: &SliceGeometry) -> LabelMask {
    let mut mask = LabelMask::background(size, size);
    for y in 0..size {
        for x in 0..size {
            let (r, theta) = sg.polar(x as f64, y as f64);
            if r <= sg.inner(theta) {
                mask.set(x, y, Class::Lvc);
            } else if r <= 1.0 {
                mask.set(x, y, Class::Cel);
            }
        }
    }
    mask
}

/// Adds trabecular blobs until the slice holds `quota` TZ pixels.
fn grow_trabeculae(mask: &mut LabelMask, sg: &SliceGeometry, quota: usize, rng: &mut ChaCha8Rng) {
    let size = mask.width();
    let mut tz = 0usize;
    let mut attempts = 0;
    while tz < quota && attempts < 400 {
        attempts += 1;
        let theta = rng.random_range(0.0..2.0 * PI);
        // Anchor on the border first; later blobs may sit deeper.
        let depth = if attempts < 60 {
            rng.random_range(0.85..1.0)
        } else {
            rng.random_range(0.4..1.0)
        };
        let (bx, by) = sg.point(sg.inner(theta) * depth, theta);
        let max_r = sg.radius * (1.0 - sg.wall_fraction) * rng.random_range(0.08..0.22);
        let needed = quota - tz;
        let added = count_disk(mask, bx, by, max_r);
        let r = if added > needed {
            // Shrink the last blob to land close to the quota.
            let (mut lo, mut hi) = (0.0, max_r);
            for _ in 0..20 {
                let mid = 0.5 * (lo + hi);
                if count_disk(mask, bx, by, mid) > needed {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            lo
        } else {
            max_r
        };
        tz += paint_disk(mask, bx, by, r);
    }
    if tz < quota {
        tz += dilate_into_cavity(mask, quota - tz, rng);
    }
    if tz > quota {
        erode_trabeculae(mask, tz - quota, rng);
    }
    debug_assert!(size == mask.height());
}

fn disk_bounds(size: usize, cx: f64, cy: f64, r: f64) -> (usize, usize, usize, usize) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil().max(0.0) as usize).min(size - 1);
    let y1 = ((cy + r).ceil().max(0.0) as usize).min(size - 1);
    (x0, y0, x1, y1)
}

/// Cavity pixels a disk would turn into trabeculae.
fn count_disk(mask: &LabelMask, cx: f64, cy: f64, r: f64) -> usize {
    let (x0, y0, x1, y1) = disk_bounds(mask.width(), cx, cy, r);
    let mut n = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r && mask.class_at(x, y) == Class::Lvc {
                n += 1;
            }
        }
    }
    n
}

fn paint_disk(mask: &mut LabelMask, cx: f64, cy: f64, r: f64) -> usize {
    let (x0, y0, x1, y1) = disk_bounds(mask.width(), cx, cy, r);
    let mut n = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r && mask.class_at(x, y) == Class::Lvc {
                mask.set(x, y, Class::Tz);
                n += 1;
            }
        }
    }
    n
}

fn neighbours(x: usize, y: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x, y, s) = (x as isize, y as isize, size as isize);
    [(-1, 0), (1, 0), (0, -1), (0, 1)]
        .into_iter()
        .map(move |(dx, dy)| (x + dx, y + dy))
        .filter(move |&(a, b)| a >= 0 && b >= 0 && a < s && b < s)
        .map(|(a, b)| (a as usize, b as usize))
}

/// Converts up to `count` cavity pixels touching TZ or the wall into TZ.
fn dilate_into_cavity(mask: &mut LabelMask, count: usize, rng: &mut ChaCha8Rng) -> usize {
    let size = mask.width();
    let mut added = 0;
    while added < count {
        let mut ring: Vec<(usize, usize)> = (0..size * size)
            .map(|i| (i % size, i / size))
            .filter(|&(x, y)| {
                mask.class_at(x, y) == Class::Lvc
                    && neighbours(x, y, size).any(|(a, b)| matches!(mask.class_at(a, b), Class::Tz | Class::Cel))
            })
            .collect();
        if ring.is_empty() {
            break;
        }
        ring.shuffle(rng);
        for (x, y) in ring.into_iter().take(count - added) {
            mask.set(x, y, Class::Tz);
            added += 1;
        }
    }
    added
}

/// Returns `count` boundary TZ pixels to the cavity.
fn erode_trabeculae(mask: &mut LabelMask, count: usize, rng: &mut ChaCha8Rng) {
    let size = mask.width();
    let mut removed = 0;
    while removed < count {
        let mut edge: Vec<(usize, usize)> = (0..size * size)
            .map(|i| (i % size, i / size))
            .filter(|&(x, y)| {
                mask.class_at(x, y) == Class::Tz && neighbours(x, y, size).any(|(a, b)| mask.class_at(a, b) == Class::Lvc)
            })
            .collect();
        if edge.is_empty() {
            edge = (0..size * size)
                .map(|i| (i % size, i / size))
                .filter(|&(x, y)| mask.class_at(x, y) == Class::Tz)
                .collect();
        }
        edge.shuffle(rng);
        for (x, y) in edge.into_iter().take(count - removed) {
            mask.set(x, y, Class::Lvc);
            removed += 1;
        }
    }
}

/// Splits `total` across slices proportionally to `weights` (largest
/// remainder), so the parts sum exactly to `total`.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = total - parts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

fn render(mask: &LabelMask, sg: &SliceGeometry, rv_angle: f64, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Grid<f32> {
    let im = &spec.intensity;
    let size = mask.width();
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("finite sigma");
    // Right-ventricle blob centre, well clear of the ring.
    let (rvx, rvy) = sg.point(1.75, rv_angle);
    let (rva, rvb) = (0.75 * sg.radius, 0.45 * sg.radius);
    let (rs, rc) = rv_angle.sin_cos();
    // Slow background shading so the background is not a flat level.
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let level = match mask.class_at(x, y) {
                Class::Cel => im.wall,
                Class::Lvc => im.cavity,
                Class::Tz => im.trabeculae,
                Class::Background => {
                    let (dx, dy) = (x as f64 - rvx, y as f64 - rvy);
                    let (u, v) = ((rc * dx + rs * dy) / rva, (-rs * dx + rc * dy) / rvb);
                    let (r, _) = sg.polar(x as f64, y as f64);
                    match im.right_ventricle {
                        Some(rv) if u * u + v * v <= 1.0 && r > 1.15 => rv,
                        _ => {
                            let fx = x as f64 / size as f64;
                            let fy = y as f64 / size as f64;
                            im.background * (1.0 + 0.25 * (2.0 * PI * (fx + 0.7 * fy) + phase).sin())
                        }
                    }
                }
            };
            let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            let v = (level + n) * im.gain + im.offset;
            data.push(v.round().clamp(0.0, u16::MAX as f64) as f32);
        }
    }
    Grid::from_vec(size, size, data).expect("square image")
}

/// Generates one patient. Reference VT% and diagnosis are computed from the
/// generated masks.
pub fn generate(spec: &PhantomSpec) -> Result<PatientStudy> {
    generate_with_id(spec, &format!("phantom{:016x}", spec.seed), Population::P)
}

pub fn generate_with_id(spec: &PhantomSpec, patient_id: &str, population: Population) -> Result<PatientStudy> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = study_geometry(spec, &mut rng);
    let slices_geo: Vec<SliceGeometry> = (0..spec.n_slices)
        .map(|i| slice_geometry(spec, &geometry, i, &mut rng))
        .collect();
    let mut masks: Vec<LabelMask> = slices_geo.iter().map(|sg| base_mask(spec.image_size, sg)).collect();

    let cel_total: usize = masks.iter().map(|m| m.count(Class::Cel)).sum();
    let cavities: Vec<usize> = masks.iter().map(|m| m.count(Class::Lvc)).collect();
    if cel_total == 0 {
        return Err(Error::Generation("phantom ring is empty".into()));
    }
    let target = spec.target_vt_percent;
    if target >= 100.0 {
        return Err(Error::Generation("VT% of 100 needs a wall without compacted tissue".into()));
    }
    let tz_total = (target / (100.0 - target) * cel_total as f64).round() as usize;
    let capacity = (MAX_CAVITY_FILL * cavities.iter().sum::<usize>() as f64).floor() as usize;
    if tz_total > capacity {
        let reachable = 100.0 * capacity as f64 / (capacity + cel_total) as f64;
        return Err(Error::Generation(format!(
            "target VT% {target} is unreachable for this geometry (at most {reachable:.1})"
        )));
    }
    let quotas = apportion(tz_total, &cavities);
    for ((mask, sg), &quota) in masks.iter_mut().zip(&slices_geo).zip(&quotas) {
        if quota > 0 {
            grow_trabeculae(mask, sg, quota, &mut rng);
        }
    }

    let slices = masks
        .into_iter()
        .zip(&slices_geo)
        .map(|(mask, sg)| {
            let image = render(&mask, sg, geometry.rv_angle, spec, &mut rng);
            SliceRecord::new(image, Some(mask))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut study = PatientStudy {
        patient_id: patient_id.to_string(),
        population,
        slices,
        slice_thickness_mm: 8.0,
        slice_gap_mm: 2.0,
        pixel_spacing_mm: PixelSpacing(1.5, 1.5),
        reference_vt_percent: None,
        reference_diagnosis: None,
    };
    let q = quantify::quantify_study(&study, DEFAULT_THRESHOLD)?;
    study.reference_vt_percent = Some(q.vt_percent);
    study.reference_diagnosis = Some(q.diagnosis);
    Ok(study)
}

/// Distribution of per-patient target VT%.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VtDistribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
    /// Two-component normal mixture; `weight_high` is the share of the
    /// second mode.
    Bimodal { low_mode: f64, high_mode: f64, std: f64, weight_high: f64 },
}

/// Draws are clipped to this range so every target is reachable.
const VT_SAMPLE_RANGE: (f64, f64) = (0.0, 60.0);

impl VtDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            VtDistribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            VtDistribution::Normal { mean, std } => mean.is_finite() && std >= 0.0 && std.is_finite(),
            VtDistribution::Bimodal {
                low_mode,
                high_mode,
                std,
                weight_high,
            } => {
                low_mode.is_finite()
                    && high_mode.is_finite()
                    && std >= 0.0
                    && std.is_finite()
                    && (0.0..=1.0).contains(&weight_high)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid VT% distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let draw = match *self {
            VtDistribution::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..=high)
                } else {
                    low
                }
            }
            VtDistribution::Normal { mean, std } => mean + std * standard_normal(rng),
            VtDistribution::Bimodal {
                low_mode,
                high_mode,
                std,
                weight_high,
            } => {
                let mode = if rng.random::<f64>() < weight_high { high_mode } else { low_mode };
                mode + std * standard_normal(rng)
            }
        };
        draw.clamp(VT_SAMPLE_RANGE.0, VT_SAMPLE_RANGE.1)
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Population-level settings shared by every patient of a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortTemplate {
    pub image_size: usize,
    pub slices: (usize, usize),
    pub noise_sigma: f64,
    pub deformation: f64,
    pub shape: ShapeModel,
    pub intensity: IntensityModel,
    pub population: Population,
    pub id_prefix: String,
}

impl Default for CohortTemplate {
    fn default() -> Self {
        CohortTemplate {
            image_size: 128,
            slices: (5, 9),
            noise_sigma: 0.05,
            deformation: 0.1,
            shape: ShapeModel::default(),
            intensity: IntensityModel::default(),
            population: Population::P,
            id_prefix: "pt".into(),
        }
    }
}

impl CohortTemplate {
    /// A second synthetic population with different contrast, geometry and
    /// noise, labelled `H`.
    pub fn shifted() -> Self {
        CohortTemplate {
            noise_sigma: 0.09,
            deformation: 0.25,
            shape: ShapeModel {
                outer_radius: (0.26, 0.33),
                centre_jitter: 0.08,
                apical_taper: 0.3,
            },
            intensity: IntensityModel {
                background: 0.55,
                wall: 0.25,
                cavity: 0.8,
                trabeculae: 0.62,
                right_ventricle: None,
                gain: 1400.0,
                offset: 600.0,
            },
            population: Population::H,
            id_prefix: "sh".into(),
            ..CohortTemplate::default()
        }
    }
}

pub fn generate_cohort(n_patients: usize, distribution: &VtDistribution, seed: u64) -> Result<Vec<PatientStudy>> {
    generate_cohort_with(&CohortTemplate::default(), n_patients, distribution, seed)
}

pub fn generate_cohort_with(
    template: &CohortTemplate,
    n_patients: usize,
    distribution: &VtDistribution,
    seed: u64,
) -> Result<Vec<PatientStudy>> {
    if n_patients == 0 {
        return Err(Error::Argument("a cohort needs at least one patient".into()));
    }
    distribution.validate()?;
    let (lo, hi) = template.slices;
    if lo == 0 || lo > hi || hi > crate::model::MAX_CLINICAL_SLICES {
        return Err(Error::Argument(format!("invalid slice range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_patients)
        .map(|i| {
            let target = distribution.sample(&mut rng);
            let n_slices = rng.random_range(lo..=hi);
            let spec = PhantomSpec {
                image_size: template.image_size,
                n_slices,
                target_vt_percent: target,
                noise_sigma: template.noise_sigma,
                deformation: template.deformation,
                seed: rng.random(),
                shape: template.shape,
                intensity: template.intensity,
            };
            generate_with_id(&spec, &format!("{}{:03}", template.id_prefix, i), template.population)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_target_has_no_trabeculae() {
        let s = generate(&PhantomSpec::new(64, 3, 0.0, 1)).unwrap();
        assert!(s.slices.iter().all(|sl| sl.mask.as_ref().unwrap().count(Class::Tz) == 0));
        assert_eq!(s.reference_vt_percent, Some(0.0));
        assert_eq!(s.reference_diagnosis, Some(false));
    }

    #[test]
    fn same_seed_same_study() {
        let spec = PhantomSpec::new(96, 4, 25.0, 42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = PhantomSpec { seed: 43, ..spec };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn hits_target_vt() {
        let s = generate(&PhantomSpec::new(128, 7, 35.0, 3)).unwrap();
        let vt = s.reference_vt_percent.unwrap();
        assert!((33.0..=37.0).contains(&vt), "{vt}");
    }

    #[test]
    fn contrast_ordering() {
        let mut spec = PhantomSpec::new(128, 1, 30.0, 5);
        spec.noise_sigma = 0.0;
        let s = generate(&spec).unwrap();
        let sl = &s.slices[0];
        let mask = sl.mask.as_ref().unwrap();
        let mean_of = |c: Class| {
            let v: Vec<f64> = mask
                .labels()
                .iter()
                .zip(sl.image.as_slice())
                .filter(|(&l, _)| l == c.id())
                .map(|(_, &i)| i as f64)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_of(Class::Lvc) > mean_of(Class::Tz));
        assert!(mean_of(Class::Tz) > mean_of(Class::Cel));
    }

    #[test]
    fn unreachable_target() {
        assert!(matches!(generate(&PhantomSpec::new(64, 2, 99.0, 1)), Err(Error::Generation(_))));
        assert!(matches!(generate(&PhantomSpec::new(32, 2, 10.0, 1)), Err(Error::Argument(_))));
    }

    #[test]
    fn cohort_basics() {
        let d = VtDistribution::Uniform { low: 10.0, high: 40.0 };
        let c = generate_cohort(1, &d, 9).unwrap();
        assert_eq!(c.len(), 1);
        assert!(generate_cohort(0, &d, 9).is_err());
        let bad = VtDistribution::Normal { mean: 20.0, std: -1.0 };
        assert!(matches!(generate_cohort(3, &bad, 9), Err(Error::Argument(_))));
    }

    #[test]
    fn apportion_sums_exactly() {
        let parts = apportion(101, &[3, 5, 0, 7]);
        assert_eq!(parts.iter().sum::<usize>(), 101);
        assert_eq!(parts[2], 0);
    }
}

//! Areas, volumes, VT% and the LVNC call.
//!
//! VT% = 100 · TV / (TV + CV), where the trabecular (TV) and compacted (CV)
//! volumes are slab sums of per-slice areas times (thickness + gap). The
//! cavity area is reported but takes no part in VT%.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Class, LabelMask, PatientStudy, PixelSpacing, Population};
use crate::stats::MeanStd;

/// Validated VT% cut-off separating LVNC from non-LVNC patients.
pub const DEFAULT_THRESHOLD: f64 = 27.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceAreas {
    pub area_cel: f64,
    pub area_lvc: f64,
    pub area_tz: f64,
    /// Pixel counts per class id, at the resolution of the mask.
    pub pixel_counts: [usize; Class::COUNT],
}

impl SliceAreas {
    /// Areas in mm² given directly, e.g. from another tool.
    pub fn from_areas(area_tz: f64, area_cel: f64) -> SliceAreas {
        SliceAreas {
            area_cel,
            area_lvc: 0.0,
            area_tz,
            pixel_counts: [0; Class::COUNT],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantificationResult {
    pub slices: Vec<SliceAreas>,
    pub trabecular_volume_mm3: f64,
    pub compacted_volume_mm3: f64,
    pub vt_percent: f64,
    pub diagnosis: bool,
    pub threshold_used: f64,
}

/// Per-class areas in mm². `original_dims` is the acquisition grid; when the
/// mask lives on a different (network) grid every pixel stands for
/// (orig_w/mask_w)·(orig_h/mask_h) acquisition pixels.
pub fn slice_areas(
    mask: &LabelMask,
    spacing: PixelSpacing,
    original_dims: (usize, usize),
) -> Result<SliceAreas> {
    let spacing = spacing.validate()?;
    if original_dims.0 == 0 || original_dims.1 == 0 {
        return Err(Error::Argument("original dimensions must be positive".into()));
    }
    let counts = mask.class_counts();
    let scale = (original_dims.0 as f64 / mask.width() as f64)
        * (original_dims.1 as f64 / mask.height() as f64);
    let per_pixel = spacing.pixel_area_mm2() * scale;
    Ok(SliceAreas {
        area_cel: counts[Class::Cel as usize] as f64 * per_pixel,
        area_lvc: counts[Class::Lvc as usize] as f64 * per_pixel,
        area_tz: counts[Class::Tz as usize] as f64 * per_pixel,
        pixel_counts: counts,
    })
}

pub fn compute_vt(
    areas: &[SliceAreas],
    thickness_mm: f64,
    gap_mm: f64,
    threshold: f64,
) -> Result<QuantificationResult> {
    if areas.is_empty() {
        return Err(Error::Argument("at least one slice is required".into()));
    }
    if !(thickness_mm > 0.0) || !(gap_mm >= 0.0) {
        return Err(Error::Argument(format!(
            "invalid slice geometry: thickness {thickness_mm}, gap {gap_mm}"
        )));
    }
    let slab = thickness_mm + gap_mm;
    let tv: f64 = areas.iter().map(|a| a.area_tz * slab).sum();
    let cv: f64 = areas.iter().map(|a| a.area_cel * slab).sum();
    let total = tv + cv;
    if total <= 0.0 {
        return Err(Error::UndefinedVt(
            "no trabecular or compacted tissue in any slice".into(),
        ));
    }
    let vt_percent = 100.0 * tv / total;
    Ok(QuantificationResult {
        slices: areas.to_vec(),
        trabecular_volume_mm3: tv,
        compacted_volume_mm3: cv,
        vt_percent,
        diagnosis: diagnose(vt_percent, threshold),
        threshold_used: threshold,
    })
}

/// LVNC iff VT% reaches the threshold (inclusive).
pub fn diagnose(vt_percent: f64, threshold: f64) -> bool {
    vt_percent >= threshold
}

pub fn vt_error(predicted: &QuantificationResult, reference: &QuantificationResult) -> f64 {
    (predicted.vt_percent - reference.vt_percent).abs()
}

/// Mean ± std of per-patient absolute VT% errors, in percentage points.
pub fn vt_error_summary(pairs: &[(QuantificationResult, QuantificationResult)]) -> Option<MeanStd> {
    let errors: Vec<f64> = pairs.iter().map(|(p, r)| vt_error(p, r)).collect();
    MeanStd::of(&errors)
}

/// Quantifies a study from the given masks (one per slice, any resolution)
/// using the study's acquisition geometry.
pub fn quantify_masks(
    study: &PatientStudy,
    masks: &[LabelMask],
    threshold: f64,
) -> Result<QuantificationResult> {
    if masks.len() != study.slices.len() {
        return Err(Error::Argument(format!(
            "{} masks for {} slices",
            masks.len(),
            study.slices.len()
        )));
    }
    let areas = masks
        .iter()
        .zip(&study.slices)
        .map(|(m, s)| slice_areas(m, study.pixel_spacing_mm, s.image.dims()))
        .collect::<Result<Vec<_>>>()?;
    compute_vt(&areas, study.slice_thickness_mm, study.slice_gap_mm, threshold)
}

/// Quantifies the study's own (reference) masks.
pub fn quantify_study(study: &PatientStudy, threshold: f64) -> Result<QuantificationResult> {
    let masks: Vec<LabelMask> = study
        .slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.mask.clone().ok_or_else(|| {
                Error::Argument(format!("{}: slice {i} has no mask", study.patient_id))
            })
        })
        .collect::<Result<_>>()?;
    quantify_masks(study, &masks, threshold)
}

/// One row of the per-patient quantification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantificationRow {
    pub patient_id: String,
    pub population: Population,
    pub trabecular_volume_mm3: f64,
    pub compacted_volume_mm3: f64,
    pub vt_percent: f64,
    pub threshold: f64,
    pub diagnosis: bool,
}

impl QuantificationRow {
    pub fn new(study: &PatientStudy, q: &QuantificationResult) -> Self {
        QuantificationRow {
            patient_id: study.patient_id.clone(),
            population: study.population,
            trabecular_volume_mm3: q.trabecular_volume_mm3,
            compacted_volume_mm3: q.compacted_volume_mm3,
            vt_percent: q.vt_percent,
            threshold: q.threshold_used,
            diagnosis: q.diagnosis,
        }
    }
}

pub fn write_quantification_csv<W: Write>(out: W, rows: &[QuantificationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Format(format!("quantification CSV: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Format(format!("quantification CSV: {e}")))
}

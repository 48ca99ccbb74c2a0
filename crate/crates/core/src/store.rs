//! On-disk study layout: one directory per patient holding `manifest.json`,
//! `slice_###.png` (16-bit grayscale) and optional `mask_###.png` (8-bit,
//! literal class ids).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grid, LabelMask, PatientStudy, PixelSpacing, Population, SliceRecord};
use crate::pngio;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Optional per-slice geometry as emitted by DICOM converters. When present
/// it must agree with the study-level values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceGeometry {
    pub thickness_mm: f64,
    pub gap_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub patient_id: String,
    pub population: Population,
    pub slice_thickness_mm: f64,
    pub slice_gap_mm: f64,
    pub pixel_spacing_mm: [f64; 2],
    pub num_slices: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_vt_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_diagnosis: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_geometry: Option<Vec<SliceGeometry>>,
}

impl Manifest {
    pub fn from_study(study: &PatientStudy) -> Self {
        Manifest {
            patient_id: study.patient_id.clone(),
            population: study.population,
            slice_thickness_mm: study.slice_thickness_mm,
            slice_gap_mm: study.slice_gap_mm,
            pixel_spacing_mm: [study.pixel_spacing_mm.0, study.pixel_spacing_mm.1],
            num_slices: study.slices.len(),
            reference_vt_percent: study.reference_vt_percent,
            reference_diagnosis: study.reference_diagnosis,
            slice_geometry: None,
        }
    }

    fn check_geometry(&self) -> Result<()> {
        let Some(per_slice) = &self.slice_geometry else {
            return Ok(());
        };
        if per_slice.len() != self.num_slices {
            return Err(Error::Format(format!(
                "slice_geometry lists {} entries for {} slices",
                per_slice.len(),
                self.num_slices
            )));
        }
        for (i, g) in per_slice.iter().enumerate() {
            if g.thickness_mm != self.slice_thickness_mm || g.gap_mm != self.slice_gap_mm {
                return Err(Error::Validation(format!(
                    "slice {i} geometry {}+{} mm differs from study geometry {}+{} mm; \
                     thickness and gap must be uniform",
                    g.thickness_mm, g.gap_mm, self.slice_thickness_mm, self.slice_gap_mm
                )));
            }
        }
        Ok(())
    }
}

pub fn slice_file(index: usize) -> String {
    format!("slice_{index:03}.png")
}

pub fn mask_file(index: usize) -> String {
    format!("mask_{index:03}.png")
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Format(format!("{} is missing", path.display())))
        }
        Err(e) => return Err(Error::io(&path, e)),
    };
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_study(dir: &Path) -> Result<PatientStudy> {
    let manifest = read_manifest(dir)?;
    if manifest.num_slices == 0 {
        return Err(Error::Format(format!(
            "{}: num_slices must be at least 1",
            dir.display()
        )));
    }
    manifest.check_geometry()?;

    let missing: Vec<String> = (0..manifest.num_slices)
        .map(slice_file)
        .filter(|name| !dir.join(name).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "{}: manifest declares {} slices but {} image files are missing ({})",
            dir.display(),
            manifest.num_slices,
            missing.len(),
            missing.join(", ")
        )));
    }

    let mut slices = Vec::with_capacity(manifest.num_slices);
    for i in 0..manifest.num_slices {
        let png = pngio::read_gray(&dir.join(slice_file(i)))?;
        let image = Grid::from_vec(
            png.width,
            png.height,
            png.samples.iter().map(|&v| v as f32).collect(),
        )?;
        let mask_path = dir.join(mask_file(i));
        let mask = if mask_path.is_file() {
            let m = pngio::read_gray(&mask_path)?;
            if m.bit_depth != 8 {
                return Err(Error::Format(format!(
                    "{}: masks must be 8-bit",
                    mask_path.display()
                )));
            }
            let labels = m.samples.iter().map(|&v| v.min(255) as u8).collect();
            Some(
                LabelMask::from_vec(m.width, m.height, labels)
                    .map_err(|e| Error::Validation(format!("{}: {e}", mask_path.display())))?,
            )
        } else {
            None
        };
        slices.push(
            SliceRecord::new(image, mask)
                .map_err(|e| Error::Validation(format!("slice {i}: {e}")))?,
        );
    }

    let study = PatientStudy {
        patient_id: manifest.patient_id,
        population: manifest.population,
        slices,
        slice_thickness_mm: manifest.slice_thickness_mm,
        slice_gap_mm: manifest.slice_gap_mm,
        pixel_spacing_mm: PixelSpacing(manifest.pixel_spacing_mm[0], manifest.pixel_spacing_mm[1]),
        reference_vt_percent: manifest.reference_vt_percent,
        reference_diagnosis: manifest.reference_diagnosis,
    };
    study.validate()?;
    Ok(study)
}

/// Quantizes intensities to the 16-bit storage range.
pub fn quantize_intensity(v: f32) -> u16 {
    v.round().clamp(0.0, u16::MAX as f32) as u16
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn save_study(study: &PatientStudy, dir: &Path) -> Result<()> {
    study.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, slice) in study.slices.iter().enumerate() {
        let (w, h) = slice.image.dims();
        let samples: Vec<u16> = slice
            .image
            .as_slice()
            .iter()
            .map(|&v| quantize_intensity(v))
            .collect();
        pngio::write_gray16(&dir.join(slice_file(i)), w, h, &samples)?;
        let mask_path = dir.join(mask_file(i));
        match &slice.mask {
            Some(mask) => pngio::write_gray8(&mask_path, w, h, mask.labels())?,
            None if mask_path.exists() => {
                fs::remove_file(&mask_path).map_err(|e| Error::io(&mask_path, e))?
            }
            None => {}
        }
    }
    write_manifest(dir, &Manifest::from_study(study))
}

/// Patient directories directly below `root` that contain a manifest, sorted
/// by name.
pub fn study_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(MANIFEST_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_cohort(root: &Path) -> Result<Vec<PatientStudy>> {
    study_dirs(root)?.iter().map(|d| load_study(d)).collect()
}

pub fn save_cohort(studies: &[PatientStudy], root: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    studies
        .iter()
        .map(|s| {
            let dir = root.join(&s.patient_id);
            save_study(s, &dir).map(|_| dir)
        })
        .collect()
}

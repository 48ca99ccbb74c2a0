//! Canonical in-memory types for studies, slices and label masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on slices per study seen in clinical data. The on-disk format
/// itself only needs one slice.
pub const MAX_CLINICAL_SLICES: usize = 14;

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Argument(format!(
                "grid of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Grayscale intensities in scanner units.
pub type Image = Grid<f32>;

/// Segmentation classes. The discriminants are the on-disk label values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    /// Compacted external layer of the myocardium.
    Cel = 1,
    /// Left-ventricle cavity (blood pool).
    Lvc = 2,
    /// Trabecular zone.
    Tz = 3,
}

impl Class {
    pub const COUNT: usize = 4;
    pub const ALL: [Class; 4] = [Class::Background, Class::Cel, Class::Lvc, Class::Tz];
    /// The three anatomical classes that are scored with Dice.
    pub const FOREGROUND: [Class; 3] = [Class::Cel, Class::Lvc, Class::Tz];

    pub fn from_id(id: u8) -> Option<Class> {
        match id {
            0 => Some(Class::Background),
            1 => Some(Class::Cel),
            2 => Some(Class::Lvc),
            3 => Some(Class::Tz),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Class::Background => "BG",
            Class::Cel => "CEL",
            Class::Lvc => "LVC",
            Class::Tz => "TZ",
        }
    }
}

/// Per-pixel class ids; every value is a valid [`Class`] id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask(Grid<u8>);

impl LabelMask {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if let Some(bad) = grid.as_slice().iter().find(|&&v| Class::from_id(v).is_none()) {
            return Err(Error::Validation(format!(
                "mask holds class id {bad}, allowed ids are 0..=3"
            )));
        }
        Ok(LabelMask(grid))
    }

    pub fn background(width: usize, height: usize) -> Self {
        LabelMask(Grid::filled(width, height, Class::Background.id()))
    }

    pub fn from_vec(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        Self::new(Grid::from_vec(width, height, labels)?)
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn labels(&self) -> &[u8] {
        self.0.as_slice()
    }

    #[inline]
    pub fn class_at(&self, x: usize, y: usize) -> Class {
        // Ids are validated at construction.
        Class::from_id(self.0.get(x, y)).unwrap_or(Class::Background)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: Class) {
        self.0.set(x, y, class.id());
    }

    pub fn class_counts(&self) -> [usize; Class::COUNT] {
        let mut counts = [0usize; Class::COUNT];
        for &v in self.0.as_slice() {
            counts[v as usize] += 1;
        }
        counts
    }

    pub fn count(&self, class: Class) -> usize {
        let id = class.id();
        self.0.as_slice().iter().filter(|&&v| v == id).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Population {
    /// Hypertrophic cardiomyopathy cohort.
    P,
    /// Mixed or unclassifiable cardiomyopathies.
    X,
    /// Patients meeting Petersen's LVNC criteria.
    H,
}

impl Population {
    pub const ALL: [Population; 3] = [Population::P, Population::X, Population::H];

    pub fn as_str(self) -> &'static str {
        match self {
            Population::P => "P",
            Population::X => "X",
            Population::H => "H",
        }
    }
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Population {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(Population::P),
            "X" => Ok(Population::X),
            "H" => Ok(Population::H),
            other => Err(Error::Argument(format!(
                "unknown population {other:?}, expected P, X or H"
            ))),
        }
    }
}

/// In-plane pixel size in millimetres, (x, y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelSpacing(pub f64, pub f64);

impl PixelSpacing {
    pub fn validate(self) -> Result<Self> {
        if self.0 > 0.0 && self.1 > 0.0 && self.0.is_finite() && self.1.is_finite() {
            Ok(self)
        } else {
            Err(Error::Argument(format!(
                "pixel spacing must be positive, got {}x{}",
                self.0, self.1
            )))
        }
    }

    pub fn pixel_area_mm2(self) -> f64 {
        self.0 * self.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub image: Image,
    pub mask: Option<LabelMask>,
}

impl SliceRecord {
    pub fn new(image: Image, mask: Option<LabelMask>) -> Result<Self> {
        let slice = SliceRecord { image, mask };
        slice.validate()?;
        Ok(slice)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            if mask.dims() != self.image.dims() {
                return Err(Error::Validation(format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.width(),
                    mask.height(),
                    self.image.width(),
                    self.image.height()
                )));
            }
        }
        Ok(())
    }
}

/// One patient: short-axis slices ordered base to apex plus acquisition
/// geometry. Thickness and gap are per study, so they are uniform across
/// slices by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientStudy {
    pub patient_id: String,
    pub population: Population,
    pub slices: Vec<SliceRecord>,
    pub slice_thickness_mm: f64,
    pub slice_gap_mm: f64,
    pub pixel_spacing_mm: PixelSpacing,
    pub reference_vt_percent: Option<f64>,
    pub reference_diagnosis: Option<bool>,
}

impl PatientStudy {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::Validation("patient_id is empty".into()));
        }
        if self.slices.is_empty() {
            return Err(Error::Validation(format!(
                "study {} has no slices",
                self.patient_id
            )));
        }
        if !(self.slice_thickness_mm > 0.0 && self.slice_thickness_mm.is_finite()) {
            return Err(Error::Validation(format!(
                "slice thickness must be positive, got {}",
                self.slice_thickness_mm
            )));
        }
        if !(self.slice_gap_mm >= 0.0 && self.slice_gap_mm.is_finite()) {
            return Err(Error::Validation(format!(
                "slice gap must be non-negative, got {}",
                self.slice_gap_mm
            )));
        }
        self.pixel_spacing_mm
            .validate()
            .map_err(|e| Error::Validation(e.to_string()))?;
        if let Some(vt) = self.reference_vt_percent {
            if !(0.0..=100.0).contains(&vt) {
                return Err(Error::Validation(format!(
                    "reference VT% {vt} outside [0, 100]"
                )));
            }
        }
        for (i, slice) in self.slices.iter().enumerate() {
            slice
                .validate()
                .map_err(|e| Error::Validation(format!("slice {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn has_masks(&self) -> bool {
        self.slices.iter().all(|s| s.mask.is_some())
    }

    /// Reference label used for stratification and diagnostic evaluation:
    /// the stored diagnosis, else the stored VT% against `threshold`.
    pub fn reference_label(&self, threshold: f64) -> Option<bool> {
        self.reference_diagnosis
            .or_else(|| self.reference_vt_percent.map(|vt| vt >= threshold))
    }
}

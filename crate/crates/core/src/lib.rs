//! Left-ventricular trabecular quantification: U-Net segmentation of
//! short-axis cardiac MRI, VT% computation, LVNC diagnosis and the
//! statistics used to evaluate all of it.

pub mod error;
pub mod folds;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod overlay;
pub mod phantom;
pub mod pngio;
pub mod preprocess;
pub mod quantify;
pub mod segnet;
pub mod stats;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Class, Grid, Image, LabelMask, PatientStudy, PixelSpacing, Population, SliceRecord};

//! Dataset ingestion, preprocessing, stratified splitting, and the
//! anatomy-respecting augmentation pipeline.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

mod augment;
mod folds;
mod foreground;
mod manifest;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use folds::{make_folds, read_fold_csv, write_fold_csv, FoldSplit};
pub use foreground::{extract_foreground, Foreground};
pub use manifest::{load_manifest, write_manifest};

/// Binary diagnosis label. Malignant is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            other => Err(Error::Validation(format!("unknown label {other:?}"))),
        }
    }
}

/// Radiologist risk category attached to a lesion; used only as an
/// evaluation subgroup key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BiRads {
    B2,
    B3,
    B4A,
    B4B,
    B4C,
    B5,
}

impl BiRads {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "2" => Ok(BiRads::B2),
            "3" => Ok(BiRads::B3),
            "4A" => Ok(BiRads::B4A),
            "4B" => Ok(BiRads::B4B),
            "4C" => Ok(BiRads::B4C),
            "5" => Ok(BiRads::B5),
            other => Err(Error::Validation(format!("unknown BI-RADS category {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiRads::B2 => "2",
            BiRads::B3 => "3",
            BiRads::B4A => "4A",
            BiRads::B4B => "4B",
            BiRads::B4C => "4C",
            BiRads::B5 => "5",
        }
    }

    /// Low-suspicion (2-3) vs high-suspicion (4-5) bucket.
    pub fn low_suspicion(self) -> bool {
        matches!(self, BiRads::B2 | BiRads::B3)
    }
}

/// One dataset sample: decoded image plus label and optional metadata.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub image: Raster,
    pub label: Label,
    pub patient_id: Option<String>,
    pub birads: Option<BiRads>,
    pub center: Option<String>,
}

impl ImageRecord {
    /// Enforces the record invariants (image size, channel count).
    pub fn validate(&self) -> Result<()> {
        if self.image.height() < 32 || self.image.width() < 32 {
            return Err(Error::Validation(format!(
                "image {} is {}x{}, below the 32x32 minimum",
                self.image_id,
                self.image.width(),
                self.image.height()
            )));
        }
        Ok(())
    }
}

/// Converts rasters to a standardized model input batch `(B, side, side, 3)`.
/// Pixels are scaled to [0,1] then standardized with fixed mean 0.5 and
/// std 0.5; grayscale images are replicated to three channels.
pub fn batch_to_input(images: &[&Raster], side: usize) -> Result<Array4<f64>> {
    let mut out = Array4::<f64>::zeros((images.len(), side, side, 3));
    for (b, img) in images.iter().enumerate() {
        if img.width() != side || img.height() != side {
            return Err(Error::Shape(format!(
                "expected {side}x{side} input, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let rgb = img.to_rgb();
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    let v = rgb.get(y, x, c) as f64 / 255.0;
                    out[(b, y, x, c)] = (v - 0.5) / 0.5;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Minimal valid record with a 32x32 blank image.
    pub fn record(id: &str, label: Label, patient_id: Option<&str>) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            image: Raster::filled(32, 32, 1, 0),
            label,
            patient_id: patient_id.map(str::to_string),
            birads: None,
            center: None,
        }
    }
}

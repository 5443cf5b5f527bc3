//! Manifest CSV ingestion.
//!
//! Schema: header `image_path,label[,patient_id][,birads][,center]`,
//! UTF-8, LF line endings. Labels are matched case-insensitively and
//! mapped benign -> 0, malignant -> 1. The `image_path` doubles as the
//! record's `image_id` and must be unique.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::Raster;

use super::{BiRads, ImageRecord, Label};

const KNOWN_COLUMNS: [&str; 5] = ["image_path", "label", "patient_id", "birads", "center"];

/// Loads every row of a manifest, decoding each referenced image.
/// Row order is preserved.
pub fn load_manifest(manifest_path: &Path, image_root: &Path) -> Result<Vec<ImageRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest_path)
        .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", manifest_path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Ingestion(format!("bad manifest header: {e}")))?
        .clone();
    for col in headers.iter() {
        if !KNOWN_COLUMNS.contains(&col) {
            return Err(Error::Validation(format!("unknown manifest column {col:?}")));
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(path_col), Some(label_col)) = (col("image_path"), col("label")) else {
        return Err(Error::Validation(
            "manifest must have image_path and label columns".into(),
        ));
    };
    let patient_col = col("patient_id");
    let birads_col = col("birads");
    let center_col = col("center");

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2; // 1-based, after the header
        let row = row.map_err(|e| Error::Ingestion(format!("manifest row {rownum}: {e}")))?;
        let rel = row
            .get(path_col)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Validation(format!("row {rownum}: empty image_path")))?;
        if !seen.insert(rel.to_string()) {
            return Err(Error::Validation(format!(
                "row {rownum}: duplicate image_id {rel:?}"
            )));
        }
        let label = Label::parse(row.get(label_col).unwrap_or(""))
            .map_err(|e| Error::Validation(format!("row {rownum}: {e}")))?;
        let opt = |idx: Option<usize>| {
            idx.and_then(|c| row.get(c))
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        let birads = match opt(birads_col) {
            Some(s) => Some(
                BiRads::parse(&s).map_err(|e| Error::Validation(format!("row {rownum}: {e}")))?,
            ),
            None => None,
        };
        let full: PathBuf = image_root.join(rel);
        if !full.exists() {
            return Err(Error::Ingestion(format!(
                "row {rownum}: image file {} does not exist",
                full.display()
            )));
        }
        let image = Raster::load_png(&full)
            .map_err(|e| Error::Ingestion(format!("row {rownum}: {e}")))?;
        let record = ImageRecord {
            image_id: rel.to_string(),
            image,
            label,
            patient_id: opt(patient_col),
            birads,
            center: opt(center_col),
        };
        record
            .validate()
            .map_err(|e| Error::Validation(format!("row {rownum}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

/// Writes a manifest for a set of records whose images live under
/// `image_root` at their `image_id` paths.
pub fn write_manifest(records: &[ImageRecord], manifest_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(manifest_path)
        .map_err(|e| Error::Runtime(format!("cannot write manifest: {e}")))?;
    w.write_record(["image_path", "label", "patient_id", "birads", "center"])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    for r in records {
        let label = match r.label {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        };
        w.write_record([
            r.image_id.as_str(),
            label,
            r.patient_id.as_deref().unwrap_or(""),
            r.birads.map(|b| b.as_str()).unwrap_or(""),
            r.center.as_deref().unwrap_or(""),
        ])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Runtime(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;

    fn write_png(dir: &Path, name: &str, value: u8) {
        Raster::filled(32, 32, 1, value).save_png(&dir.join(name)).unwrap();
    }

    fn write_csv(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("manifest.csv");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn two_row_manifest_maps_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 10);
        write_png(dir.path(), "b.png", 20);
        let m = write_csv(
            dir.path(),
            "image_path,label\na.png,benign\nb.png,malignant\n",
        );
        let records = load_manifest(&m, dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(
            records.iter().map(|r| r.label.index()).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert_eq!(records[0].image_id, "a.png");
    }

    #[test]
    fn label_case_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 10);
        let m = write_csv(dir.path(), "image_path,label\na.png,Malignant\n");
        let records = load_manifest(&m, dir.path()).unwrap();
        assert_eq!(records[0].label, Label::Malignant);
    }

    #[test]
    fn missing_file_is_an_ingestion_error_naming_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_csv(dir.path(), "image_path,label\nghost.png,benign\n");
        let err = load_manifest(&m, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn unknown_label_and_duplicates_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 10);
        let m = write_csv(dir.path(), "image_path,label\na.png,cyst\n");
        assert!(matches!(
            load_manifest(&m, dir.path()),
            Err(Error::Validation(_))
        ));
        let m = write_csv(
            dir.path(),
            "image_path,label\na.png,benign\na.png,benign\n",
        );
        let err = load_manifest(&m, dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn unknown_column_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_csv(dir.path(), "image_path,label,notes\na.png,benign,x\n");
        assert!(matches!(
            load_manifest(&m, dir.path()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn optional_metadata_is_parsed() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 10);
        let m = write_csv(
            dir.path(),
            "image_path,label,patient_id,birads,center\na.png,malignant,P7,4b,GD\n",
        );
        let records = load_manifest(&m, dir.path()).unwrap();
        assert_eq!(records[0].patient_id.as_deref(), Some("P7"));
        assert_eq!(records[0].birads, Some(BiRads::B4B));
        assert_eq!(records[0].center.as_deref(), Some("GD"));
    }
}

//! Stratified k-fold splitting with optional patient grouping.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

use super::{ImageRecord, Label};

/// Assignment of every image id to one fold in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, image_id: &str) -> Option<usize> {
        self.assignments.get(image_id).copied()
    }

    /// Ids assigned to `fold`, in deterministic (sorted) order.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Splits records into `k` stratified folds, deterministic in `seed`.
///
/// When `patient_id` is present all images of a patient land in one fold;
/// stratification is then best-effort at the group level. Groups are
/// shuffled, processed largest first, and greedily assigned to the fold
/// with the fewest samples, breaking ties toward the fold whose class
/// balance the group improves most.
pub fn make_folds(records: &[ImageRecord], k: usize, seed_value: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Validation(format!("fold count {k} must be >= 2")));
    }
    let benign = records.iter().filter(|r| r.label == Label::Benign).count();
    let malignant = records.len() - benign;
    if benign < k || malignant < k {
        return Err(Error::Validation(format!(
            "need at least {k} samples per class, got {benign} benign / {malignant} malignant"
        )));
    }

    // Group images by patient; images without a patient are singletons.
    let mut groups: BTreeMap<String, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        let key = match &r.patient_id {
            Some(p) => format!("p:{p}"),
            None => format!("i:{}", r.image_id),
        };
        groups.entry(key).or_default().push(r);
    }
    let mut groups: Vec<Vec<&ImageRecord>> = groups.into_values().collect();
    let mut rng = seed::stream_tagged(seed_value, &["folds", &k.to_string()]);
    groups.shuffle(&mut rng);
    // Largest groups first so they can still be balanced; stable within size.
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let global_frac = malignant as f64 / records.len() as f64;
    let mut totals = vec![0usize; k];
    let mut positives = vec![0usize; k];
    let mut assignments = BTreeMap::new();
    for group in groups {
        let group_pos = group.iter().filter(|r| r.label == Label::Malignant).count();
        let mut best = 0usize;
        let mut best_key = (usize::MAX, f64::INFINITY);
        for f in 0..k {
            let new_total = totals[f] + group.len();
            let new_frac = (positives[f] + group_pos) as f64 / new_total as f64;
            let key = (new_total, (new_frac - global_frac).abs());
            if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1 - 1e-12) {
                best_key = key;
                best = f;
            }
        }
        totals[best] += group.len();
        positives[best] += group_pos;
        for r in &group {
            assignments.insert(r.image_id.clone(), best);
        }
    }
    Ok(FoldSplit { k, assignments })
}

/// Writes `image_id,fold` rows, sorted by image id.
pub fn write_fold_csv(split: &FoldSplit, path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Runtime(format!("fold csv: {e}")))?;
    w.write_record(["image_id", "fold"])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    for (id, fold) in &split.assignments {
        w.write_record([id.as_str(), &fold.to_string()])
            .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Runtime(e.to_string()))?;
    Ok(())
}

pub fn read_fold_csv(path: &Path) -> Result<FoldSplit> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Ingestion(format!("cannot open fold file: {e}")))?;
    let mut assignments = BTreeMap::new();
    let mut max_fold = 0usize;
    for row in reader.records() {
        let row = row.map_err(|e| Error::Ingestion(e.to_string()))?;
        let id = row
            .get(0)
            .ok_or_else(|| Error::Validation("fold row missing image_id".into()))?;
        let fold: usize = row
            .get(1)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Validation(format!("bad fold index for {id}")))?;
        max_fold = max_fold.max(fold);
        if assignments.insert(id.to_string(), fold).is_some() {
            return Err(Error::Validation(format!("duplicate image_id {id} in fold file")));
        }
    }
    Ok(FoldSplit { k: max_fold + 1, assignments })
}

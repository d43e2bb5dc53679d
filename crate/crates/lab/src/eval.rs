//! Offline evaluation of saved predictions against ground-truth masks.
//!
//! Every `<id>_pred.vol.json` (or plain `<id>.vol.json`) in the prediction
//! directory is paired with `<id>_mask.vol.json` (or `<id>.vol.json`) in the
//! mask directory.

use crate::error::{LabError, Result};
use crate::trainer::EvalRow;
use crate::volio;
use afl_core::metrics::{confusion, SampleMetrics};
use std::fs;
use std::path::{Path, PathBuf};

pub const MEAN_ID: &str = "mean";

fn volume_bases(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| LabError::io(dir, e))? {
        let path = entry.map_err(|e| LabError::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(".vol.json") {
            out.push((stem.to_string(), volio::base_path(&path)));
        }
    }
    out.sort();
    Ok(out)
}

fn find_mask(mask_dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}_mask"), id.to_string()]
        .into_iter()
        .map(|b| mask_dir.join(b))
        .find(|b| volio::header_path(b).is_file())
}

/// One row per prediction, sorted by id.
pub fn eval_dirs(pred_dir: &Path, mask_dir: &Path, threshold: f64) -> Result<Vec<EvalRow>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(LabError::Config("threshold must lie in (0, 1)".into()));
    }
    let mut rows = Vec::new();
    for (stem, base) in volume_bases(pred_dir)? {
        let id = stem.strip_suffix("_pred").unwrap_or(&stem);
        let mask_base = find_mask(mask_dir, id)
            .ok_or_else(|| LabError::Data(format!("no mask for `{id}` in {}", mask_dir.display())))?;
        let pred = volio::read_image(&base)?;
        let mask = volio::read_mask(&mask_base)?;
        let c = confusion(&pred, &mask, threshold)?;
        rows.push(EvalRow::new(id, &SampleMetrics::from(&c)));
    }
    if rows.is_empty() {
        return Err(LabError::Data(format!("no volumes in {}", pred_dir.display())));
    }
    Ok(rows)
}

/// Appends the mean row.
pub fn with_mean(mut rows: Vec<EvalRow>) -> Vec<EvalRow> {
    if let Some(m) = SampleMetrics::mean(rows.iter().map(EvalRow::metrics).collect::<Vec<_>>().iter()) {
        rows.push(EvalRow::new(MEAN_ID, &m));
    }
    rows
}

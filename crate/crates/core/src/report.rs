//! CSV report writers (and parsers, so reports round-trip) plus the 3x3
//! grade-grid image export.

use std::path::Path;

use ndarray::Array2;

use crate::data::write_gray;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix4, PatchGrid, ThresholdSweepResult, GRADES};

/// Pixel-level report: one row per threshold plus a trailing summary row.
/// Floats use the shortest round-trip representation, so parsing the file
/// back recovers the exact values.
pub fn write_pixel_report(path: &Path, result: &ThresholdSweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["threshold", "mean_dice", "mean_iou"])
        .map_err(csv_err)?;
    for (t, d, i) in &result.rows {
        w.write_record([t.to_string(), d.to_string(), i.to_string()])
            .map_err(csv_err)?;
    }
    w.write_record([
        "summary".to_string(),
        result.overall_dice.to_string(),
        result.overall_iou.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub fn read_pixel_report(path: &Path) -> Result<ThresholdSweepResult> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    let mut overall = None;
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != 3 {
            return Err(Error::shape("pixel report row must have 3 fields"));
        }
        if &record[0] == "summary" {
            overall = Some((parse_f64(&record[1])?, parse_f64(&record[2])?));
        } else {
            rows.push((
                parse_f64(&record[0])?,
                parse_f64(&record[1])?,
                parse_f64(&record[2])?,
            ));
        }
    }
    let (overall_dice, overall_iou) =
        overall.ok_or_else(|| Error::shape("pixel report missing summary row"))?;
    Ok(ThresholdSweepResult {
        rows,
        overall_dice,
        overall_iou,
    })
}

/// Patch-level report: the 4x4 confusion matrix (rows = ground truth)
/// followed by per-class precision and recall. Undefined ratios are left
/// empty rather than written as 0.
pub fn write_patch_report(path: &Path, cm: &ConfusionMatrix4) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["row", "none", "low", "middle", "high"])
        .map_err(csv_err)?;
    for (gi, grade) in GRADES.iter().enumerate() {
        let mut rec = vec![format!("gt_{}", grade.name())];
        for pi in 0..4 {
            rec.push(cm.counts[gi][pi].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut prec = vec!["precision".to_string()];
    let mut rec_row = vec!["recall".to_string()];
    for class in 0..4 {
        prec.push(fmt(cm.precision(class)));
        rec_row.push(fmt(cm.recall(class)));
    }
    w.write_record(&prec).map_err(csv_err)?;
    w.write_record(&rec_row).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

/// Parse a patch report back into the confusion matrix.
pub fn read_patch_report(path: &Path) -> Result<ConfusionMatrix4> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut cm = ConfusionMatrix4::default();
    for record in r.records() {
        let record = record.map_err(csv_err)?;
        let label = &record[0];
        if let Some(grade_name) = label.strip_prefix("gt_") {
            let gi = GRADES
                .iter()
                .position(|g| g.name() == grade_name)
                .ok_or_else(|| Error::shape(format!("unknown grade `{grade_name}`")))?;
            for pi in 0..4 {
                cm.counts[gi][pi] = record[pi + 1]
                    .parse::<u64>()
                    .map_err(|_| Error::shape("bad confusion count"))?;
            }
        }
    }
    Ok(cm)
}

/// Export a 3x3 grade grid as a tiny grayscale image with the four levels
/// {0, 85, 170, 255}.
pub fn write_grid_image(path: &Path, grid: &PatchGrid) -> Result<()> {
    let mut img = Array2::<u8>::zeros((3, 3));
    for r in 0..3 {
        for c in 0..3 {
            img[[r, c]] = grid[r][c].gray_level();
        }
    }
    write_gray(path, &img)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Shape(format!("csv: {e}"))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::shape(format!("bad float `{s}` in report")))
}

//! VOI statistics, report comparison and masked histograms.
//!
//! Standard deviations are population deviations (divide by the voxel count):
//! a VOI is treated as the complete region, not a sample of it.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::io::write_atomic;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq)]
pub struct VoiRow {
    pub name: String,
    pub n_voxels: usize,
    pub volume_ml: f64,
    pub mean: f64,
    pub sd: f64,
    /// `sd / mean`; NaN when the mean is not positive.
    pub cv: f64,
}

/// Statistics of one image over a set of VOIs, ordered by increasing volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VoiReport {
    pub image: String,
    pub rows: Vec<VoiRow>,
}

impl VoiReport {
    pub fn row(&self, name: &str) -> Option<&VoiRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

pub fn voi_stats(image_label: &str, img: &Volume, vois: &[(String, Volume)]) -> Result<VoiReport> {
    for (name, mask) in vois {
        img.check_same_grid(mask, &format!("VOI {name}"))?;
        ensure!(mask.count_nonzero() > 0, Invalid, "VOI {name} is empty");
    }
    let mut rows: Vec<VoiRow> = vois
        .par_iter()
        .map(|(name, mask)| {
            let idx = mask.mask_indices();
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| img.data()[i]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (img.data()[i] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            VoiRow {
                name: name.clone(),
                n_voxels: idx.len(),
                volume_ml: n * mask.voxel_volume_ml(),
                mean,
                sd,
                cv: if mean > 0.0 { sd / mean } else { f64::NAN },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.n_voxels.cmp(&b.n_voxels).then_with(|| a.name.cmp(&b.name)));
    Ok(VoiReport {
        image: image_label.to_string(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub volume_ml: f64,
    /// `100 (mean_a - mean_b) / mean_b`
    pub mean_relative_difference_percent: f64,
    /// `cv_a - cv_b`
    pub cv_difference: f64,
}

/// Per-VOI comparison of report `a` against reference `b`, in `a`'s order.
pub fn compare_reports(a: &VoiReport, b: &VoiReport) -> Result<Vec<ComparisonRow>> {
    let missing_in_b: Vec<&str> = a.rows.iter().filter(|r| b.row(&r.name).is_none()).map(|r| r.name.as_str()).collect();
    let missing_in_a: Vec<&str> = b.rows.iter().filter(|r| a.row(&r.name).is_none()).map(|r| r.name.as_str()).collect();
    ensure!(
        missing_in_a.is_empty() && missing_in_b.is_empty(),
        Invalid,
        "VOI sets differ: missing in {}: {:?}; missing in {}: {:?}",
        b.image,
        missing_in_b,
        a.image,
        missing_in_a
    );
    Ok(a
        .rows
        .iter()
        .map(|ra| {
            let rb = b.row(&ra.name).expect("checked above");
            ComparisonRow {
                name: ra.name.clone(),
                volume_ml: ra.volume_ml,
                mean_relative_difference_percent: 100.0 * (ra.mean - rb.mean) / rb.mean,
                cv_difference: ra.cv - rb.cv,
            }
        })
        .collect())
}

/// Counts of masked voxel values in `n_bins` equal bins over `range`;
/// values outside the range land in the edge bins.
pub fn masked_histogram(img: &Volume, mask: &Volume, n_bins: usize, range: (f64, f64)) -> Result<Vec<u64>> {
    img.check_same_grid(mask, "mask")?;
    ensure!(n_bins >= 1, Invalid, "histogram needs at least one bin");
    let (lo, hi) = range;
    ensure!(lo < hi, Invalid, "histogram range must satisfy lo < hi, got ({lo}, {hi})");
    let idx = mask.mask_indices();
    ensure!(!idx.is_empty(), Invalid, "histogram mask is empty");
    let mut counts = vec![0u64; n_bins];
    for i in idx {
        let t = (img.data()[i] - lo) / (hi - lo) * n_bins as f64;
        let b = if t.is_nan() { 0 } else { (t.floor().max(0.0) as usize).min(n_bins - 1) };
        counts[b] += 1;
    }
    Ok(counts)
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

const REPORT_HEADER: [&str; 7] = ["image", "voi", "n_voxels", "volume_ml", "mean", "sd", "cv"];
const COMPARISON_HEADER: [&str; 6] = [
    "image_a",
    "image_b",
    "voi",
    "volume_ml",
    "mean_relative_difference_percent",
    "cv_difference",
];

pub fn write_reports_csv(reports: &[VoiReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(|e| csv_error(path, e))?;
    for rep in reports {
        for r in &rep.rows {
            w.write_record([
                rep.image.clone(),
                r.name.clone(),
                r.n_voxels.to_string(),
                r.volume_ml.to_string(),
                r.mean.to_string(),
                r.sd.to_string(),
                r.cv.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| csv_error(path, e))?;
    write_atomic(path, &bytes)
}

/// Reads reports written by [`write_reports_csv`], grouped by image in file order.
pub fn read_reports_csv(path: impl AsRef<Path>) -> Result<Vec<VoiReport>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    ensure!(
        header.iter().eq(REPORT_HEADER.iter().copied()),
        Invalid,
        "{}: expected columns {:?}",
        path.display(),
        REPORT_HEADER
    );
    let mut reports: Vec<VoiReport> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| csv_error(path, format!("row {}: column {}: {e}", line + 2, REPORT_HEADER[k])))
        };
        let row = VoiRow {
            name: rec[1].to_string(),
            n_voxels: num(2)? as usize,
            volume_ml: num(3)?,
            mean: num(4)?,
            sd: num(5)?,
            cv: num(6)?,
        };
        match reports.last_mut() {
            Some(rep) if rep.image == rec[0] => rep.rows.push(row),
            _ => reports.push(VoiReport {
                image: rec[0].to_string(),
                rows: vec![row],
            }),
        }
    }
    Ok(reports)
}

pub fn write_comparison_csv(pairs: &[(&VoiReport, &VoiReport)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_HEADER).map_err(|e| csv_error(path, e))?;
    for (a, b) in pairs {
        for c in compare_reports(a, b)? {
            w.write_record([
                a.image.clone(),
                b.image.clone(),
                c.name,
                c.volume_ml.to_string(),
                c.mean_relative_difference_percent.to_string(),
                c.cv_difference.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| csv_error(path, e))?;
    write_atomic(path, &bytes)
}

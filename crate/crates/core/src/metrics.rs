//! Counting and segmentation evaluation metrics.
//!
//! Count tables are indexed `[image][category]`. GAME works on density
//! maps and point annotations at density-map resolution. ABO and mAP^r
//! work on binary instance masks grouped by image and category.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::Grid;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// IoU thresholds reported for mAP^r.
pub const MAP_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

/// Highest GAME level reported by default.
pub const MAX_GAME_LEVEL: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RmseVariant {
    Rmse,
    RelRmse,
    RmseNz,
    RelRmseNz,
}

impl RmseVariant {
    pub const ALL: [RmseVariant; 4] = [Self::Rmse, Self::RelRmse, Self::RmseNz, Self::RelRmseNz];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rmse => "rmse",
            Self::RelRmse => "relrmse",
            Self::RmseNz => "rmse-nz",
            Self::RelRmseNz => "relrmse-nz",
        }
    }

    fn nonzero_only(self) -> bool {
        matches!(self, Self::RmseNz | Self::RelRmseNz)
    }

    fn relative(self) -> bool {
        matches!(self, Self::RelRmse | Self::RelRmseNz)
    }
}

/// Per-category values and their mean. A category is `None` when the
/// variant has no images to evaluate it on (only possible for -nz); such
/// categories are left out of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReport {
    pub per_category: Vec<Option<f64>>,
    pub mean: f64,
}

impl CategoryReport {
    fn from_values(per_category: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_category.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self { per_category, mean }
    }

    pub fn excluded(&self) -> Vec<usize> {
        self.per_category
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| c)
            .collect()
    }
}

fn check_tables(predicted: &[Vec<u32>], truth: &[Vec<u32>]) -> Result<usize> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            format!("{} images", truth.len()),
            format!("{} predictions", predicted.len()),
        ));
    }
    let c = truth[0].len();
    if c == 0 {
        return Err(Error::InvalidArgument("no categories".into()));
    }
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != c || t.len() != c {
            return Err(Error::shape(format!("{c} categories"), format!("{}/{}", p.len(), t.len())));
        }
    }
    Ok(c)
}

/// RMSE or relRMSE per category, optionally restricted to images where
/// the category is present.
pub fn rmse_family(predicted: &[Vec<u32>], truth: &[Vec<u32>], variant: RmseVariant) -> Result<CategoryReport> {
    let c = check_tables(predicted, truth)?;
    let mut values = Vec::with_capacity(c);
    for cat in 0..c {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (p, t) in predicted.iter().zip(truth) {
            let (tc, pc) = (f64::from(t[cat]), f64::from(p[cat]));
            if variant.nonzero_only() && t[cat] == 0 {
                continue;
            }
            let sq = (tc - pc).powi(2);
            sum += if variant.relative() { sq / (tc + 1.0) } else { sq };
            n += 1;
        }
        if n == 0 {
            log::warn!("{}: category {cat} has no nonzero images, left out of the mean", variant.name());
            values.push(None);
        } else {
            values.push(Some((sum / n as f64).sqrt()));
        }
    }
    Ok(CategoryReport::from_values(values))
}

/// RMSE over all (image, category) pairs grouped by ground-truth count.
pub fn rmse_by_count(predicted: &[Vec<u32>], truth: &[Vec<u32>]) -> Result<BTreeMap<u32, (f64, usize)>> {
    check_tables(predicted, truth)?;
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (p, t) in predicted.iter().zip(truth) {
        for (&pc, &tc) in p.iter().zip(t) {
            let e = acc.entry(tc).or_default();
            e.0 += (f64::from(tc) - f64::from(pc)).powi(2);
            e.1 += 1;
        }
    }
    for v in acc.values_mut() {
        v.0 = (v.0 / v.1 as f64).sqrt();
    }
    Ok(acc)
}

/// Start offsets of `parts` near-equal integer cells over `len` (plus the
/// end), so boundaries at level n are a subset of those at n+1.
pub fn cell_bounds(len: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|k| k * len / parts).collect()
}

/// Σ over the 2^n × 2^n cells of |density sum − point count| for one
/// image and one category. Points are (row, col) at density resolution.
pub fn game(density: &Grid, points: &[(usize, usize)], n: u32) -> Result<f64> {
    let (h, w) = density.shape();
    if density.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if n > 16 {
        return Err(Error::InvalidArgument(format!("GAME level {n} too large")));
    }
    let parts = 1usize << n;
    let rows = cell_bounds(h, parts);
    let cols = cell_bounds(w, parts);
    let cell_of = |bounds: &[usize], x: usize| bounds[1..].partition_point(|&b| b <= x);
    let mut diff = vec![0.0f64; parts * parts];
    for i in 0..h {
        let ci = cell_of(&rows, i);
        for j in 0..w {
            diff[ci * parts + cell_of(&cols, j)] += density.get(i, j);
        }
    }
    for &(r, c) in points {
        if r >= h || c >= w {
            return Err(Error::InvalidArgument(format!("point ({r}, {c}) outside {h}x{w} map")));
        }
        diff[cell_of(&rows, r) * parts + cell_of(&cols, c)] -= 1.0;
    }
    Ok(diff.iter().map(|d| d.abs()).sum())
}

/// Maps a point given in input-image pixels to density-map cells.
pub fn to_density_resolution(y: f64, x: f64, image: (usize, usize), density: (usize, usize)) -> (usize, usize) {
    let r = (y * density.0 as f64 / image.0 as f64).floor().clamp(0.0, (density.0 - 1) as f64);
    let c = (x * density.1 as f64 / image.1 as f64).floor().clamp(0.0, (density.1 - 1) as f64);
    (r as usize, c as usize)
}

/// GAME(n) per category (mean over images) and the category mean.
/// `densities[i][c]` and `points[i][c]` belong to image i, category c.
pub fn game_dataset(densities: &[Vec<Grid>], points: &[Vec<Vec<(usize, usize)>>], n: u32) -> Result<CategoryReport> {
    if densities.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if densities.len() != points.len() {
        return Err(Error::shape(
            format!("{} images", densities.len()),
            format!("{} point sets", points.len()),
        ));
    }
    let c = densities[0].len();
    let mut sums = vec![0.0; c];
    for (d, p) in densities.iter().zip(points) {
        if d.len() != c || p.len() != c {
            return Err(Error::shape(format!("{c} categories"), format!("{}/{}", d.len(), p.len())));
        }
        for cat in 0..c {
            sums[cat] += game(&d[cat], &p[cat], n)?;
        }
    }
    let t = densities.len() as f64;
    Ok(CategoryReport::from_values(sums.into_iter().map(|s| Some(s / t)).collect()))
}

/// An instance mask with its owner and (for predictions) a score.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub image_id: String,
    pub category: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

fn categories_of(gt: &[InstanceMask]) -> Vec<usize> {
    let mut cats: Vec<usize> = gt.iter().map(|g| g.category).collect();
    cats.sort_unstable();
    cats.dedup();
    cats
}

/// Average best overlap: for each ground-truth instance the best IoU over
/// predictions of the same image and category, averaged per category and
/// then over categories. No ground truth gives 0.
pub fn abo(predicted: &[InstanceMask], truth: &[InstanceMask]) -> Result<f64> {
    let cats = categories_of(truth);
    if cats.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &cat in &cats {
        let mut sum = 0.0;
        let mut n = 0usize;
        for g in truth.iter().filter(|g| g.category == cat) {
            let mut best = 0.0f64;
            for p in predicted.iter().filter(|p| p.category == cat && p.image_id == g.image_id) {
                best = best.max(p.mask.iou(&g.mask)?);
            }
            sum += best;
            n += 1;
        }
        total += sum / n as f64;
    }
    Ok(total / cats.len() as f64)
}

/// All-point interpolated area under a precision/recall trace.
pub fn average_precision(tp: &[bool], num_truth: usize) -> f64 {
    if num_truth == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_truth as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Mean over categories (those with ground truth) of the average
/// precision. Predictions are ranked by score, ties by input order; each
/// takes the unmatched ground-truth instance of its image with the highest
/// IoU, provided it reaches `iou_threshold`.
pub fn map_r(predicted: &[InstanceMask], truth: &[InstanceMask], iou_threshold: f64) -> Result<f64> {
    let cats = categories_of(truth);
    if cats.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &cat in &cats {
        let gts: Vec<&InstanceMask> = truth.iter().filter(|g| g.category == cat).collect();
        let mut preds: Vec<&InstanceMask> = predicted.iter().filter(|p| p.category == cat).collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut matched = vec![false; gts.len()];
        let mut tp = Vec::with_capacity(preds.len());
        for p in preds {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts.iter().enumerate() {
                if matched[k] || g.image_id != p.image_id {
                    continue;
                }
                let iou = p.mask.iou(&g.mask)?;
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            if let Some((k, _)) = best {
                matched[k] = true;
            }
            tp.push(best.is_some());
        }
        total += average_precision(&tp, gts.len());
    }
    Ok(total / cats.len() as f64)
}

/// One line of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub variant: String,
    /// Category name, or `mean`.
    pub category: String,
    /// Empty when the category was excluded.
    pub value: Option<f64>,
}

pub fn report_rows(metric: &str, variant: &str, categories: &[String], report: &CategoryReport) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = categories
        .iter()
        .zip(&report.per_category)
        .map(|(name, v)| MetricRow {
            metric: metric.into(),
            variant: variant.into(),
            category: name.clone(),
            value: *v,
        })
        .collect();
    rows.push(MetricRow {
        metric: metric.into(),
        variant: variant.into(),
        category: "mean".into(),
        value: report.mean.is_finite().then_some(report.mean),
    });
    rows
}

pub fn write_report(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["metric", "variant", "category", "value"]).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<MetricRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

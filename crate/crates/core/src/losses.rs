//! Loss terms of the two-branch objective, their mini-batch combination
//! and the analytic gradients used by the trainer.
//!
//! Every per-image term that has an empty relevant category set (for
//! example no within-range category for the spatial-positive term) is
//! reported as `None` and left out of that term's batch average.

use crate::datamodel::{CategoryPartition, CountAnnotation, Grid, LossReport, Maps, PeakMap, PseudoMask};
use crate::error::{Error, Result};
use crate::peaks::ClassScores;

pub const DEFAULT_LAMBDA_RANK: f64 = 0.1;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// log σ(x)
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// log(1 − σ(x))
#[inline]
pub fn log_one_minus_sigmoid(x: f64) -> f64 {
    -softplus(x)
}

/// Multi-label soft-margin loss over the class confidence scores.
/// Categories in the within or beyond sets are positives.
pub fn class_loss(scores: &ClassScores, partition: &CategoryPartition) -> Result<f64> {
    let presence = check_presence(scores, partition)?;
    let c = scores.0.len() as f64;
    Ok(scores
        .0
        .iter()
        .zip(&presence)
        .map(|(&s, &y)| if y { -log_sigmoid(s) } else { -log_one_minus_sigmoid(s) })
        .sum::<f64>()
        / c)
}

/// d class_loss / d s^c
pub fn class_loss_gradient(scores: &ClassScores, partition: &CategoryPartition) -> Result<Vec<f64>> {
    let presence = check_presence(scores, partition)?;
    let c = scores.0.len() as f64;
    Ok(scores
        .0
        .iter()
        .zip(&presence)
        .map(|(&s, &y)| (sigmoid(s) - if y { 1.0 } else { 0.0 }) / c)
        .collect())
}

fn check_presence(scores: &ClassScores, partition: &CategoryPartition) -> Result<Vec<bool>> {
    let presence = partition.presence();
    if presence.len() != scores.0.len() || presence.is_empty() {
        return Err(Error::shape(
            format!("{} scores", presence.len()),
            format!("{} scores", scores.0.len()),
        ));
    }
    Ok(presence)
}

fn check_mask(masked_density: &Grid, mask: &PseudoMask, cardinality_s: usize) -> Result<f64> {
    masked_density.ensure_same_shape(&mask.values)?;
    if cardinality_s == 0 {
        return Err(Error::InvalidArgument("|S| must be at least 1".into()));
    }
    let norm = mask.values.sum();
    if norm <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(norm)
}

/// One within-range category's contribution to the spatial-positive term.
pub fn spatial_positive_loss(masked_density: &Grid, mask: &PseudoMask, cardinality_s: usize) -> Result<f64> {
    let norm = check_mask(masked_density, mask, cardinality_s)?;
    let s: f64 = masked_density
        .as_slice()
        .iter()
        .zip(mask.values.as_slice())
        .map(|(&d, &b)| b * log_sigmoid(d))
        .sum();
    Ok(-s / (cardinality_s as f64 * norm))
}

/// Gradient of [`spatial_positive_loss`] with respect to the masked
/// density, routed through the mask: exactly zero wherever the mask is 0.
pub fn sp_plus_gradient(masked_density: &Grid, mask: &PseudoMask, cardinality_s: usize) -> Result<Grid> {
    masked_density.ensure_same_shape(&mask.values)?;
    let norm = mask.values.sum();
    if norm <= 0.0 {
        return Ok(Grid::zeros(masked_density.height(), masked_density.width()));
    }
    check_mask(masked_density, mask, cardinality_s)?;
    let scale = 1.0 / (cardinality_s as f64 * norm);
    let data = masked_density
        .as_slice()
        .iter()
        .zip(mask.values.as_slice())
        .map(|(&d, &b)| if b == 0.0 { 0.0 } else { -(1.0 - sigmoid(d)) * scale * b })
        .collect();
    Grid::from_vec(masked_density.height(), masked_density.width(), data)
}

/// One absent category's contribution to the spatial-negative term.
pub fn spatial_negative_loss(density: &Grid, cardinality_a: usize) -> Result<f64> {
    if cardinality_a == 0 {
        return Err(Error::InvalidArgument("|A| must be at least 1".into()));
    }
    let s: f64 = density.as_slice().iter().map(|&d| log_one_minus_sigmoid(d)).sum();
    Ok(-s / (cardinality_a as f64 * density.len() as f64))
}

pub fn spatial_negative_gradient(density: &Grid, cardinality_a: usize) -> Result<Grid> {
    if cardinality_a == 0 {
        return Err(Error::InvalidArgument("|A| must be at least 1".into()));
    }
    let scale = 1.0 / (cardinality_a as f64 * density.len() as f64);
    Ok(density.map(|d| sigmoid(d) * scale))
}

/// Squared count error over the absent and within-range categories of
/// `partition`. Returns 0 (with a debug diagnostic) when both are empty.
pub fn global_mse_loss(predicted_counts: &[f64], labels: &CountAnnotation, partition: &CategoryPartition) -> Result<f64> {
    Ok(mse_parts(predicted_counts, labels, partition)?.map(|(sq, _)| sq).unwrap_or(0.0))
}

/// d global_mse_loss / d t̂_c, zero outside A ∪ S.
pub fn global_mse_gradient(predicted_counts: &[f64], labels: &CountAnnotation, partition: &CategoryPartition) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; predicted_counts.len()];
    if let Some((_, n)) = mse_parts(predicted_counts, labels, partition)? {
        for &c in partition.absent.iter().chain(&partition.within) {
            let t = f64::from(labels.labels()[c].exact().unwrap_or(0));
            grad[c] = 2.0 * (predicted_counts[c] - t) / n;
        }
    }
    Ok(grad)
}

fn mse_parts(predicted_counts: &[f64], labels: &CountAnnotation, partition: &CategoryPartition) -> Result<Option<(f64, f64)>> {
    if predicted_counts.len() != labels.num_categories() {
        return Err(Error::shape(
            format!("{} counts", labels.num_categories()),
            format!("{} counts", predicted_counts.len()),
        ));
    }
    let n = partition.absent.len() + partition.within.len();
    if n == 0 {
        log::debug!("mse term has no absent or within-range categories");
        return Ok(None);
    }
    let mut sq = 0.0;
    for &c in partition.absent.iter().chain(&partition.within) {
        let t = labels.labels()[c]
            .exact()
            .ok_or_else(|| Error::InvalidArgument(format!("category {c} is beyond range but listed in A or S")))?;
        let d = predicted_counts[c] - f64::from(t);
        sq += d * d;
    }
    Ok(Some((sq / n as f64, n as f64)))
}

/// Zero-margin hinge on under-counting for beyond-range categories.
pub fn rank_loss(predicted_counts: &[f64], beyond_threshold: f64) -> f64 {
    if predicted_counts.is_empty() {
        return 0.0;
    }
    predicted_counts.iter().map(|&t| (beyond_threshold - t).max(0.0)).sum::<f64>() / predicted_counts.len() as f64
}

pub fn rank_gradient(predicted_counts: &[f64], beyond_threshold: f64) -> Vec<f64> {
    let n = predicted_counts.len() as f64;
    predicted_counts
        .iter()
        .map(|&t| if t < beyond_threshold { -1.0 / n } else { 0.0 })
        .collect()
}

/// Per-image loss terms before batch averaging; `None` marks a term whose
/// category set is empty for this image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImageTerms {
    pub class_loss: f64,
    pub sp_plus: Option<f64>,
    pub sp_minus: Option<f64>,
    pub mse: Option<f64>,
    pub rank: Option<f64>,
}

/// Number of images contributing to each batch-averaged term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TermCounts {
    pub images: usize,
    pub sp_plus: usize,
    pub sp_minus: usize,
    pub mse: usize,
    pub rank: usize,
}

pub fn term_counts(terms: &[ImageTerms]) -> TermCounts {
    TermCounts {
        images: terms.len(),
        sp_plus: terms.iter().filter(|t| t.sp_plus.is_some()).count(),
        sp_minus: terms.iter().filter(|t| t.sp_minus.is_some()).count(),
        mse: terms.iter().filter(|t| t.mse.is_some()).count(),
        rank: terms.iter().filter(|t| t.rank.is_some()).count(),
    }
}

fn batch_mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Averages each term over the batch and forms the weighted total.
pub fn combine_batch(terms: &[ImageTerms], lambda_rank: f64) -> Result<LossReport> {
    if terms.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let class_loss = batch_mean(terms.iter().map(|t| Some(t.class_loss)));
    let sp_plus = batch_mean(terms.iter().map(|t| t.sp_plus));
    let sp_minus = batch_mean(terms.iter().map(|t| t.sp_minus));
    let mse = batch_mean(terms.iter().map(|t| t.mse));
    let rank = batch_mean(terms.iter().map(|t| t.rank));
    let spatial = sp_plus + sp_minus;
    let global = mse + lambda_rank * rank;
    Ok(LossReport {
        class_loss,
        sp_plus,
        sp_minus,
        mse,
        rank,
        total: class_loss + spatial + global,
        lambda_rank,
    })
}

/// Which terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub spatial: bool,
    pub lambda_rank: f64,
}

/// Everything needed to evaluate the objective on one image.
#[derive(Debug, Clone)]
pub struct ImageLossInput<'a> {
    pub category_maps: &'a Maps,
    pub density_maps: &'a Maps,
    pub annotation: &'a CountAnnotation,
    /// Full partition; drives the classifier.
    pub partition: &'a CategoryPartition,
    /// Partition seen by the density branch (absent set may be subsampled).
    pub density_partition: &'a CategoryPartition,
    pub peaks: &'a [PeakMap],
    /// Pseudo masks, present exactly for within-range categories when the
    /// spatial term is active.
    pub masks: &'a [Option<PseudoMask>],
}

/// Per-image loss terms plus unnormalised gradients of each term.
#[derive(Debug, Clone)]
pub struct ImageObjective {
    pub terms: ImageTerms,
    pub class_scores: ClassScores,
    /// d class_loss / d M
    pub grad_category: Vec<f64>,
    /// d term / d D for each density term, in the order sp+, sp−, mse, rank.
    pub grad_density: [Option<Vec<f64>>; 4],
}

/// Evaluates every active term of the objective on one image together
/// with its gradient. The spatial-positive gradient is routed through the
/// pseudo masks; nothing flows back into the classifier through them.
pub fn image_objective(input: &ImageLossInput<'_>, active: ObjectiveTerms) -> Result<ImageObjective> {
    let cm = input.category_maps;
    let dm = input.density_maps;
    let c_total = input.annotation.num_categories();
    if cm.channels() != c_total || dm.channels() != c_total || input.peaks.len() != c_total {
        return Err(Error::shape(format!("{c_total} categories"), format!("{} maps", cm.channels())));
    }
    if (cm.height(), cm.width()) != (dm.height(), dm.width()) {
        return Err(Error::shape(
            format!("{}x{}", cm.height(), cm.width()),
            format!("{}x{}", dm.height(), dm.width()),
        ));
    }
    let (h, w) = (dm.height(), dm.width());
    let hw = h * w;

    // classifier
    let scores = ClassScores(input.peaks.iter().map(crate::peaks::class_confidence).collect());
    let class = class_loss(&scores, input.partition)?;
    let dscore = class_loss_gradient(&scores, input.partition)?;
    let mut grad_category = vec![0.0; c_total * hw];
    for (c, pm) in input.peaks.iter().enumerate() {
        let vals = pm.values.as_slice();
        let k = vals.iter().filter(|v| **v != 0.0).count();
        if k == 0 {
            continue;
        }
        let g = dscore[c] / k as f64;
        for (dst, &v) in grad_category[c * hw..(c + 1) * hw].iter_mut().zip(vals) {
            if v != 0.0 {
                *dst = g;
            }
        }
    }

    let counts: Vec<f64> = (0..c_total).map(|c| dm.channel_sum(c)).collect();
    let dp = input.density_partition;
    let mut terms = ImageTerms {
        class_loss: class,
        ..ImageTerms::default()
    };
    let mut grad_density: [Option<Vec<f64>>; 4] = [None, None, None, None];

    if active.spatial {
        // a within-range category whose category map has no peak at all
        // carries no pseudo ground truth and drops out of S here
        let with_mask: Vec<(usize, &PseudoMask)> = dp
            .within
            .iter()
            .filter_map(|&c| input.masks.get(c).and_then(Option::as_ref).map(|m| (c, m)))
            .collect();
        if !with_mask.is_empty() {
            let s_card = with_mask.len();
            let mut loss = 0.0;
            let mut grad = vec![0.0; c_total * hw];
            for &(c, mask) in &with_mask {
                let d = Grid::from_vec(h, w, dm.channel_slice(c).to_vec())?;
                let masked = crate::peaks::mask_density(&d, mask)?;
                loss += spatial_positive_loss(&masked, mask, s_card)?;
                let g = sp_plus_gradient(&masked, mask, s_card)?;
                grad[c * hw..(c + 1) * hw].copy_from_slice(g.as_slice());
            }
            terms.sp_plus = Some(loss);
            grad_density[0] = Some(grad);
        }
        if !dp.absent.is_empty() {
            let a_card = dp.absent.len();
            let mut loss = 0.0;
            let mut grad = vec![0.0; c_total * hw];
            for &c in &dp.absent {
                let d = Grid::from_vec(h, w, dm.channel_slice(c).to_vec())?;
                loss += spatial_negative_loss(&d, a_card)?;
                let g = spatial_negative_gradient(&d, a_card)?;
                grad[c * hw..(c + 1) * hw].copy_from_slice(g.as_slice());
            }
            terms.sp_minus = Some(loss);
            grad_density[1] = Some(grad);
        }
    }

    if !(dp.absent.is_empty() && dp.within.is_empty()) {
        terms.mse = Some(global_mse_loss(&counts, input.annotation, dp)?);
        let gc = global_mse_gradient(&counts, input.annotation, dp)?;
        grad_density[2] = Some(broadcast(&gc, hw));
    }

    if active.lambda_rank != 0.0 && !dp.beyond.is_empty() {
        let t_tilde = f64::from(input.annotation.beyond_threshold());
        let beyond: Vec<f64> = dp.beyond.iter().map(|&c| counts[c]).collect();
        terms.rank = Some(rank_loss(&beyond, t_tilde));
        let gb = rank_gradient(&beyond, t_tilde);
        let mut gc = vec![0.0; c_total];
        for (&c, g) in dp.beyond.iter().zip(gb) {
            gc[c] = g;
        }
        grad_density[3] = Some(broadcast(&gc, hw));
    }

    Ok(ImageObjective {
        terms,
        class_scores: scores,
        grad_category,
        grad_density,
    })
}

/// d t̂_c / d D^c is 1 everywhere on channel c.
fn broadcast(per_category: &[f64], hw: usize) -> Vec<f64> {
    per_category.iter().flat_map(|&g| std::iter::repeat_n(g, hw)).collect()
}

/// Batch loss report and per-image gradients (dL/dM, dL/dD) of the
/// batch-averaged objective.
pub fn batch_objective(objectives: &[ImageObjective], lambda_rank: f64) -> Result<(LossReport, Vec<(Vec<f64>, Vec<f64>)>)> {
    let terms: Vec<ImageTerms> = objectives.iter().map(|o| o.terms).collect();
    let report = combine_batch(&terms, lambda_rank)?;
    let counts = term_counts(&terms);
    let weights = [
        inv(counts.sp_plus),
        inv(counts.sp_minus),
        inv(counts.mse),
        lambda_rank * inv(counts.rank),
    ];
    let inv_n = inv(counts.images);
    let grads = objectives
        .iter()
        .map(|o| {
            let gm: Vec<f64> = o.grad_category.iter().map(|g| g * inv_n).collect();
            let mut gd = vec![0.0; gm.len()];
            for (part, &wgt) in o.grad_density.iter().zip(&weights) {
                if let Some(p) = part {
                    for (dst, v) in gd.iter_mut().zip(p) {
                        *dst += wgt * v;
                    }
                }
            }
            (gm, gd)
        })
        .collect();
    Ok((report, grads))
}

fn inv(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

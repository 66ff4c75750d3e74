//! Density-penalised proposal scoring for instance masks.
//!
//! For each peak, every proposal is scored as
//! `α·⟨R,P⟩ + ⟨R,P̂⟩ − β·⟨Q,P⟩ − γ·|1 − ⟨D,P⟩|` where R is the peak's
//! response map, P the proposal mask, P̂ its contour, Q the background
//! mask and D the category's density map; the best proposal wins.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Grid, Maps};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::peaks::extract_peaks;

pub const DEFAULT_BACKGROUND_QUANTILE: f64 = 0.5;
pub const DEFAULT_RESPONSE_SIGMA: f64 = 1.5;

/// Object proposal resampled to density-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub id: String,
    pub mask: BinaryMask,
    pub contour: BinaryMask,
}

impl Proposal {
    /// Resamples `mask` to `height`×`width` (nearest neighbour) and derives
    /// the contour there.
    pub fn new(id: impl Into<String>, mask: &BinaryMask, height: usize, width: usize) -> Self {
        let mask = mask.resample(height, width);
        let contour = mask.contour();
        Self {
            id: id.into(),
            mask,
            contour,
        }
    }

    pub fn area(&self) -> usize {
        self.mask.area()
    }
}

/// A peak together with its response map R.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakEvidence {
    pub row: usize,
    pub col: usize,
    pub category: usize,
    pub response: Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    /// ⟨R, P⟩
    pub instance: f64,
    /// ⟨R, P̂⟩
    pub boundary: f64,
    /// ⟨Q, P⟩
    pub background: f64,
    /// d_p
    pub density_penalty: f64,
    pub total: f64,
}

/// |1 − sum of the density inside the proposal|.
pub fn density_penalty(density: &Grid, proposal: &Proposal) -> Result<f64> {
    let p = proposal.mask.to_grid();
    Ok((1.0 - density.dot(&p)?).abs())
}

pub fn score_proposal(
    evidence: &PeakEvidence,
    proposal: &Proposal,
    background: &Grid,
    density: &Grid,
    weights: &ScoreWeights,
) -> Result<ScoreBreakdown> {
    let p = proposal.mask.to_grid();
    let contour = proposal.contour.to_grid();
    let instance = evidence.response.dot(&p)?;
    let boundary = evidence.response.dot(&contour)?;
    let bg = background.dot(&p)?;
    let dp = density_penalty(density, proposal)?;
    Ok(ScoreBreakdown {
        instance,
        boundary,
        background: bg,
        density_penalty: dp,
        total: weights.alpha * instance + boundary - weights.beta * bg - weights.gamma * dp,
    })
}

/// Best proposal for one peak.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub peak: usize,
    /// Index into the proposal list and its score; `None` when no proposal
    /// was available.
    pub best: Option<(usize, ScoreBreakdown)>,
}

/// Per-peak argmax over proposals. Ties go to the smaller proposal, then
/// to the earlier one. Several peaks may select the same proposal.
pub fn select_masks(
    peaks: &[PeakEvidence],
    proposals: &[Proposal],
    density: &Maps,
    background: &[Grid],
    weights: &ScoreWeights,
) -> Result<Vec<Selection>> {
    let mut out = Vec::with_capacity(peaks.len());
    for (pi, ev) in peaks.iter().enumerate() {
        if ev.category >= density.channels() || ev.category >= background.len() {
            return Err(Error::InvalidArgument(format!("peak category {} out of range", ev.category)));
        }
        let d = density.channel(ev.category);
        let q = &background[ev.category];
        let mut best: Option<(usize, ScoreBreakdown)> = None;
        for (k, prop) in proposals.iter().enumerate() {
            let s = score_proposal(ev, prop, q, &d, weights)?;
            let better = match &best {
                None => true,
                Some((bk, bs)) => s.total > bs.total || (s.total == bs.total && prop.area() < proposals[*bk].area()),
            };
            if better {
                best = Some((k, s));
            }
        }
        out.push(Selection { peak: pi, best });
    }
    Ok(out)
}

/// 1 where the category map falls below its `quantile` value (nearest-rank).
pub fn background_mask(category_map: &Grid, quantile: f64) -> Result<Grid> {
    if category_map.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidArgument(format!("quantile {quantile} outside [0, 1]")));
    }
    let mut sorted = category_map.as_slice().to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() - 1) as f64 * quantile).round() as usize;
    let cut = sorted[idx];
    Ok(category_map.map(|v| if v < cut { 1.0 } else { 0.0 }))
}

/// Stand-in response map when none is supplied: the positive part of the
/// category map, normalised to a maximum of 1, under a Gaussian window
/// centred on the peak.
pub fn fallback_response(category_map: &Grid, row: usize, col: usize, sigma: f64) -> Grid {
    let max = category_map.as_slice().iter().copied().fold(0.0f64, f64::max);
    let (h, w) = category_map.shape();
    let mut out = Grid::zeros(h, w);
    if max <= 0.0 {
        return out;
    }
    let two_s2 = 2.0 * sigma * sigma;
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f64 - row as f64).powi(2) + (j as f64 - col as f64).powi(2);
            out.set(i, j, category_map.get(i, j).max(0.0) / max * (-d2 / two_s2).exp());
        }
    }
    out
}

/// The `k` highest peaks of a category map, in descending order.
pub fn top_peaks(category_map: &Grid, radius: usize, k: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut peaks = extract_peaks(category_map, radius)?.peaks();
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    peaks.truncate(k);
    Ok(peaks)
}

/// Settings for scoring every peak of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringSetup {
    pub peak_radius: usize,
    pub background_quantile: f64,
    pub response_sigma: f64,
    pub weights: ScoreWeights,
}

/// Selection for one peak of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSelection {
    pub category: usize,
    pub row: usize,
    pub col: usize,
    /// Rank of the peak within its category (0 = highest).
    pub rank: usize,
    pub best: Option<(usize, ScoreBreakdown)>,
}

/// Scores all proposals for the `counts[c]` highest peaks of every
/// category map. `response` may supply R for (category, rank, row, col);
/// otherwise the windowed category map stands in.
pub fn score_image(
    category_maps: &Maps,
    density: &Maps,
    counts: &[u32],
    proposals: &[Proposal],
    setup: &ScoringSetup,
    response: &dyn Fn(usize, usize, usize, usize) -> Result<Option<Grid>>,
) -> Result<Vec<PeakSelection>> {
    let c_total = category_maps.channels();
    if density.channels() != c_total || counts.len() != c_total {
        return Err(Error::shape(
            format!("{c_total} categories"),
            format!("{} density maps, {} counts", density.channels(), counts.len()),
        ));
    }
    let mut peaks = Vec::new();
    let mut background = Vec::with_capacity(c_total);
    let mut meta = Vec::new();
    for c in 0..c_total {
        let m = category_maps.channel(c);
        background.push(background_mask(&m, setup.background_quantile)?);
        for (rank, (row, col, _)) in top_peaks(&m, setup.peak_radius, counts[c] as usize)?.into_iter().enumerate() {
            let r = match response(c, rank, row, col)? {
                Some(r) => {
                    r.ensure_same_shape(&m)?;
                    r
                }
                None => fallback_response(&m, row, col, setup.response_sigma),
            };
            peaks.push(PeakEvidence {
                row,
                col,
                category: c,
                response: r,
            });
            meta.push(rank);
        }
    }
    let selections = select_masks(&peaks, proposals, density, &background, &setup.weights)?;
    Ok(selections
        .into_iter()
        .zip(meta)
        .map(|(sel, rank)| {
            let p = &peaks[sel.peak];
            PeakSelection {
                category: p.category,
                row: p.row,
                col: p.col,
                rank,
                best: sel.best,
            }
        })
        .collect())
}

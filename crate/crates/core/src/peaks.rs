//! Local-maxima peak maps, class confidence scores and pseudo
//! ground-truth masks derived from the classification branch.

use log::debug;

use crate::datamodel::{Grid, PeakMap, PseudoMask};
use crate::error::{Error, Result};

pub const DEFAULT_PEAK_RADIUS: usize = 1;

/// Class confidence scores s^c, one per category.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

/// Keeps entries that strictly exceed every in-bounds neighbour within
/// Chebyshev radius `radius`; everything else becomes 0.
pub fn extract_peaks(map: &Grid, radius: usize) -> Result<PeakMap> {
    if map.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if radius == 0 {
        return Err(Error::InvalidArgument("peak radius must be at least 1".into()));
    }
    let (h, w) = map.shape();
    let src = map.as_slice();
    let mut out = Grid::zeros(h, w);
    for i in 0..h {
        let r0 = i.saturating_sub(radius);
        let r1 = (i + radius).min(h - 1);
        for j in 0..w {
            let v = src[i * w + j];
            let c0 = j.saturating_sub(radius);
            let c1 = (j + radius).min(w - 1);
            let mut is_peak = true;
            'scan: for ni in r0..=r1 {
                let row = &src[ni * w..ni * w + w];
                for (nj, &nv) in row.iter().enumerate().take(c1 + 1).skip(c0) {
                    if (ni != i || nj != j) && nv >= v {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                out.set(i, j, v);
            }
        }
    }
    Ok(PeakMap { values: out, radius })
}

/// Mean of the nonzero peak values; 0 for an empty peak map.
pub fn class_confidence(peaks: &PeakMap) -> f64 {
    let (sum, n) = peaks
        .values
        .as_slice()
        .iter()
        .filter(|v| **v != 0.0)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Outcome of pseudo-mask generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMaskOutcome {
    pub mask: PseudoMask,
    /// Fewer than `t_c` peaks were available; the smallest peak was used.
    pub fell_back: bool,
}

/// Binary mask of the locations whose peak value reaches the `t_c`-th
/// highest peak. Ties at the threshold all pass.
pub fn pseudo_mask(peaks: &PeakMap, t_c: u32) -> Result<PseudoMaskOutcome> {
    if t_c == 0 {
        return Err(Error::InvalidArgument("t_c must be at least 1".into()));
    }
    let mut values: Vec<f64> = peaks.values.as_slice().iter().copied().filter(|v| *v != 0.0).collect();
    if values.is_empty() {
        return Err(Error::NoPeaks);
    }
    let k = t_c as usize;
    let fell_back = values.len() < k;
    let threshold = if fell_back {
        debug!("only {} peaks for t_c = {t_c}; using smallest peak", values.len());
        values.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        // k-th largest: order statistic at index k-1 under descending order
        let (_, kth, _) = values.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        *kth
    };
    let mask = peaks.values.map(|v| if v != 0.0 && v >= threshold { 1.0 } else { 0.0 });
    Ok(PseudoMaskOutcome {
        mask: PseudoMask { values: mask, threshold },
        fell_back,
    })
}

/// Hadamard product of a density grid with a pseudo mask.
pub fn mask_density(density: &Grid, mask: &PseudoMask) -> Result<Grid> {
    density.ensure_same_shape(&mask.values)?;
    let data = density.as_slice().iter().zip(mask.values.as_slice()).map(|(d, b)| d * b).collect();
    Grid::from_vec(density.height(), density.width(), data)
}

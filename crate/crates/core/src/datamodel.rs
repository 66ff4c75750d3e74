//! Shared domain types: supervision labels, category partitions and the
//! spatial grids produced by the two network branches.
//!
//! Supervision is stored already clamped to the subitizing range. Raw
//! counts only exist in dataset files and are read back for evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First count outside the subitizing range.
pub const DEFAULT_BEYOND_THRESHOLD: u32 = 5;

/// Real-valued H×W grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} values", height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    /// Builds a grid from nested rows; all rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(height * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::shape(format!("row of {width}"), format!("row of {}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sum of the elementwise product.
    pub fn dot(&self, other: &Grid) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn ensure_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C×H×W stack of per-category grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Maps {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Maps {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::EmptyGrid);
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                format!("{channels}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_grids(grids: &[Grid]) -> Result<Self> {
        let first = grids.first().ok_or(Error::EmptyGrid)?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            first.ensure_same_shape(g)?;
            data.extend_from_slice(g.as_slice());
        }
        Self::from_vec(grids.len(), h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel_slice(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_slice_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel(&self, c: usize) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.channel_slice(c).to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel_sum(&self, c: usize) -> f64 {
        self.channel_slice(c).iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Classification-branch output M.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMaps(pub Maps);

/// Density-branch output D.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMaps(pub Maps);

impl std::ops::Deref for CategoryMaps {
    type Target = Maps;
    fn deref(&self) -> &Maps {
        &self.0
    }
}

impl std::ops::Deref for DensityMaps {
    type Target = Maps;
    fn deref(&self) -> &Maps {
        &self.0
    }
}

/// Per-category supervision label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CountLabel {
    /// Exact count inside `0..beyond_threshold`.
    Count(u32),
    /// Count at or above the beyond threshold; the exact value is withheld.
    Beyond,
}

impl CountLabel {
    pub fn is_absent(self) -> bool {
        self == CountLabel::Count(0)
    }

    /// Exact count if known.
    pub fn exact(self) -> Option<u32> {
        match self {
            CountLabel::Count(n) => Some(n),
            CountLabel::Beyond => None,
        }
    }
}

impl std::fmt::Display for CountLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CountLabel::Count(n) => write!(f, "{n}"),
            CountLabel::Beyond => f.write_str("BEYOND"),
        }
    }
}

/// Maps a raw instance count to a supervision label.
pub fn clamp_raw_count(raw_count: i64, beyond_threshold: u32) -> Result<CountLabel> {
    if raw_count < 0 {
        return Err(Error::InvalidArgument(format!("negative count {raw_count}")));
    }
    if raw_count >= i64::from(beyond_threshold) {
        Ok(CountLabel::Beyond)
    } else {
        Ok(CountLabel::Count(raw_count as u32))
    }
}

/// Image-level lower-count supervision for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountAnnotation {
    image_id: String,
    labels: Vec<CountLabel>,
    beyond_threshold: u32,
}

impl CountAnnotation {
    pub fn new(image_id: impl Into<String>, labels: Vec<CountLabel>, beyond_threshold: u32) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("annotation needs at least one category".into()));
        }
        if beyond_threshold < 2 {
            return Err(Error::InvalidArgument(format!(
                "beyond threshold must be at least 2, got {beyond_threshold}"
            )));
        }
        if let Some(bad) = labels.iter().find_map(|l| match l {
            CountLabel::Count(n) if *n >= beyond_threshold => Some(*n),
            _ => None,
        }) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} is not below the beyond threshold {beyond_threshold}"
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            labels,
            beyond_threshold,
        })
    }

    pub fn from_raw_counts(image_id: impl Into<String>, raw: &[i64], beyond_threshold: u32) -> Result<Self> {
        let labels = raw
            .iter()
            .map(|&r| clamp_raw_count(r, beyond_threshold))
            .collect::<Result<Vec<_>>>()?;
        Self::new(image_id, labels, beyond_threshold)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn labels(&self) -> &[CountLabel] {
        &self.labels
    }

    pub fn num_categories(&self) -> usize {
        self.labels.len()
    }

    pub fn beyond_threshold(&self) -> u32 {
        self.beyond_threshold
    }

    /// Mirror image keeps the counts.
    pub fn with_id(&self, image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            ..self.clone()
        }
    }
}

/// Split of category indices (0-based) into absent, within-range and
/// beyond-range sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategoryPartition {
    pub absent: Vec<usize>,
    pub within: Vec<usize>,
    pub beyond: Vec<usize>,
}

impl CategoryPartition {
    pub fn num_categories(&self) -> usize {
        self.absent.len() + self.within.len() + self.beyond.len()
    }

    /// Binary presence labels for the classifier.
    pub fn presence(&self) -> Vec<bool> {
        let mut out = vec![false; self.num_categories()];
        for &c in self.within.iter().chain(&self.beyond) {
            out[c] = true;
        }
        out
    }
}

pub fn partition_categories(ann: &CountAnnotation) -> CategoryPartition {
    let mut part = CategoryPartition::default();
    for (c, label) in ann.labels().iter().enumerate() {
        match label {
            CountLabel::Count(0) => part.absent.push(c),
            CountLabel::Count(_) => part.within.push(c),
            CountLabel::Beyond => part.beyond.push(c),
        }
    }
    part
}

/// Sparse local-maxima grid for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakMap {
    pub values: Grid,
    pub radius: usize,
}

impl PeakMap {
    /// Nonzero entries as (row, col, value), row-major.
    pub fn peaks(&self) -> Vec<(usize, usize, f64)> {
        let w = self.values.width();
        self.values
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i / w, i % w, *v))
            .collect()
    }
}

/// Binary pseudo ground-truth mask for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub values: Grid,
    pub threshold: f64,
}

impl PseudoMask {
    pub fn ones(&self) -> usize {
        self.values.as_slice().iter().filter(|v| **v != 0.0).count()
    }
}

/// Per-term losses for a mini-batch and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub class_loss: f64,
    pub sp_plus: f64,
    pub sp_minus: f64,
    pub mse: f64,
    pub rank: f64,
    pub total: f64,
    pub lambda_rank: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.class_loss, self.sp_plus, self.sp_minus, self.mse, self.rank, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

//! Binary masks and the run-length mask archive.
//!
//! Archive format (UTF-8 text, tab separated, one mask per line):
//!
//! ```text
//! # ilc-mask-archive v1
//! id  image_id  category  score  height  width  runs
//! ```
//!
//! `category` is `-` for category-agnostic masks such as proposals.
//! `runs` are space-separated run lengths over the row-major pixels,
//! alternating background/foreground and starting with background (a
//! leading run may be 0).

use std::path::Path;

use crate::datamodel::Grid;
use crate::error::{Error, Result};

pub const MASK_ARCHIVE_HEADER: &str = "# ilc-mask-archive v1";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), format!("{} bits", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    /// Nonzero grid entries become foreground.
    pub fn from_grid(grid: &Grid) -> Self {
        Self {
            height: grid.height(),
            width: grid.width(),
            bits: grid.as_slice().iter().map(|v| *v != 0.0).collect(),
        }
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_vec(
            self.height,
            self.width,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("consistent shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check(other)?;
        Ok(BinaryMask {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
            ..self.clone()
        })
    }

    fn check(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check(other)?;
        let (mut inter, mut uni) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(*a && *b);
            uni += usize::from(*a || *b);
        }
        Ok(if uni == 0 { 0.0 } else { inter as f64 / uni as f64 })
    }

    /// Nearest-neighbour resampling to `height`×`width`.
    pub fn resample(&self, height: usize, width: usize) -> BinaryMask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = BinaryMask::empty(height, width);
        for i in 0..height {
            let si = ((i as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            let si = si.min(self.height - 1);
            for j in 0..width {
                let sj = ((j as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
                out.set(i, j, self.get(si, sj.min(self.width - 1)));
            }
        }
        out
    }

    /// 3×3 dilation (`grow`) or erosion; out-of-bounds pixels count as
    /// background.
    fn morph(&self, grow: bool) -> BinaryMask {
        let (h, w) = (self.height, self.width);
        let mut out = BinaryMask::empty(h, w);
        for i in 0..h {
            for j in 0..w {
                let mut any = false;
                let mut all = true;
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        let v = ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w && self.get(ni as usize, nj as usize);
                        any |= v;
                        all &= v;
                    }
                }
                out.set(i, j, if grow { any } else { all });
            }
        }
        out
    }

    pub fn dilate(&self) -> BinaryMask {
        self.morph(true)
    }

    pub fn erode(&self) -> BinaryMask {
        self.morph(false)
    }

    /// Morphological gradient: dilation minus erosion.
    pub fn contour(&self) -> BinaryMask {
        let d = self.dilate();
        let e = self.erode();
        BinaryMask {
            bits: d.bits.iter().zip(&e.bits).map(|(a, b)| *a && !*b).collect(),
            ..self.clone()
        }
    }

    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        let mut on = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(on, r));
            on = !on;
        }
        if bits.len() != height * width {
            return Err(Error::format(
                "mask runs",
                format!("runs cover {} pixels, mask has {}", bits.len(), height * width),
            ));
        }
        Ok(Self { height, width, bits })
    }
}

/// One archive record.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub id: String,
    pub image_id: String,
    pub category: Option<String>,
    pub score: f64,
    pub mask: BinaryMask,
}

pub fn write_mask_archive(path: &Path, records: &[MaskRecord]) -> Result<()> {
    let mut text = String::from(MASK_ARCHIVE_HEADER);
    text.push('\n');
    for r in records {
        let runs: Vec<String> = r.mask.to_runs().iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.image_id,
            r.category.as_deref().unwrap_or("-"),
            r.score,
            r.mask.height(),
            r.mask.width(),
            runs.join(" ")
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_mask_archive(path: &Path) -> Result<Vec<MaskRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MASK_ARCHIVE_HEADER => {}
        _ => {
            return Err(Error::Annotation {
                path: path.to_path_buf(),
                line: 1,
                detail: format!("expected header `{MASK_ARCHIVE_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Annotation {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(format!("bad {what} `{s}`")));
        let height = num(f[4], "height")?;
        let width = num(f[5], "width")?;
        let runs = f[6].split_whitespace().map(|s| num(s, "run")).collect::<Result<Vec<_>>>()?;
        let mask = BinaryMask::from_runs(height, width, &runs).map_err(|e| err(e.to_string()))?;
        out.push(MaskRecord {
            id: f[0].to_string(),
            image_id: f[1].to_string(),
            category: (f[2] != "-").then(|| f[2].to_string()),
            score: f[3].parse().map_err(|_| err(format!("bad score `{}`", f[3])))?,
            mask,
        });
    }
    Ok(out)
}

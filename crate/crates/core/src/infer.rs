//! Counting unseen images, plus the prediction-dump and density-dump
//! file formats.
//!
//! Density dump layout (little endian):
//!
//! ```text
//! b"ILCD" | u32 version | u32 C | u32 H | u32 W | C·H·W f32, row-major per category
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{CategoryMaps, DensityMaps, Maps};
use crate::error::{Error, Result};
use crate::network::{Backbone, Image, Network};
use crate::peaks::{class_confidence, extract_peaks, ClassScores};

pub const DENSITY_DUMP_VERSION: u32 = 1;
const DENSITY_MAGIC: &[u8; 4] = b"ILCD";
pub const DENSITY_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub counts: Vec<u32>,
    /// Unrounded density sums ‖D^c‖.
    pub raw_sums: Vec<f64>,
    pub scores: ClassScores,
    pub density_maps: DensityMaps,
    pub category_maps: CategoryMaps,
}

/// Count from a class score and a density sum: zero when the class is
/// judged absent, otherwise the sum rounded half away from zero and
/// clamped at zero.
pub fn gated_count(score: f64, density_sum: f64) -> u32 {
    if score <= 0.0 || !density_sum.is_finite() {
        return 0;
    }
    density_sum.round().max(0.0) as u32
}

/// Class scores from category maps.
pub fn class_scores(maps: &CategoryMaps, radius: usize) -> Result<ClassScores> {
    (0..maps.channels())
        .map(|c| extract_peaks(&maps.channel(c), radius).map(|p| class_confidence(&p)))
        .collect::<Result<Vec<_>>>()
        .map(ClassScores)
}

/// Counts from already computed branch outputs.
pub fn counts_from_maps(
    category_maps: &CategoryMaps,
    density_maps: &DensityMaps,
    radius: usize,
) -> Result<(Vec<u32>, Vec<f64>, ClassScores)> {
    if category_maps.channels() != density_maps.channels() {
        return Err(Error::shape(
            format!("{} density channels", category_maps.channels()),
            format!("{}", density_maps.channels()),
        ));
    }
    let scores = class_scores(category_maps, radius)?;
    let raw: Vec<f64> = (0..density_maps.channels()).map(|c| density_maps.channel_sum(c)).collect();
    let counts = scores.0.iter().zip(&raw).map(|(&s, &t)| gated_count(s, t)).collect();
    Ok((counts, raw, scores))
}

pub fn predict<B: Backbone>(image: &Image, network: &Network<B>) -> Result<Prediction> {
    let out = network.forward(image)?;
    let (counts, raw_sums, scores) = counts_from_maps(&out.category_maps, &out.density_maps, network.config.head.peak_radius)?;
    Ok(Prediction {
        counts,
        raw_sums,
        scores,
        density_maps: out.density_maps,
        category_maps: out.category_maps,
    })
}

pub fn encode_maps(maps: &Maps) -> Vec<u8> {
    let mut out = Vec::with_capacity(DENSITY_HEADER_LEN + 4 * maps.as_slice().len());
    out.extend_from_slice(DENSITY_MAGIC);
    for v in [
        DENSITY_DUMP_VERSION,
        maps.channels() as u32,
        maps.height() as u32,
        maps.width() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in maps.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_maps(bytes: &[u8]) -> Result<Maps> {
    let bad = |d: &str| Error::format("density dump", d.to_string());
    if bytes.len() < DENSITY_HEADER_LEN || &bytes[..4] != DENSITY_MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let version = word(1);
    if version != DENSITY_DUMP_VERSION {
        return Err(Error::Version {
            what: "density dump",
            found: version,
            expected: DENSITY_DUMP_VERSION,
        });
    }
    let (c, h, w) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let payload = &bytes[DENSITY_HEADER_LEN..];
    if payload.len() != 4 * c * h * w {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * c * h * w, payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Maps::from_vec(c, h, w, data)
}

pub fn export_density(maps: &DensityMaps, path: &Path) -> Result<()> {
    write_maps(&maps.0, path)
}

pub fn import_density(path: &Path) -> Result<DensityMaps> {
    read_maps(path).map(DensityMaps)
}

pub fn write_maps(maps: &Maps, path: &Path) -> Result<()> {
    std::fs::write(path, encode_maps(maps)).map_err(|e| Error::io(path, e))
}

pub fn read_maps(path: &Path) -> Result<Maps> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_maps(&bytes)
}

/// One row of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub category: String,
    pub score: f64,
    pub raw_sum: f64,
    pub count: u32,
}

pub fn prediction_records(image_id: &str, categories: &[String], p: &Prediction) -> Vec<PredictionRecord> {
    categories
        .iter()
        .enumerate()
        .map(|(c, name)| PredictionRecord {
            image_id: image_id.to_string(),
            category: name.clone(),
            score: p.scores.0[c],
            raw_sum: p.raw_sums[c],
            count: p.counts[c],
        })
        .collect()
}

/// Writes the prediction dump (CSV with header).
pub fn write_prediction_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if records.is_empty() {
        w.write_record(["image_id", "category", "score", "raw_sum", "count"])
            .map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_prediction_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

//! Versioned binary checkpoint.
//!
//! Layout (little endian):
//!
//! ```text
//! b"ILCK" | u32 version | u32 header_len | header (JSON, header_len bytes)
//! | f32 payload: every tensor listed in the header, in order
//! ```
//!
//! The header records the network config, training progress and the name
//! and length of each tensor, including the batch-norm running statistics
//! and (optionally) the optimizer momentum buffers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvBackbone, Head, Network, NetworkConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ILCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Last completed training stage (0 = freshly initialised).
    pub stage: u8,
    pub momentum: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    step: u64,
    stage: u8,
    tensors: Vec<TensorEntry>,
    momentum: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

fn named_tensors(net: &Network) -> Vec<(String, &[f32])> {
    let mut out: Vec<(String, &[f32])> = Vec::new();
    for (i, l) in net.backbone.layers.iter().enumerate() {
        out.push((format!("backbone.{i}.weight"), &l.weight));
        out.push((format!("backbone.{i}.bias"), &l.bias));
    }
    let h = &net.head;
    out.push(("head.shared.weight".into(), &h.shared.weight));
    out.push(("head.shared.bias".into(), &h.shared.bias));
    for (prefix, bn) in [("head.bn_class", &h.bn_class), ("head.bn_density", &h.bn_density)] {
        out.push((format!("{prefix}.gamma"), &bn.gamma));
        out.push((format!("{prefix}.beta"), &bn.beta));
        out.push((format!("{prefix}.running_mean"), &bn.running_mean));
        out.push((format!("{prefix}.running_var"), &bn.running_var));
    }
    out.push(("head.class_out.weight".into(), &h.class_out.weight));
    out.push(("head.class_out.bias".into(), &h.class_out.bias));
    out.push(("head.density_out.weight".into(), &h.density_out.weight));
    out.push(("head.density_out.bias".into(), &h.density_out.bias));
    out
}

fn tensors_mut<'a>(backbone: &'a mut ConvBackbone, h: &'a mut Head) -> Vec<&'a mut Vec<f32>> {
    let mut out: Vec<&'a mut Vec<f32>> = Vec::new();
    for l in backbone.layers.iter_mut() {
        out.push(&mut l.weight);
        out.push(&mut l.bias);
    }
    out.push(&mut h.shared.weight);
    out.push(&mut h.shared.bias);
    for bn in [&mut h.bn_class, &mut h.bn_density] {
        out.push(&mut bn.gamma);
        out.push(&mut bn.beta);
        out.push(&mut bn.running_mean);
        out.push(&mut bn.running_var);
    }
    out.push(&mut h.class_out.weight);
    out.push(&mut h.class_out.bias);
    out.push(&mut h.density_out.weight);
    out.push(&mut h.density_out.bias);
    out
}

impl Checkpoint {
    pub fn fresh(network: Network) -> Self {
        Self {
            network,
            step: 0,
            stage: 0,
            momentum: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = named_tensors(&self.network);
        let header = Header {
            network: self.network.config.clone(),
            step: self.step,
            stage: self.stage,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    len: t.len(),
                })
                .collect(),
            momentum: self.momentum.as_ref().map(|m| m.iter().map(Vec::len).collect()).unwrap_or_default(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let momentum = self.momentum.iter().flatten();
        for t in tensors.iter().map(|(_, t)| *t).chain(momentum.map(Vec::as_slice)) {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?).map_err(|e| bad(&e.to_string()))?;
        let mut network = Network::new(header.network.clone(), 0)?;
        let mut payload = bytes[12 + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let expected = named_tensors(&network);
        if expected.len() != header.tensors.len() {
            return Err(bad("tensor count does not match config"));
        }
        for ((name, t), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name || t.len() != entry.len {
                return Err(bad(&format!("tensor {} does not match config", entry.name)));
            }
        }
        let Network { backbone, head, .. } = &mut network;
        for t in tensors_mut(backbone, head) {
            for v in t.iter_mut() {
                *v = payload.next().ok_or_else(|| bad("truncated payload"))?;
            }
        }
        let momentum = if header.momentum.is_empty() {
            None
        } else {
            let mut bufs = Vec::with_capacity(header.momentum.len());
            for &len in &header.momentum {
                let buf: Vec<f32> = payload.by_ref().take(len).collect();
                if buf.len() != len {
                    return Err(bad("truncated momentum"));
                }
                bufs.push(buf);
            }
            Some(bufs)
        };
        if payload.next().is_some() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            network,
            step: header.step,
            stage: header.stage,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the category count.
    pub fn load_for(path: &Path, num_categories: usize) -> Result<Self> {
        let ck = Self::load(path)?;
        let c = ck.network.num_categories();
        if c != num_categories {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} was trained for {c} categories, expected {num_categories}",
                path.display()
            )));
        }
        Ok(ck)
    }
}

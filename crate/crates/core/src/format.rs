//! On-disk formats.
//!
//! Model and mask files share one layout: the magic line `TPRN1`, one line
//! of JSON metadata, then a binary payload.
//!
//! * Model payload: every layer's weights as little-endian f32, row-major,
//!   layers in the order listed in the metadata.
//! * Mask payload: every layer's mask as bits, row-major, least significant
//!   bit first within a byte, each layer padded to a whole byte.
//!
//! Corpora are JSON lines, one array of token ids per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{SourceTag, TokenCorpus};
use crate::error::{Error, Result};
use crate::masking::{LayerMask, PruneMask, SparsitySpec};
use crate::model::{Layer, Model, ModelSpec};
use crate::numerics::Matrix;

pub const MAGIC: &[u8] = b"TPRN1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prunable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    endianness: String,
    dtype: String,
    spec: ModelSpec,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskHeader {
    kind: String,
    bit_order: String,
    spec: SparsitySpec,
    layers: Vec<LayerEntry>,
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| Error::Format("missing TPRN1 magic".into()))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("unterminated header".into()))?;
    Ok((&rest[..nl], &rest[nl + 1..]))
}

fn with_header(header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let header = ModelHeader {
        kind: "model".into(),
        endianness: "little".into(),
        dtype: "f32".into(),
        spec: model.spec().clone(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                rows: l.weight.rows(),
                cols: l.weight.cols(),
                prunable: Some(l.prunable),
                pruned: None,
            })
            .collect(),
    };
    let payload: Vec<u8> =
        model.layers().iter().flat_map(|l| l.weight.data().iter().flat_map(|v| v.to_le_bytes())).collect();
    with_header(&header, &payload)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let (head, mut payload) = split_header(bytes)?;
    let header: ModelHeader = serde_json::from_slice(head).map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.kind != "model" || header.endianness != "little" || header.dtype != "f32" {
        return Err(Error::Format(format!(
            "unsupported model header ({}, {}, {})",
            header.kind, header.endianness, header.dtype
        )));
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for e in &header.layers {
        let n = e.rows * e.cols * 4;
        if payload.len() < n {
            return Err(Error::Format(format!("payload truncated in layer {}", e.name)));
        }
        let data = payload[..n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        payload = &payload[n..];
        layers.push(Layer {
            name: e.name.clone(),
            weight: Matrix::new(e.rows, e.cols, data).map_err(|e| Error::Format(e.to_string()))?,
            prunable: e.prunable.unwrap_or(false),
        });
    }
    if !payload.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after model payload", payload.len())));
    }
    Model::from_layers(header.spec, layers).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_mask(mask: &PruneMask) -> Result<Vec<u8>> {
    let header = MaskHeader {
        kind: "mask".into(),
        bit_order: "lsb0".into(),
        spec: *mask.spec(),
        layers: mask
            .layers()
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                rows: l.bits.rows(),
                cols: l.bits.cols(),
                prunable: None,
                pruned: Some(l.pruned),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for l in mask.layers() {
        for chunk in l.bits.data().chunks(8) {
            payload.push(chunk.iter().enumerate().fold(0u8, |b, (k, &bit)| b | ((bit as u8) << k)));
        }
    }
    with_header(&header, &payload)
}

pub fn decode_mask(bytes: &[u8]) -> Result<PruneMask> {
    let (head, mut payload) = split_header(bytes)?;
    let header: MaskHeader = serde_json::from_slice(head).map_err(|e| Error::Format(format!("mask header: {e}")))?;
    if header.kind != "mask" || header.bit_order != "lsb0" {
        return Err(Error::Format(format!("unsupported mask header ({}, {})", header.kind, header.bit_order)));
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for e in &header.layers {
        let n = e.rows * e.cols;
        let nbytes = n.div_ceil(8);
        if payload.len() < nbytes {
            return Err(Error::Format(format!("payload truncated in layer {}", e.name)));
        }
        let bits = (0..n).map(|k| payload[k / 8] >> (k % 8) & 1 == 1).collect();
        payload = &payload[nbytes..];
        let lm = LayerMask::new(&e.name, Matrix::new(e.rows, e.cols, bits)?);
        if e.pruned.is_some_and(|p| p != lm.pruned) {
            return Err(Error::Format(format!("pruned count mismatch in layer {}", e.name)));
        }
        layers.push(lm);
    }
    if !payload.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after mask payload", payload.len())));
    }
    Ok(PruneMask::from_layers(header.spec, layers))
}

pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &PruneMask) -> Result<()> {
    fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<PruneMask> {
    decode_mask(&fs::read(path)?)
}

pub fn write_corpus(path: &Path, corpus: &TokenCorpus) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for seq in &corpus.sequences {
        serde_json::to_writer(&mut f, seq).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Decodes JSON-lines corpus text; blank lines are skipped.
pub fn decode_corpus(bytes: &[u8], name: &str, source: SourceTag) -> Result<TokenCorpus> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("{name}: {e}")))?;
    let mut sequences = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq: Vec<u32> = serde_json::from_str(line).map_err(|e| Error::Format(format!("{name}:{}: {e}", n + 1)))?;
        sequences.push(seq);
    }
    Ok(TokenCorpus::new(name, source, sequences))
}

/// Reads a JSON-lines corpus named after the file stem.
pub fn read_corpus(path: &Path, source: SourceTag) -> Result<TokenCorpus> {
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_corpus(&fs::read(path)?, &name, source)
}

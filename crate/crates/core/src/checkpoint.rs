//! Checkpoint directories: a text manifest plus one little-endian f64 blob.
//!
//! `manifest.txt` holds `key=value` lines: the format version, the model
//! configuration (`config.*`), one `tensor.<name>=<shape>@<offset>+<len>`
//! line per tensor (offsets and lengths count f64 values) and the blob size
//! in bytes. `params.bin` holds the tensors back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::model::{MmkConfig, MmkModel};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn named_tensors(model: &MmkModel) -> Vec<(String, &Tensor)> {
    let mut ps = Vec::new();
    model.params("", &mut ps);
    let mut out: Vec<(String, &Tensor)> = ps.into_iter().map(|(n, p)| (n, &p.value)).collect();
    out.extend(model.buffers());
    out
}

pub fn save(model: &MmkModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("format=mmk-checkpoint\n");
    manifest.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    for (k, v) in model.config.entries() {
        manifest.push_str(&format!("config.{k}={v}\n"));
    }
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, t) in named_tensors(model) {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor.{name}={}@{offset}+{}\n", shape.join("x"), t.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    manifest.push_str(&format!("blob_bytes={}\n", blob.len()));
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_tensor_entry(name: &str, v: &str) -> Result<TensorEntry> {
    let bad = || ck(format!("malformed tensor entry for `{name}`: `{v}`"));
    let (shape, rest) = v.split_once('@').ok_or_else(bad)?;
    let (offset, len) = rest.split_once('+').ok_or_else(bad)?;
    let shape = if shape.is_empty() {
        Vec::new()
    } else {
        shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()?
    };
    Ok(TensorEntry {
        shape,
        offset: offset.parse().map_err(|_| bad())?,
        len: len.parse().map_err(|_| bad())?,
    })
}

pub fn load(dir: &Path) -> Result<MmkModel> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| ck(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let mut config = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut version = None;
    let mut blob_bytes = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ck(format!("manifest line {} is not key=value", i + 1)))?;
        if let Some(name) = k.strip_prefix("config.") {
            config.insert(name.to_string(), v.to_string());
        } else if let Some(name) = k.strip_prefix("tensor.") {
            tensors.insert(name.to_string(), parse_tensor_entry(name, v)?);
        } else {
            match k {
                "format" if v == "mmk-checkpoint" => {}
                "format" => return Err(ck(format!("not an mmk checkpoint (format `{v}`)"))),
                "format_version" => version = Some(v.parse::<u32>().map_err(|_| ck("bad format_version"))?),
                "blob_bytes" => blob_bytes = Some(v.parse::<usize>().map_err(|_| ck("bad blob_bytes"))?),
                _ => return Err(ck(format!("unknown manifest key `{k}`"))),
            }
        }
    }
    match version {
        Some(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(ck(format!(
                "format version {v} is not supported (expected {FORMAT_VERSION})"
            )))
        }
        None => return Err(ck("manifest has no format_version")),
    }
    let blob_bytes = blob_bytes.ok_or_else(|| ck("manifest has no blob_bytes"))?;
    let blob = fs::read(dir.join(BLOB))?;
    if blob.len() != blob_bytes {
        return Err(ck(format!(
            "{} is {} bytes but the manifest declares {blob_bytes}; the file is truncated or corrupt",
            BLOB,
            blob.len()
        )));
    }
    let cfg = MmkConfig::from_entries(&config).map_err(|e| ck(format!("invalid config: {e}")))?;
    let mut model = MmkModel::new(cfg)?;

    let mut fill = |name: &str, dst: &mut Tensor| -> Result<()> {
        let e = tensors
            .remove(name)
            .ok_or_else(|| ck(format!("tensor `{name}` missing from manifest")))?;
        if e.shape != dst.shape() || e.len != dst.len() {
            return Err(ck(format!(
                "tensor `{name}` has shape {:?} in the checkpoint but the model expects {:?}",
                e.shape,
                dst.shape()
            )));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| ck(format!("tensor `{name}` lies outside the blob")))?;
        for (d, chunk) in dst.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Ok(())
    };
    let mut ps = Vec::new();
    model.params_mut("", &mut ps);
    for (name, p) in ps {
        fill(&name, &mut p.value)?;
    }
    for (name, t) in model.buffers_mut() {
        fill(&name, t)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ck(format!("checkpoint has unexpected tensor `{extra}`")));
    }
    Ok(model)
}

//! Checkpoints: a text index followed by concatenated SADT tensors.
//!
//! ```text
//! SADI-CKPT 1
//! config <key> = <value>
//! tensor <name> <offset> <length>
//! end
//! <binary SADT blobs>
//! ```
//! Offsets are relative to the first byte after the `end` line.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Module, Tensor};

const HEADER: &str = "SADI-CKPT 1";

pub fn to_bytes(cfg: &RunConfig, model: &Model) -> Vec<u8> {
    let mut index = format!("{HEADER}\n");
    // The output directory says where a run wrote, not what it trained.
    for line in cfg.to_text().lines().filter(|l| !l.starts_with("out =")) {
        index.push_str(&format!("config {line}\n"));
    }
    let mut blobs = Vec::new();
    for p in model.params() {
        let b = p.value.to_sadt_bytes();
        index.push_str(&format!("tensor {} {} {}\n", p.name, blobs.len(), b.len()));
        blobs.extend_from_slice(&b);
    }
    index.push_str("end\n");
    let mut out = index.into_bytes();
    out.extend_from_slice(&blobs);
    out
}

pub fn save(path: impl AsRef<Path>, cfg: &RunConfig, model: &Model) -> Result<()> {
    fs::write(path, to_bytes(cfg, model))?;
    Ok(())
}

/// Parses a checkpoint into its configuration and named tensors.
pub fn parse(bytes: &[u8]) -> Result<(RunConfig, Vec<(String, Tensor)>)> {
    let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
    let mut cfg = RunConfig::default();
    let mut entries = Vec::new();
    let mut pos = 0;
    let mut first = true;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("index is not terminated by 'end'".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("index is not UTF-8".into()))?;
        pos += nl + 1;
        if first {
            if line != HEADER {
                return Err(bad(format!("unexpected header '{line}'")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        if let Some(kv) = line.strip_prefix("config ") {
            cfg.apply_text(kv)?;
        } else if let Some(t) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = t.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(format!("malformed tensor line '{line}'")));
            }
            let off: usize = f[1].parse().map_err(|_| bad(format!("bad offset in '{line}'")))?;
            let len: usize = f[2].parse().map_err(|_| bad(format!("bad length in '{line}'")))?;
            entries.push((f[0].to_string(), off, len));
        } else {
            return Err(bad(format!("unexpected line '{line}'")));
        }
    }
    let blobs = &bytes[pos..];
    let mut tensors = Vec::new();
    for (name, off, len) in entries {
        let chunk = blobs
            .get(off..off + len)
            .ok_or_else(|| bad(format!("tensor '{name}' lies outside the file")))?;
        tensors.push((name, Tensor::read_sadt(Cursor::new(chunk))?));
    }
    Ok((cfg, tensors))
}

/// Rebuilds the model described by a checkpoint and loads its weights.
pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, Model)> {
    let (cfg, tensors) = parse(&fs::read(path)?)?;
    let mut model = Model::from_run(&cfg)?;
    assign(&mut model, tensors)?;
    Ok((cfg, model))
}

pub fn assign<M: Module + ?Sized>(model: &mut M, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut err = None;
    model.visit_mut(&mut |p| match map.remove(&p.name) {
        Some(t) if t.shape() == p.value.shape() => {
            p.value.data_mut().copy_from_slice(t.data());
        }
        Some(t) => {
            err.get_or_insert(format!(
                "'{}' has shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            ));
        }
        None => {
            err.get_or_insert(format!("missing tensor '{}'", p.name));
        }
    });
    if let Some(e) = err {
        return Err(Error::Format(format!("checkpoint: {e}")));
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("checkpoint: unexpected tensor '{extra}'")));
    }
    Ok(())
}

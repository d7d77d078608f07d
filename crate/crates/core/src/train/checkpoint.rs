//! Checkpoint directories: `manifest.txt`, `params.bin` (little-endian
//! `f32` blobs) and `config.txt` (the run configuration snapshot).

use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::grad::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "fusejepa-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamStore,
    pub config: RunConfig,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes a checkpoint directory at `dir`, replacing any previous one.
/// The files are staged in a sibling directory and renamed into place.
pub fn save_checkpoint(dir: &Path, step: u64, params: &ParamStore, config: &RunConfig) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| bad(dir, "checkpoint path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let mut manifest = format!("{MAGIC} {FORMAT_VERSION}\nstep {step}\n");
    let mut blob = Vec::new();
    for (pname, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let shape = if shape.is_empty() { "scalar".to_string() } else { shape.join("x") };
        manifest.push_str(&format!("param {pname} {shape} {}\n", blob.len()));
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    manifest.push_str(&format!("bytes {}\n", blob.len()));
    fs::write(staging.join("manifest.txt"), manifest)?;
    fs::write(staging.join("params.bin"), &blob)?;
    fs::write(staging.join("config.txt"), config.to_string())?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(dir.to_path_buf())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |f: &str| fs::read(dir.join(f)).map_err(|e| bad(dir, format!("{f}: {e}")));
    let manifest = String::from_utf8(read("manifest.txt")?).map_err(|_| bad(dir, "manifest is not UTF-8"))?;
    let blob = read("params.bin")?;
    let config_text = String::from_utf8(read("config.txt")?).map_err(|_| bad(dir, "config is not UTF-8"))?;
    let config = RunConfig::parse(&config_text).map_err(|e| bad(dir, format!("config: {e}")))?;

    let mut lines = manifest.lines();
    if lines.next() != Some(&format!("{MAGIC} {FORMAT_VERSION}")) {
        return Err(bad(dir, "unsupported checkpoint header"));
    }
    let mut step = None;
    let mut total = None;
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["step", s] => step = Some(s.parse::<u64>().map_err(|_| bad(dir, "bad step"))?),
            ["bytes", n] => total = Some(n.parse::<usize>().map_err(|_| bad(dir, "bad byte count"))?),
            ["param", name, shape, offset] => {
                let shape: Vec<usize> = if *shape == "scalar" {
                    Vec::new()
                } else {
                    shape
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad(dir, format!("bad shape for {name}"))))
                        .collect::<Result<_>>()?
                };
                let offset = offset.parse().map_err(|_| bad(dir, format!("bad offset for {name}")))?;
                if entries.iter().any(|(n, _, _)| n == name) {
                    return Err(bad(dir, format!("duplicate parameter {name}")));
                }
                entries.push((name.to_string(), shape, offset));
            }
            _ => return Err(bad(dir, format!("unexpected manifest line `{line}`"))),
        }
    }
    let step = step.ok_or_else(|| bad(dir, "manifest lacks step"))?;
    if total != Some(blob.len()) {
        return Err(bad(dir, "params.bin size disagrees with manifest"));
    }
    let mut params = ParamStore::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        let bytes = blob.get(offset..end).ok_or_else(|| bad(dir, format!("{name} out of range")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        params.insert_exact(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { step, params, config })
}

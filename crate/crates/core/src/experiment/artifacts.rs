//! Atomic artifact writes, tensor checkpoints, parameter CSVs and PGM heatmaps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::tensor::io::{read_binary, to_csv_string, write_binary};
use crate::tensor::Array;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    let tmp = path.with_file_name(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| ExperimentError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| ExperimentError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ExperimentError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| ExperimentError::io(path, e))
}

pub fn write_csv(path: &Path, a: &Array) -> Result<()> {
    write_atomic(path, to_csv_string(a)?.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// One JSON object per line.
pub fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// 8-bit binary PGM (P5) of a matrix, min-max normalized; a constant matrix maps to 0.
pub fn pgm_bytes(a: &Array) -> Result<Vec<u8>> {
    let (rows, cols) = match a.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => return Err(ExperimentError::Invalid(format!("heatmap needs rank 1 or 2, got {s:?}"))),
    };
    let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(a.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}

pub fn write_pgm(path: &Path, a: &Array) -> Result<()> {
    write_atomic(path, &pgm_bytes(a)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Checkpoint directory layout: `manifest.json` plus one MPT1 file per tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    seed: u64,
    config_hash: &str,
    tensors: &[(&str, &Array)],
    notes: Vec<String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, a) in tensors {
        let file = format!("{}.mpt", name.replace(['/', '\\'], "_"));
        let mut buf = Vec::new();
        write_binary(&mut buf, a)?;
        write_atomic(&dir.join(&file), &buf)?;
        entries.push(TensorEntry { name: name.to_string(), shape: a.shape().to_vec(), file });
    }
    let manifest = Manifest { kind: kind.to_string(), seed, config_hash: config_hash.to_string(), tensors: entries, notes };
    write_json(&dir.join("manifest.json"), &manifest)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Checkpoint {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
        let manifest = serde_json::from_str(&text)?;
        Ok(Checkpoint { dir: dir.to_path_buf(), manifest })
    }

    pub fn tensor(&self, name: &str) -> Result<Array> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ExperimentError::Checkpoint(format!("{}: no tensor named {name:?}", self.dir.display())))?;
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| ExperimentError::io(&path, e))?;
        let a = read_binary(bytes.as_slice())?;
        if a.shape() != &entry.shape[..] {
            return Err(ExperimentError::Checkpoint(format!(
                "{}: shape {:?} disagrees with manifest {:?}",
                path.display(),
                a.shape(),
                entry.shape
            )));
        }
        Ok(a)
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.tensors.iter().any(|t| t.name == name)
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{atomic_write, read_json, write_json, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Relative to the manifest's directory.
    pub file: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub model_name: String,
    pub layer: usize,
    pub head: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub prompt: String,
    pub tokens: Vec<String>,
    pub checkpoint_step: u64,
    /// Whether the `1/√d_head` attention scale is already folded into `wq`.
    #[serde(default)]
    pub scale_folded: Option<bool>,
    /// Optional extractor telemetry, carried through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_check: Option<serde_json::Value>,
    #[serde(default)]
    pub arrays: Vec<ArraySpec>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// One attention head at one checkpoint with the residual stream it saw.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSnapshot {
    pub manifest: DumpManifest,
    pub wq: Matrix,
    pub wk: Matrix,
    pub resid: Matrix,
    /// `wqᵀ·wk`, `d_model × d_model`.
    pub omega: Matrix,
}

impl HeadSnapshot {
    pub fn new(manifest: DumpManifest, wq: Matrix, wk: Matrix, resid: Matrix) -> Result<Self> {
        let omega = wq.matmul_tn(&wk);
        let s = Self {
            manifest,
            wq,
            wk,
            resid,
            omega,
        };
        s.check_shapes()?;
        Ok(s)
    }

    pub fn seq_len(&self) -> usize {
        self.resid.rows()
    }

    fn check_shapes(&self) -> Result<()> {
        let m = &self.manifest;
        let expect = [
            ("wq", self.wq.shape(), (m.d_head, m.d_model)),
            ("wk", self.wk.shape(), (m.d_head, m.d_model)),
            ("resid", self.resid.shape(), (m.tokens.len(), m.d_model)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Manifest(format!("array `{name}` has shape {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }
}

const REQUIRED: [&str; 3] = ["wq", "wk", "resid"];

fn read_array(base: &Path, spec: &ArraySpec) -> Result<Matrix> {
    if spec.dtype != "f32" {
        return Err(Error::Manifest(format!("array `{}` has dtype {}, only f32 is supported", spec.name, spec.dtype)));
    }
    let (rows, cols) = match spec.shape.as_slice() {
        [r, c] => (*r, *c),
        other => return Err(Error::Manifest(format!("array `{}` must be 2-D, shape is {other:?}", spec.name))),
    };
    let path = base.join(&spec.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let len = (rows * cols) as u64 * 4;
    let needed = spec.byte_offset + len;
    if (bytes.len() as u64) < needed {
        return Err(Error::TruncatedArray {
            name: spec.name.clone(),
            needed,
            available: bytes.len() as u64,
        });
    }
    let start = spec.byte_offset as usize;
    let data = bytes[start..start + len as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Reads a manifest and its arrays. Values are widened from `f32`.
pub fn load_dump(manifest_path: &Path) -> Result<HeadSnapshot> {
    let manifest: DumpManifest = read_json(manifest_path)?;
    if manifest.scale_folded != Some(true) {
        return Err(Error::ScaleNotFolded);
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut found: [Option<Matrix>; 3] = [None, None, None];
    for (slot, name) in found.iter_mut().zip(REQUIRED) {
        let spec = manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::MissingArray(name.to_string()))?;
        *slot = Some(read_array(base, spec)?);
    }
    let [wq, wk, resid] = found.map(|m| m.expect("filled above"));
    HeadSnapshot::new(manifest, wq, wk, resid)
}

/// Writes one `<name>.f32` file per array next to `manifest.json` in
/// `dir` and returns the manifest path. The manifest's array list is
/// rebuilt from the snapshot.
pub fn write_dump(dir: &Path, snapshot: &HeadSnapshot) -> Result<PathBuf> {
    snapshot.check_shapes()?;
    let mut manifest = snapshot.manifest.clone();
    manifest.arrays.clear();
    for (name, m) in [("wq", &snapshot.wq), ("wk", &snapshot.wk), ("resid", &snapshot.resid)] {
        let file = format!("{name}.f32");
        let bytes: Vec<u8> = m.as_slice().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        atomic_write(&dir.join(&file), &bytes)?;
        manifest.arrays.push(ArraySpec {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: vec![m.rows(), m.cols()],
            file,
            byte_offset: 0,
        });
    }
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

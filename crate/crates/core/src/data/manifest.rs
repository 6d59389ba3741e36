//! Dataset manifests.
//!
//! A manifest is a TOML file listing one entry per view plus an optional
//! labels file. Paths are relative to the manifest's directory.
//!
//! ```toml
//! name = "blobs"
//! normalize = "zscore"        # optional
//!
//! [[views]]
//! file = "view0.f32"
//! rows = 500
//! cols = 20
//! encoding = "f32le-rowmajor" # or "csv"
//!
//! [labels]
//! file = "labels.csv"         # one integer per line
//! classes = 5
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{normalize, MultiViewDataset, Normalization};
use crate::error::{Result, RmlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "csv")]
    Csv,
    #[serde(rename = "f32le-rowmajor")]
    F32Le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub file: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsEntry {
    pub file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<Normalization>,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelsEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RmlError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| RmlError::Data(format!("manifest {}: {e}", path.display())))
    }
}

fn read_view(dir: &Path, m: usize, entry: &ViewEntry) -> Result<Tensor<f64>> {
    let path = dir.join(&entry.file);
    let values = match entry.encoding {
        Encoding::F32Le => {
            let bytes = fs::read(&path).map_err(|e| RmlError::io(&path, e))?;
            let expected = entry.rows * entry.cols * 4;
            if bytes.len() != expected {
                return Err(RmlError::Data(format!(
                    "view {m} ({}): {} bytes, manifest declares {}x{} = {expected} bytes",
                    path.display(),
                    bytes.len(),
                    entry.rows,
                    entry.cols
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect::<Vec<_>>()
        }
        Encoding::Csv => {
            let text = fs::read_to_string(&path).map_err(|e| RmlError::io(&path, e))?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            if lines.len() != entry.rows {
                return Err(RmlError::Data(format!(
                    "view {m} ({}): {} lines, manifest declares {} rows",
                    path.display(),
                    lines.len(),
                    entry.rows
                )));
            }
            let mut values = Vec::with_capacity(entry.rows * entry.cols);
            for (r, line) in lines.iter().enumerate() {
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                if fields.len() != entry.cols {
                    return Err(RmlError::Data(format!(
                        "view {m} row {r}: {} fields, manifest declares {} cols",
                        fields.len(),
                        entry.cols
                    )));
                }
                for (c, f) in fields.iter().enumerate() {
                    let x: f64 = f.parse().map_err(|_| {
                        RmlError::Data(format!("view {m} row {r} col {c}: cannot parse '{f}'"))
                    })?;
                    values.push(x);
                }
            }
            values
        }
    };
    if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
        return Err(RmlError::Data(format!(
            "non-finite value in view {m} at row {}, col {}",
            pos / entry.cols,
            pos % entry.cols
        )));
    }
    Tensor::new(&[entry.rows, entry.cols], values)
}

fn read_labels(dir: &Path, entry: &LabelsEntry) -> Result<Vec<usize>> {
    let path = dir.join(&entry.file);
    let text = fs::read_to_string(&path).map_err(|e| RmlError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| RmlError::Data(format!("label line {i}: cannot parse '{l}'")))
        })
        .collect()
}

/// Reads and validates a dataset, applying the manifest's normalization
/// directive if it has one.
pub fn load_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let views = manifest
        .views
        .iter()
        .enumerate()
        .map(|(m, e)| read_view(dir, m, e))
        .collect::<Result<Vec<_>>>()?;
    let (labels, classes) = match &manifest.labels {
        Some(entry) => (Some(read_labels(dir, entry)?), entry.classes),
        None => (None, None),
    };
    let ds = MultiViewDataset::new(manifest.name.clone(), views, labels, classes)?;
    Ok(match manifest.normalize {
        Some(mode) => normalize(&ds, mode),
        None => ds,
    })
}

/// Writes every view and the labels next to a new `manifest.toml` in `dir`
/// and returns the manifest path. The f32 encoding is lossless only for
/// values representable in single precision.
pub fn save_dataset(ds: &MultiViewDataset, dir: &Path, encoding: Encoding) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| RmlError::io(dir, e))?;
    let mut views = Vec::new();
    for (m, v) in ds.views().iter().enumerate() {
        let (file, bytes) = match encoding {
            Encoding::F32Le => (
                PathBuf::from(format!("view{m}.f32")),
                v.data()
                    .iter()
                    .flat_map(|&x| (x as f32).to_le_bytes())
                    .collect::<Vec<u8>>(),
            ),
            Encoding::Csv => {
                let mut s = String::new();
                for i in 0..v.rows() {
                    let row: Vec<String> = v.row(i).iter().map(|x| format!("{x:?}")).collect();
                    s.push_str(&row.join(","));
                    s.push('\n');
                }
                (PathBuf::from(format!("view{m}.csv")), s.into_bytes())
            }
        };
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| RmlError::io(&path, e))?;
        views.push(ViewEntry {
            file,
            rows: v.rows(),
            cols: v.cols(),
            encoding,
        });
    }
    let labels = match ds.labels() {
        Some(l) => {
            let file = PathBuf::from("labels.csv");
            let path = dir.join(&file);
            let text: String = l.iter().map(|y| format!("{y}\n")).collect();
            fs::write(&path, text).map_err(|e| RmlError::io(&path, e))?;
            Some(LabelsEntry {
                file,
                classes: ds.classes(),
            })
        }
        None => None,
    };
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        normalize: None,
        views,
        labels,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| RmlError::Data(format!("manifest serialization: {e}")))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| RmlError::io(&path, e))?;
    Ok(path)
}

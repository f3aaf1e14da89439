//! JSON dataset manifest.
//!
//! ```json
//! {"classes": ["tokyo", "pittsburgh"],
//!  "models": ["vgg11"],
//!  "entries": [{"id": "img0", "class": 0, "image": "img/0.png",
//!               "segmentation": "seg/0.tnsr",
//!               "tensors": {"vgg11": {"activation": "a.tnsr", "gradient": "g.tnsr"}},
//!               "image_size": [224, 224]}]}
//! ```
//!
//! Paths are relative to the manifest file.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::{read_tensor_file, DType, TensorError, TensorRecord};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest schema violation: {0}")]
    Schema(String),
    #[error("entry {entry}: missing file {path}")]
    MissingFile { entry: String, path: PathBuf },
    #[error("entry {entry}: cannot parse {path}: {source}")]
    Tensor {
        entry: String,
        path: PathBuf,
        source: TensorError,
    },
    #[error("entry {entry}, model {model}: shape mismatch: {detail}")]
    ShapeMismatch {
        entry: String,
        model: String,
        detail: String,
    },
    #[error("entry {entry}: segmentation {detail}")]
    Segmentation { entry: String, detail: String },
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    classes: Vec<String>,
    models: Vec<String>,
    entries: Vec<RawEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    class: i64,
    image: Option<String>,
    segmentation: String,
    tensors: BTreeMap<String, RawTensorPaths>,
    image_size: [usize; 2],
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawTensorPaths {
    activation: String,
    gradient: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    Activation,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorPaths {
    pub activation: PathBuf,
    pub gradient: PathBuf,
}

impl TensorPaths {
    pub fn get(&self, kind: TensorKind) -> &Path {
        match kind {
            TensorKind::Activation => &self.activation,
            TensorKind::Gradient => &self.gradient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub id: String,
    pub class_index: usize,
    pub image_path: Option<PathBuf>,
    pub segmentation_path: PathBuf,
    pub tensors: BTreeMap<String, TensorPaths>,
    /// `(H0, W0)`.
    pub image_size: (usize, usize),
}

/// A validated, immutable dataset index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub models: Vec<String>,
    pub entries: Vec<ImageEntry>,
    /// Conv-map shape `[K, H, W]` per model; absent for models with no entries.
    pub conv_shapes: BTreeMap<String, [usize; 3]>,
    pub root: PathBuf,
}

impl DatasetManifest {
    /// `N^c`: number of images per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.entries {
            counts[e.class_index] += 1;
        }
        counts
    }

    pub fn entry(&self, id: &str) -> Option<&ImageEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn has_model(&self, model: &str) -> bool {
        self.models.iter().any(|m| m == model)
    }
}

fn schema(msg: impl Into<String>) -> ManifestError {
    ManifestError::Schema(msg.into())
}

fn load_checked(entry: &str, path: &Path) -> Result<TensorRecord, ManifestError> {
    if !path.is_file() {
        return Err(ManifestError::MissingFile {
            entry: entry.to_string(),
            path: path.to_path_buf(),
        });
    }
    read_tensor_file(path).map_err(|source| ManifestError::Tensor {
        entry: entry.to_string(),
        path: path.to_path_buf(),
        source,
    })
}

/// Shapes observed for one entry: `(model, activation shape)` pairs.
type EntryShapes = Vec<(String, [usize; 3])>;

fn validate_entry(entry: &ImageEntry) -> Result<EntryShapes, ManifestError> {
    let seg = load_checked(&entry.id, &entry.segmentation_path)?;
    let (h0, w0) = entry.image_size;
    if seg.dtype() != DType::U16 || seg.shape() != [h0, w0] {
        return Err(ManifestError::Segmentation {
            entry: entry.id.clone(),
            detail: format!(
                "expected u16 [{h0}, {w0}], found {} {:?}",
                seg.dtype(),
                seg.shape()
            ),
        });
    }
    if let Some(img) = &entry.image_path {
        if !img.is_file() {
            return Err(ManifestError::MissingFile {
                entry: entry.id.clone(),
                path: img.clone(),
            });
        }
    }

    let mut shapes = Vec::with_capacity(entry.tensors.len());
    for (model, paths) in &entry.tensors {
        let act = load_checked(&entry.id, &paths.activation)?;
        let grad = load_checked(&entry.id, &paths.gradient)?;
        let mismatch = |detail: String| ManifestError::ShapeMismatch {
            entry: entry.id.clone(),
            model: model.clone(),
            detail,
        };
        for (name, rec) in [("activation", &act), ("gradient", &grad)] {
            if rec.dtype() != DType::F32 || rec.shape().len() != 3 {
                return Err(mismatch(format!(
                    "{name} must be f32 [K, H, W], found {} {:?}",
                    rec.dtype(),
                    rec.shape()
                )));
            }
        }
        if act.shape() != grad.shape() {
            return Err(mismatch(format!(
                "activation {:?} vs gradient {:?}",
                act.shape(),
                grad.shape()
            )));
        }
        let s = act.shape();
        shapes.push((model.clone(), [s[0], s[1], s[2]]));
    }
    Ok(shapes)
}

/// Parses and fully validates a manifest. Every referenced tensor is read
/// and checked; files are never modified.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    build_manifest(raw, root)
}

fn build_manifest(raw: RawManifest, root: PathBuf) -> Result<DatasetManifest, ManifestError> {
    let mut seen_models = HashSet::new();
    for m in &raw.models {
        if !seen_models.insert(m.as_str()) {
            return Err(schema(format!("models: duplicate model id {m:?}")));
        }
    }

    let mut ids = HashSet::new();
    let mut entries = Vec::with_capacity(raw.entries.len());
    for (i, e) in raw.entries.into_iter().enumerate() {
        if !ids.insert(e.id.clone()) {
            return Err(schema(format!("entries[{i}].id: duplicate id {:?}", e.id)));
        }
        if e.class < 0 || e.class as usize >= raw.classes.len() {
            return Err(schema(format!(
                "entries[{i}].class: index {} out of range for {} classes",
                e.class,
                raw.classes.len()
            )));
        }
        if e.image_size[0] == 0 || e.image_size[1] == 0 {
            return Err(schema(format!("entries[{i}].image_size: zero dimension")));
        }
        for m in &raw.models {
            if !e.tensors.contains_key(m) {
                return Err(schema(format!(
                    "entries[{i}].tensors: entry {:?} has no tensors for model {m:?}",
                    e.id
                )));
            }
        }
        if let Some(extra) = e.tensors.keys().find(|k| !seen_models.contains(k.as_str())) {
            return Err(schema(format!(
                "entries[{i}].tensors: unknown model {extra:?}"
            )));
        }
        entries.push(ImageEntry {
            id: e.id,
            class_index: e.class as usize,
            image_path: e.image.map(|p| root.join(p)),
            segmentation_path: root.join(e.segmentation),
            tensors: e
                .tensors
                .into_iter()
                .map(|(m, p)| {
                    (
                        m,
                        TensorPaths {
                            activation: root.join(p.activation),
                            gradient: root.join(p.gradient),
                        },
                    )
                })
                .collect(),
            image_size: (e.image_size[0], e.image_size[1]),
        });
    }

    let per_entry: Vec<EntryShapes> = entries
        .par_iter()
        .map(validate_entry)
        .collect::<Result<_, _>>()?;

    let mut conv_shapes: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (entry, shapes) in entries.iter().zip(per_entry) {
        for (model, shape) in shapes {
            match conv_shapes.get(&model) {
                Some(first) if *first != shape => {
                    return Err(ManifestError::ShapeMismatch {
                        entry: entry.id.clone(),
                        model,
                        detail: format!("conv shape {shape:?} differs from {first:?} used by earlier entries"),
                    });
                }
                Some(_) => {}
                None => {
                    conv_shapes.insert(model, shape);
                }
            }
        }
    }

    Ok(DatasetManifest {
        classes: raw.classes,
        models: raw.models,
        entries,
        conv_shapes,
        root,
    })
}

/// Per-entry layout used by [`write_manifest`]: paths relative to the
/// manifest directory.
#[derive(Debug, Clone)]
pub struct EntryRecord {
    pub id: String,
    pub class_index: usize,
    pub image: Option<String>,
    pub segmentation: String,
    /// model -> (activation, gradient)
    pub tensors: BTreeMap<String, (String, String)>,
    pub image_size: (usize, usize),
}

/// Writes a manifest JSON document; the inverse of the on-disk schema read
/// by [`load_manifest`].
pub fn write_manifest(
    path: impl AsRef<Path>,
    classes: &[String],
    models: &[String],
    entries: &[EntryRecord],
) -> std::io::Result<()> {
    let raw = RawManifest {
        classes: classes.to_vec(),
        models: models.to_vec(),
        entries: entries
            .iter()
            .map(|e| RawEntry {
                id: e.id.clone(),
                class: e.class_index as i64,
                image: e.image.clone(),
                segmentation: e.segmentation.clone(),
                tensors: e
                    .tensors
                    .iter()
                    .map(|(m, (a, g))| {
                        (
                            m.clone(),
                            RawTensorPaths {
                                activation: a.clone(),
                                gradient: g.clone(),
                            },
                        )
                    })
                    .collect(),
                image_size: [e.image_size.0, e.image_size.1],
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&raw).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

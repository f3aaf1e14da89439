//! Object-level pixel statistics over segmentation label maps.
//!
//! For class `c` and object `p`, `R = sum_i M_p,i / sum_i N_p,i` over the
//! class's images, where `M` counts object pixels inside the binary
//! explanation mask and `N` counts all object pixels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::Serialize;
use thiserror::Error;

use crate::gradcam::BinaryMask;

/// Label reserved for unlabeled pixels; excluded from every count.
pub const IGNORE_LABEL: u16 = u16::MAX;
/// Categories emitted by the scene-parsing segmenter.
pub const NUM_OBJECTS: usize = 150;
pub const DEFAULT_MIN_AVG_PIXELS: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ObjStatsError {
    #[error("segmentation is {seg:?} but mask is {mask:?}")]
    DimensionMismatch {
        seg: (usize, usize),
        mask: (usize, usize),
    },
    #[error("label {label} at ({row}, {col}) is not below {num_objects} and is not the ignore label")]
    LabelOutOfRange {
        label: u16,
        row: usize,
        col: usize,
        num_objects: usize,
    },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("names file {path}: {detail}")]
    Names { path: String, detail: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ObjectCount {
    /// `M`: pixels of the object inside the binary mask.
    pub discriminate: u64,
    /// `N`: pixels of the object in the whole image.
    pub total: u64,
}

/// Per-object counts for one image, indexed by object id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelCounts(pub Vec<ObjectCount>);

impl PixelCounts {
    pub fn num_objects(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, object: usize) -> ObjectCount {
        self.0[object]
    }
}

pub fn count_pixels(
    segmap: ArrayView2<u16>,
    mask: &BinaryMask,
    num_objects: usize,
) -> Result<PixelCounts, ObjStatsError> {
    if segmap.dim() != mask.dim() {
        return Err(ObjStatsError::DimensionMismatch {
            seg: segmap.dim(),
            mask: mask.dim(),
        });
    }
    let mut counts = vec![ObjectCount::default(); num_objects];
    for ((pos, &label), &selected) in segmap.indexed_iter().zip(mask.values.iter()) {
        if label == IGNORE_LABEL {
            continue;
        }
        let c = counts
            .get_mut(label as usize)
            .ok_or(ObjStatsError::LabelOutOfRange {
                label,
                row: pos.0,
                col: pos.1,
                num_objects,
            })?;
        c.total += 1;
        c.discriminate += u64::from(selected);
    }
    Ok(PixelCounts(counts))
}

/// Counts for one image together with its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageCounts {
    pub class_index: usize,
    pub counts: PixelCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectStatsRow {
    pub class_index: usize,
    pub object_id: usize,
    pub sum_m: u64,
    pub sum_n: u64,
    /// `None` when the object never occurs in the class (`sum_n == 0`).
    pub ratio: Option<f64>,
    pub selected: bool,
}

/// `R` for every object of class `c`; rows come back unselected.
pub fn compute_rpc(counts: &[ImageCounts], class: usize, num_objects: usize) -> Vec<ObjectStatsRow> {
    let mut sums = vec![(0u64, 0u64); num_objects];
    for img in counts.iter().filter(|i| i.class_index == class) {
        for (s, c) in sums.iter_mut().zip(&img.counts.0) {
            s.0 += c.discriminate;
            s.1 += c.total;
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(object_id, (sum_m, sum_n))| ObjectStatsRow {
            class_index: class,
            object_id,
            sum_m,
            sum_n,
            ratio: (sum_n > 0).then(|| sum_m as f64 / sum_n as f64),
            selected: false,
        })
        .collect()
}

/// An object is selected for its class when its mean pixel count per class
/// image strictly exceeds `min_avg_pixels`.
pub fn select_objects(rows: &[ObjectStatsRow], images_in_class: usize, min_avg_pixels: f64) -> Vec<bool> {
    rows.iter()
        .map(|r| images_in_class > 0 && r.sum_n as f64 / images_in_class as f64 > min_avg_pixels)
        .collect()
}

/// `R` table over all classes and objects for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectStatsTable {
    pub images_per_class: Vec<usize>,
    pub rows: Vec<ObjectStatsRow>,
}

impl ObjectStatsTable {
    pub fn build(
        counts: &[ImageCounts],
        num_classes: usize,
        num_objects: usize,
        min_avg_pixels: f64,
    ) -> Result<Self, ObjStatsError> {
        let mut images_per_class = vec![0; num_classes];
        for img in counts {
            *images_per_class
                .get_mut(img.class_index)
                .ok_or(ObjStatsError::ClassOutOfRange {
                    class: img.class_index,
                    num_classes,
                })? += 1;
        }
        let mut rows = Vec::with_capacity(num_classes * num_objects);
        for (class, &n_c) in images_per_class.iter().enumerate() {
            let mut class_rows = compute_rpc(counts, class, num_objects);
            let flags = select_objects(&class_rows, n_c, min_avg_pixels);
            for (row, f) in class_rows.iter_mut().zip(flags) {
                row.selected = f;
            }
            rows.extend(class_rows);
        }
        Ok(Self {
            images_per_class,
            rows,
        })
    }

    pub fn class_rows(&self, class: usize) -> impl Iterator<Item = &ObjectStatsRow> {
        self.rows.iter().filter(move |r| r.class_index == class)
    }

    pub fn get(&self, class: usize, object: usize) -> Option<&ObjectStatsRow> {
        self.rows
            .iter()
            .find(|r| r.class_index == class && r.object_id == object)
    }

    /// CSV columns: class, object_id, object_name, sum_M, sum_N, R, selected.
    /// Undefined ratios are written as an empty field.
    pub fn write_csv<W: Write>(
        &self,
        sink: W,
        classes: &[String],
        names: &ObjectNames,
    ) -> Result<(), ObjStatsError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["class", "object_id", "object_name", "sum_M", "sum_N", "R", "selected"])?;
        for r in &self.rows {
            w.write_record([
                classes[r.class_index].clone(),
                r.object_id.to_string(),
                names.name(r.object_id),
                r.sum_m.to_string(),
                r.sum_n.to_string(),
                r.ratio.map(|v| v.to_string()).unwrap_or_default(),
                r.selected.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Object id -> display name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectNames(Vec<String>);

impl ObjectNames {
    pub fn new(names: Vec<String>) -> Self {
        Self(names)
    }

    /// `object_<id>` placeholders.
    pub fn fallback(num_objects: usize) -> Self {
        Self((0..num_objects).map(|i| format!("object_{i}")).collect())
    }

    /// One name per line; line `i` names object `i`.
    pub fn load(path: impl AsRef<Path>, num_objects: usize) -> Result<Self, ObjStatsError> {
        let path = path.as_ref();
        let err = |detail: String| ObjStatsError::Names {
            path: path.display().to_string(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if names.len() != num_objects {
            return Err(err(format!("expected {num_objects} names, found {}", names.len())));
        }
        if let Some(i) = names.iter().position(String::is_empty) {
            return Err(err(format!("empty name on line {}", i + 1)));
        }
        Ok(Self(names))
    }

    pub fn name(&self, id: usize) -> String {
        self.0
            .get(id)
            .cloned()
            .unwrap_or_else(|| format!("object_{id}"))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub class_index: usize,
    pub object_id: usize,
    pub object_name: String,
    pub model: String,
    pub ratio: Option<f64>,
}

/// Grouped `R` values across models for the objects selected in each class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistogramData {
    pub classes: Vec<String>,
    pub models: Vec<String>,
    pub rows: Vec<HistogramRow>,
}

impl HistogramData {
    /// Object ids plotted for `class`, in row order.
    pub fn objects(&self, class: usize) -> Vec<(usize, String)> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| r.class_index == class && seen.insert(r.object_id))
            .map(|r| (r.object_id, r.object_name.clone()))
            .collect()
    }

    pub fn ratio(&self, class: usize, object: usize, model: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.class_index == class && r.object_id == object && r.model == model)
            .and_then(|r| r.ratio)
    }

    /// CSV columns: class, object_id, object_name, model, R.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), ObjStatsError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["class", "object_id", "object_name", "model", "R"])?;
        for r in &self.rows {
            w.write_record([
                self.classes[r.class_index].clone(),
                r.object_id.to_string(),
                r.object_name.clone(),
                r.model.clone(),
                r.ratio.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Restricts each class to the union of its selected objects over all
/// tables and orders rows by class, object name, then table order.
pub fn histogram_export(
    tables: &[(String, &ObjectStatsTable)],
    classes: &[String],
    names: &ObjectNames,
) -> HistogramData {
    let mut selected: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (_, t) in tables {
        for r in t.rows.iter().filter(|r| r.selected) {
            selected.entry(r.class_index).or_default().insert(r.object_id);
        }
    }

    let mut rows = Vec::new();
    for (&class, objects) in &selected {
        let mut objects: Vec<(String, usize)> =
            objects.iter().map(|&o| (names.name(o), o)).collect();
        objects.sort();
        for (name, object) in objects {
            for (model, t) in tables {
                rows.push(HistogramRow {
                    class_index: class,
                    object_id: object,
                    object_name: name.clone(),
                    model: model.clone(),
                    ratio: t.get(class, object).and_then(|r| r.ratio),
                });
            }
        }
    }
    HistogramData {
        classes: classes.to_vec(),
        models: tables.iter().map(|(m, _)| m.clone()).collect(),
        rows,
    }
}

//! Full pipeline from a manifest to figures and tables on disk.
//!
//! Stages run in a fixed order (masks, explanations, embedding, objstats,
//! ar), each writing into its own subdirectory of the output directory:
//!
//! ```text
//! out/masks/<model>/<id>.tnsr          conv-resolution weighted masks
//! out/masks/index.csv
//! out/explanations/<model>/<id>.png    thresholded visual explanations
//! out/embedding/<model>/{embedding.csv, kl_trace.csv, pca.csv,
//!                         scatter.svg, scatter_thumbnails.svg}
//! out/objstats/<model>.csv, histogram.csv, histogram_<class>.svg
//! out/ar/{ar_matrix.csv, ar_table.md, gallery.svg}
//! ```
//!
//! A stage directory holds a `.stamp` with the hash of everything the stage
//! depends on; a matching stamp skips the stage. A stage that fails leaves a
//! `.partial` marker behind.

pub mod svg;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::Array2;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{
    embed_descriptors, DescriptorMatrix, EmbeddingError, MaskEmbedding, TsneParams,
    DEFAULT_COMPONENTS,
};
use crate::gradcam::{
    apply_explanation, conv_masks, masks_from_conv, GradCamError, NormalizedMask,
    DEFAULT_THRESHOLD,
};
use crate::manifest::{load_manifest, DatasetManifest, ManifestError};
use crate::modelcmp::{ar_matrix, ImageMasks, ModelCmpError};
use crate::objstats::{
    count_pixels, histogram_export, ImageCounts, ObjStatsError, ObjectNames, ObjectStatsTable,
    DEFAULT_MIN_AVG_PIXELS, NUM_OBJECTS,
};
use crate::tensor_io::{read_tensor_file, write_tensor_file, TensorError, TensorRecord};

use svg::{
    render_gallery, render_histogram, render_scatter, GalleryRow, HistogramOptions,
    ScatterOptions, Thumbnail, DEFAULT_THUMBNAIL_CAP,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const STAMP: &str = ".stamp";
const TSNE_STAMP: &str = ".tsne-stamp";
const PARTIAL: &str = ".partial";
const GALLERY_PER_CLASS: usize = 2;
const GALLERY_CELL: u32 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Masks,
    Explanations,
    Embedding,
    ObjStats,
    Ar,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Masks,
        Stage::Explanations,
        Stage::Embedding,
        Stage::ObjStats,
        Stage::Ar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Masks => "masks",
            Stage::Explanations => "explanations",
            Stage::Embedding => "embedding",
            Stage::ObjStats => "objstats",
            Stage::Ar => "ar",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Masks => &[],
            _ => &[Stage::Masks],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub threshold: f32,
    pub tsne: TsneParams,
    pub pca_components: usize,
    pub min_avg_pixels: f64,
    /// Subset of manifest models; `None` runs all of them.
    pub models: Option<Vec<String>>,
    pub stages: BTreeSet<Stage>,
    pub thumbnail_cap: usize,
    /// Edge length of scatter thumbnails, in pixels.
    pub thumbnail_size: u32,
}

impl RunConfig {
    /// All stages with default parameters.
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            out_dir: out_dir.into(),
            threshold: DEFAULT_THRESHOLD,
            tsne: TsneParams::default(),
            pca_components: DEFAULT_COMPONENTS,
            min_avg_pixels: DEFAULT_MIN_AVG_PIXELS,
            models: None,
            stages: Stage::ALL.into_iter().collect(),
            thumbnail_cap: DEFAULT_THUMBNAIL_CAP,
            thumbnail_size: 32,
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if !(self.min_avg_pixels.is_finite() && self.min_avg_pixels >= 0.0) {
            return bad(format!("min-avg-pixels {} must be finite and >= 0", self.min_avg_pixels));
        }
        if self.pca_components == 0 {
            return bad("pca components must be positive".into());
        }
        if self.thumbnail_size == 0 {
            return bad("thumbnail size must be positive".into());
        }
        if self.tsne.iterations == 0 {
            return bad("t-SNE iterations must be positive".into());
        }
        for (name, v) in [
            ("perplexity", self.tsne.perplexity),
            ("learning rate", self.tsne.learning_rate),
            ("early exaggeration", self.tsne.early_exaggeration),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.stages.is_empty() {
            return bad("no stages selected".into());
        }
        for s in &self.stages {
            if let Some(dep) = s.requires().iter().find(|d| !self.stages.contains(d)) {
                return bad(format!("stage {s} requires stage {dep}"));
            }
        }
        if let Some(models) = &self.models {
            if models.is_empty() {
                return bad("empty model list".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    /// Computed from scratch.
    Miss,
    /// Outputs reused without recomputation.
    Hit,
    /// Expensive intermediate results reused, cheap outputs regenerated.
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub cache: CacheStatus,
    pub elapsed: Duration,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub stages: Vec<StageReport>,
    pub elapsed: Duration,
}

impl RunReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Absolute paths of every artifact, in stage order.
    pub fn artifacts(&self) -> Vec<PathBuf> {
        self.stages
            .iter()
            .flat_map(|s| s.artifacts.iter().map(|a| self.out_dir.join(a)))
            .collect()
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            let status = match s.cache {
                CacheStatus::Miss => "computed",
                CacheStatus::Hit => "cached",
                CacheStatus::Partial => "partly cached",
            };
            writeln!(
                f,
                "{:<13} {:<13} {:>9.3}s  {} artifacts",
                s.stage.name(),
                status,
                s.elapsed.as_secs_f64(),
                s.artifacts.len()
            )?;
        }
        write!(f, "total {:.3}s, output in {}", self.elapsed.as_secs_f64(), self.out_dir.display())
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("entry {entry}: {source}")]
    Entry {
        entry: String,
        source: Box<StageError>,
    },
    #[error("model {model}: {source}")]
    Model {
        model: String,
        source: Box<StageError>,
    },
    #[error(transparent)]
    Mask(#[from] GradCamError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    ObjStats(#[from] ObjStatsError),
    #[error(transparent)]
    ModelCmp(#[from] ModelCmpError),
    #[error("{path}: {source}")]
    Tensor { path: PathBuf, source: TensorError },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("image {path} is {found:?} (HxW), manifest says {expected:?}")]
    ImageSize {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("cached output {path} is unusable: {detail}")]
    Cache { path: PathBuf, detail: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Entry { source, .. } | StageError::Model { source, .. } => source.exit_code(),
            StageError::Embedding(e) => match e {
                EmbeddingError::NonFiniteKl { .. } => EXIT_NUMERIC,
                EmbeddingError::PerplexityTooLarge { .. }
                | EmbeddingError::TooFewSamples { .. }
                | EmbeddingError::InvalidParams(_) => EXIT_CONFIG,
                _ => EXIT_DATA,
            },
            StageError::Write { .. } | StageError::Csv(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        }
    }

    fn in_model(self, model: &str) -> Self {
        StageError::Model {
            model: model.to_string(),
            source: Box::new(self),
        }
    }

    fn in_entry(self, entry: &str) -> Self {
        StageError::Entry {
            entry: entry.to_string(),
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("cannot read input {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("output directory {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("stage {stage} failed: {source}")]
    Stage { stage: Stage, source: StageError },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Output { .. } => EXIT_CONFIG,
            PipelineError::Manifest(ManifestError::Read { .. }) => EXIT_CONFIG,
            PipelineError::Manifest(_) | PipelineError::Input { .. } => EXIT_DATA,
            PipelineError::Stage { source, .. } => source.exit_code(),
        }
    }
}

/// Runs the configured stages in pipeline order.
pub fn run(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let start = Instant::now();
    config.validate()?;
    let manifest = load_manifest(&config.manifest)?;
    let ctx = Context::new(config, manifest)?;

    let mut stages = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| config.stages.contains(s)) {
        let t = Instant::now();
        let (cache, artifacts) = match stage {
            Stage::Masks => ctx.run_stage(stage, |_| (), |dir, ()| ctx.masks_stage(dir))?,
            Stage::Explanations => ctx.run_stage(stage, |_| (), |dir, ()| ctx.explanations_stage(dir))?,
            Stage::Embedding => ctx.run_stage(
                stage,
                |dir| ctx.salvage_embeddings(dir),
                |dir, salvaged| ctx.embedding_stage(dir, salvaged),
            )?,
            Stage::ObjStats => ctx.run_stage(stage, |_| (), |dir, ()| ctx.objstats_stage(dir))?,
            Stage::Ar => ctx.run_stage(stage, |_| (), |dir, ()| ctx.ar_stage(dir))?,
        };
        stages.push(StageReport {
            stage,
            cache,
            elapsed: t.elapsed(),
            artifacts,
        });
    }
    Ok(RunReport {
        out_dir: config.out_dir.clone(),
        stages,
        elapsed: start.elapsed(),
    })
}

/// File-name-safe, unique stems in input order.
fn unique_stems<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    names
        .into_iter()
        .map(|name| {
            let mut base: String = name
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
                .collect();
            if base.is_empty() || base.starts_with('.') {
                base.insert(0, '_');
            }
            let mut stem = base.clone();
            let mut n = 1;
            while !seen.insert(stem.to_ascii_lowercase()) {
                stem = format!("{base}_{n}");
                n += 1;
            }
            stem
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn mask_image(mask: &NormalizedMask) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(mask.values[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn fit(img: DynamicImage, edge: u32) -> DynamicImage {
    img.resize_exact(edge, edge, FilterType::Triangle)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), StageError> {
    fs::write(path, bytes).map_err(|source| StageError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), StageError> {
    fs::create_dir_all(path).map_err(|source| StageError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>, StageError> {
    let file = fs::File::create(path).map_err(|source| StageError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

/// Previously computed t-SNE outputs of one model, kept verbatim.
struct SavedEmbedding {
    embedding_csv: Vec<u8>,
    kl_csv: Vec<u8>,
    pca_csv: Vec<u8>,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    manifest: DatasetManifest,
    models: Vec<String>,
    model_stems: Vec<String>,
    entry_stems: Vec<String>,
    class_stems: Vec<String>,
    names: ObjectNames,
    input_digest: String,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig, manifest: DatasetManifest) -> Result<Self, PipelineError> {
        let models = match &cfg.models {
            None => manifest.models.clone(),
            Some(requested) => {
                if let Some(m) = requested.iter().find(|m| !manifest.has_model(m)) {
                    return Err(PipelineError::Config(format!(
                        "model {m} is not in the manifest (available: {})",
                        manifest.models.join(", ")
                    )));
                }
                manifest
                    .models
                    .iter()
                    .filter(|m| requested.contains(m))
                    .cloned()
                    .collect()
            }
        };

        let names_path = manifest.root.join("names.txt");
        let names = if names_path.exists() {
            ObjectNames::load(&names_path, NUM_OBJECTS)
                .map_err(|e| PipelineError::Manifest(ManifestError::Schema(e.to_string())))?
        } else {
            ObjectNames::fallback(NUM_OBJECTS)
        };

        fs::create_dir_all(&cfg.out_dir).map_err(|source| PipelineError::Output {
            path: cfg.out_dir.clone(),
            source,
        })?;

        let input_digest = input_digest(&cfg.manifest, &manifest, &models, &names_path)?;
        Ok(Self {
            model_stems: unique_stems(models.iter().map(String::as_str)),
            entry_stems: unique_stems(manifest.entries.iter().map(|e| e.id.as_str())),
            class_stems: unique_stems(manifest.classes.iter().map(String::as_str)),
            cfg,
            manifest,
            models,
            names,
            input_digest,
        })
    }

    /// Hash of everything `stage` depends on.
    fn stage_key(&self, stage: Stage) -> String {
        let mut text = format!(
            "maskscope {}\nstage {}\ninputs {}\nmodels {:?}\n",
            env!("CARGO_PKG_VERSION"),
            stage,
            self.input_digest,
            self.models
        );
        match stage {
            Stage::Masks | Stage::Ar => {}
            Stage::Explanations => text += &format!("threshold {}\n", self.cfg.threshold),
            Stage::ObjStats => {
                text += &format!("threshold {}\nmin_avg {}\n", self.cfg.threshold, self.cfg.min_avg_pixels);
            }
            Stage::Embedding => {
                text += &self.tsne_key();
                text += &format!(
                    "threshold {}\nthumbnails {} {}\n",
                    self.cfg.threshold, self.cfg.thumbnail_cap, self.cfg.thumbnail_size
                );
            }
        }
        sha256_hex(text.as_bytes())
    }

    /// Hash of what the t-SNE coordinates depend on.
    fn tsne_key(&self) -> String {
        let t = &self.cfg.tsne;
        let text = format!(
            "maskscope {}\ninputs {}\nmodels {:?}\npca {}\ntsne {} {} {} {} {} {} {} {} {}\n",
            env!("CARGO_PKG_VERSION"),
            self.input_digest,
            self.models,
            self.cfg.pca_components,
            t.perplexity,
            t.iterations,
            t.learning_rate,
            t.early_exaggeration,
            t.exaggeration_iterations,
            t.initial_momentum,
            t.final_momentum,
            t.momentum_switch,
            t.seed
        );
        sha256_hex(text.as_bytes())
    }

    /// Returns the cached artifact list if `dir` holds a complete run for `key`.
    fn cached(&self, dir: &Path, key: &str) -> Option<Vec<String>> {
        if dir.join(PARTIAL).exists() {
            return None;
        }
        let stamp = fs::read_to_string(dir.join(STAMP)).ok()?;
        let mut lines = stamp.lines();
        if lines.next()? != key {
            return None;
        }
        let artifacts: Vec<String> = lines.map(str::to_string).collect();
        artifacts
            .iter()
            .all(|a| self.cfg.out_dir.join(a).is_file())
            .then_some(artifacts)
    }

    /// Reuses a matching stamp or wipes the stage directory and runs `body`.
    /// `salvage` sees the old directory contents before they are removed.
    fn run_stage<T>(
        &self,
        stage: Stage,
        salvage: impl FnOnce(&Path) -> T,
        body: impl FnOnce(&Path, T) -> Result<(Vec<String>, bool), StageError>,
    ) -> Result<(CacheStatus, Vec<String>), PipelineError> {
        let dir = self.cfg.out_dir.join(stage.name());
        let key = self.stage_key(stage);
        if let Some(artifacts) = self.cached(&dir, &key) {
            return Ok((CacheStatus::Hit, artifacts));
        }
        let out_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PipelineError::Output { path, source }
        };
        let saved = salvage(&dir);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(out_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(out_err(&dir))?;
        let partial = dir.join(PARTIAL);
        fs::write(&partial, stage.name()).map_err(out_err(&partial))?;

        let (mut artifacts, reused) =
            body(&dir, saved).map_err(|source| PipelineError::Stage { stage, source })?;
        artifacts.sort();
        let mut stamp = key;
        for a in &artifacts {
            stamp.push('\n');
            stamp.push_str(a);
        }
        stamp.push('\n');
        let stamp_path = dir.join(STAMP);
        fs::write(&stamp_path, stamp).map_err(out_err(&stamp_path))?;
        fs::remove_file(&partial).map_err(out_err(&partial))?;
        let status = if reused { CacheStatus::Partial } else { CacheStatus::Miss };
        Ok((status, artifacts))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.cfg.out_dir)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn mask_path(&self, model: usize, entry: usize) -> PathBuf {
        self.cfg
            .out_dir
            .join(Stage::Masks.name())
            .join(&self.model_stems[model])
            .join(format!("{}.tnsr", self.entry_stems[entry]))
    }

    /// Conv-resolution masks of `model` as written by the masks stage. An
    /// all-zero mask is the degenerate mask.
    fn load_masks(&self, model: usize) -> Result<Vec<NormalizedMask>, StageError> {
        (0..self.manifest.entries.len())
            .into_par_iter()
            .map(|i| {
                let path = self.mask_path(model, i);
                let values = read_tensor_file(&path)
                    .and_then(|r| r.to_array2_f32())
                    .map_err(|source| {
                        StageError::Cache {
                            path: path.clone(),
                            detail: source.to_string(),
                        }
                        .in_entry(&self.manifest.entries[i].id)
                    })?;
                let degenerate = values.iter().all(|&v| v == 0.0);
                Ok(NormalizedMask { values, degenerate })
            })
            .collect()
    }

    fn load_image(&self, entry: usize) -> Result<Option<RgbImage>, StageError> {
        let e = &self.manifest.entries[entry];
        let Some(path) = &e.image_path else {
            return Ok(None);
        };
        let img = image::open(path)
            .map_err(|source| StageError::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let found = (img.height() as usize, img.width() as usize);
        if found != e.image_size {
            return Err(StageError::ImageSize {
                path: path.clone(),
                expected: e.image_size,
                found,
            });
        }
        Ok(Some(img))
    }

    /// Thresholded explanation of one entry, or `None` without a source image.
    fn explanation(&self, entry: usize, conv: &NormalizedMask) -> Result<Option<RgbImage>, StageError> {
        let Some(img) = self.load_image(entry)? else {
            return Ok(None);
        };
        let set = masks_from_conv(conv.clone(), self.manifest.entries[entry].image_size, self.cfg.threshold)?;
        Ok(Some(apply_explanation(&img, &set.binary)?))
    }

    fn masks_stage(&self, dir: &Path) -> Result<(Vec<String>, bool), StageError> {
        let mut artifacts = Vec::new();
        let mut index = csv_writer(&dir.join("index.csv"))?;
        index.write_record(["model", "id", "file", "degenerate"])?;
        for (m, model) in self.models.iter().enumerate() {
            create_dir(&dir.join(&self.model_stems[m]))?;
            let masks = conv_masks(&self.manifest, model).map_err(|e| StageError::from(e).in_model(model))?;
            let written: Vec<String> = masks
                .par_iter()
                .enumerate()
                .map(|(i, mask)| {
                    let path = self.mask_path(m, i);
                    let rec = TensorRecord::from_array2_f32(&mask.values).map_err(|source| {
                        StageError::Tensor {
                            path: path.clone(),
                            source,
                        }
                    })?;
                    write_tensor_file(&rec, &path).map_err(|source| StageError::Tensor {
                        path: path.clone(),
                        source,
                    })?;
                    Ok(self.rel(&path))
                })
                .collect::<Result<_, StageError>>()?;
            for ((entry, mask), file) in self.manifest.entries.iter().zip(&masks).zip(&written) {
                index.write_record([model, &entry.id, file, &mask.degenerate.to_string()])?;
            }
            artifacts.extend(written);
        }
        index.flush().map_err(|source| StageError::Write {
            path: dir.join("index.csv"),
            source,
        })?;
        artifacts.push(self.rel(&dir.join("index.csv")));
        Ok((artifacts, false))
    }

    fn explanations_stage(&self, dir: &Path) -> Result<(Vec<String>, bool), StageError> {
        let mut artifacts = Vec::new();
        for (m, model) in self.models.iter().enumerate() {
            let model_dir = dir.join(&self.model_stems[m]);
            create_dir(&model_dir)?;
            let masks = self.load_masks(m).map_err(|e| e.in_model(model))?;
            let written: Vec<Option<String>> = masks
                .par_iter()
                .enumerate()
                .map(|(i, conv)| {
                    let entry = &self.manifest.entries[i].id;
                    let Some(expl) = self.explanation(i, conv).map_err(|e| e.in_entry(entry))? else {
                        return Ok(None);
                    };
                    let path = model_dir.join(format!("{}.png", self.entry_stems[i]));
                    expl.save(&path).map_err(|source| StageError::Image {
                        path: path.clone(),
                        source,
                    })?;
                    Ok(Some(self.rel(&path)))
                })
                .collect::<Result<_, StageError>>()
                .map_err(|e| e.in_model(model))?;
            artifacts.extend(written.into_iter().flatten());
        }
        Ok((artifacts, false))
    }

    fn salvage_embeddings(&self, dir: &Path) -> Option<Vec<SavedEmbedding>> {
        if fs::read_to_string(dir.join(TSNE_STAMP)).ok()?.trim() != self.tsne_key() {
            return None;
        }
        self.model_stems
            .iter()
            .map(|stem| {
                let d = dir.join(stem);
                Some(SavedEmbedding {
                    embedding_csv: fs::read(d.join("embedding.csv")).ok()?,
                    kl_csv: fs::read(d.join("kl_trace.csv")).ok()?,
                    pca_csv: fs::read(d.join("pca.csv")).ok()?,
                })
            })
            .collect()
    }

    fn embedding_stage(
        &self,
        dir: &Path,
        saved: Option<Vec<SavedEmbedding>>,
    ) -> Result<(Vec<String>, bool), StageError> {
        let reused = saved.is_some();
        let mut saved = saved.map(Vec::into_iter);
        let mut artifacts = Vec::new();
        for (m, model) in self.models.iter().enumerate() {
            let model_dir = dir.join(&self.model_stems[m]);
            create_dir(&model_dir)?;
            let masks = self.load_masks(m).map_err(|e| e.in_model(model))?;
            let files = match saved.as_mut().and_then(Iterator::next) {
                Some(s) => s,
                None => self.compute_embedding(&masks).map_err(|e| e.in_model(model))?,
            };
            for (name, bytes) in [
                ("embedding.csv", &files.embedding_csv),
                ("kl_trace.csv", &files.kl_csv),
                ("pca.csv", &files.pca_csv),
            ] {
                let path = model_dir.join(name);
                write_bytes(&path, bytes)?;
                artifacts.push(self.rel(&path));
            }
            let coords = parse_coords(&files.embedding_csv, self.manifest.entries.len())
                .map_err(|detail| StageError::Cache {
                    path: model_dir.join("embedding.csv"),
                    detail,
                })?;
            for (name, svg) in self.scatter_plots(m, &coords, &masks).map_err(|e| e.in_model(model))? {
                let path = model_dir.join(name);
                write_bytes(&path, svg.as_bytes())?;
                artifacts.push(self.rel(&path));
            }
        }
        let stamp = dir.join(TSNE_STAMP);
        write_bytes(&stamp, self.tsne_key().as_bytes())?;
        Ok((artifacts, reused))
    }

    fn compute_embedding(&self, masks: &[NormalizedMask]) -> Result<SavedEmbedding, StageError> {
        let entries = &self.manifest.entries;
        let result = if entries.is_empty() {
            None
        } else {
            let ids = entries.iter().map(|e| e.id.clone()).collect();
            let desc = DescriptorMatrix::from_masks(ids, masks)?;
            Some(embed_descriptors(&desc, self.cfg.pca_components, &self.cfg.tsne)?)
        };

        let mut emb = csv::Writer::from_writer(Vec::new());
        emb.write_record(["id", "class", "x", "y"])?;
        let mut kl = csv::Writer::from_writer(Vec::new());
        kl.write_record(["iteration", "kl"])?;
        let mut pca = csv::Writer::from_writer(Vec::new());
        pca.write_record(["component", "explained_variance", "explained_variance_ratio"])?;
        if let Some(MaskEmbedding { pca: p, embedding, .. }) = &result {
            for (i, e) in entries.iter().enumerate() {
                emb.write_record([
                    e.id.clone(),
                    self.manifest.classes[e.class_index].clone(),
                    embedding.coords[[i, 0]].to_string(),
                    embedding.coords[[i, 1]].to_string(),
                ])?;
            }
            for point in &embedding.kl_trace {
                kl.write_record([point.iteration.to_string(), point.kl.to_string()])?;
            }
            for (c, (v, r)) in p
                .explained_variance
                .iter()
                .zip(&p.explained_variance_ratio)
                .enumerate()
            {
                pca.write_record([c.to_string(), v.to_string(), r.to_string()])?;
            }
        }
        let finish = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| StageError::from(csv::Error::from(e.into_error())));
        Ok(SavedEmbedding {
            embedding_csv: finish(emb)?,
            kl_csv: finish(kl)?,
            pca_csv: finish(pca)?,
        })
    }

    fn scatter_plots(
        &self,
        model: usize,
        coords: &Array2<f64>,
        masks: &[NormalizedMask],
    ) -> Result<[(&'static str, String); 2], StageError> {
        let labels: Vec<usize> = self.manifest.entries.iter().map(|e| e.class_index).collect();
        let opts = ScatterOptions {
            title: self.models[model].clone(),
            thumbnail_size: self.cfg.thumbnail_size as f64,
            ..ScatterOptions::default()
        };
        let plain = render_scatter(coords.view(), &labels, &self.manifest.classes, &[], &opts);

        let picked = svg::select_thumbnails(labels.len(), self.cfg.thumbnail_cap, self.cfg.tsne.seed);
        let thumbs: Vec<Thumbnail> = picked
            .par_iter()
            .map(|&i| {
                let entry = &self.manifest.entries[i];
                let img = match self.explanation(i, &masks[i]).map_err(|e| e.in_entry(&entry.id))? {
                    Some(expl) => DynamicImage::ImageRgb8(expl),
                    None => {
                        let up = masks[i].resample(entry.image_size).map_err(|e| StageError::from(e).in_entry(&entry.id))?;
                        DynamicImage::ImageLuma8(mask_image(&up))
                    }
                };
                Ok(Thumbnail {
                    index: i,
                    image: fit(img, self.cfg.thumbnail_size),
                })
            })
            .collect::<Result<_, StageError>>()?;
        let with_thumbs = render_scatter(coords.view(), &labels, &self.manifest.classes, &thumbs, &opts);
        Ok([("scatter.svg", plain), ("scatter_thumbnails.svg", with_thumbs)])
    }

    fn objstats_stage(&self, dir: &Path) -> Result<(Vec<String>, bool), StageError> {
        let mut artifacts = Vec::new();
        let mut tables = Vec::new();
        for (m, model) in self.models.iter().enumerate() {
            let masks = self.load_masks(m).map_err(|e| e.in_model(model))?;
            let counts: Vec<ImageCounts> = self
                .manifest
                .entries
                .par_iter()
                .zip(masks.into_par_iter())
                .map(|(entry, conv)| {
                    let seg = read_tensor_file(&entry.segmentation_path)
                        .and_then(|r| r.to_array2_u16())
                        .map_err(|source| StageError::Tensor {
                            path: entry.segmentation_path.clone(),
                            source,
                        })?;
                    let set = masks_from_conv(conv, entry.image_size, self.cfg.threshold)?;
                    Ok(ImageCounts {
                        class_index: entry.class_index,
                        counts: count_pixels(seg.view(), &set.binary, NUM_OBJECTS)?,
                    })
                })
                .collect::<Result<_, StageError>>()
                .map_err(|e| e.in_model(model))?;
            let table = ObjectStatsTable::build(
                &counts,
                self.manifest.classes.len(),
                NUM_OBJECTS,
                self.cfg.min_avg_pixels,
            )?;
            let path = dir.join(format!("{}.csv", self.model_stems[m]));
            let file = fs::File::create(&path).map_err(|source| StageError::Write {
                path: path.clone(),
                source,
            })?;
            table.write_csv(BufWriter::new(file), &self.manifest.classes, &self.names)?;
            artifacts.push(self.rel(&path));
            tables.push((model.clone(), table));
        }

        let refs: Vec<(String, &ObjectStatsTable)> = tables.iter().map(|(m, t)| (m.clone(), t)).collect();
        let hist = histogram_export(&refs, &self.manifest.classes, &self.names);
        let path = dir.join("histogram.csv");
        let file = fs::File::create(&path).map_err(|source| StageError::Write {
            path: path.clone(),
            source,
        })?;
        hist.write_csv(BufWriter::new(file))?;
        artifacts.push(self.rel(&path));

        let opts = HistogramOptions::default();
        for (c, stem) in self.class_stems.iter().enumerate() {
            let path = dir.join(format!("histogram_{stem}.svg"));
            write_bytes(&path, render_histogram(&hist, c, &opts).as_bytes())?;
            artifacts.push(self.rel(&path));
        }
        Ok((artifacts, false))
    }

    fn ar_stage(&self, dir: &Path) -> Result<(Vec<String>, bool), StageError> {
        let masks: Vec<Vec<NormalizedMask>> = self
            .models
            .iter()
            .enumerate()
            .map(|(m, model)| self.load_masks(m).map_err(|e| e.in_model(model)))
            .collect::<Result<_, _>>()?;
        let images: Vec<ImageMasks<'_>> = self
            .manifest
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ImageMasks {
                id: &e.id,
                image_size: e.image_size,
                masks: masks.iter().map(|per_model| per_model.get(i)).collect(),
            })
            .collect();
        let matrix = ar_matrix(&self.models, &images)?;

        let mut artifacts = Vec::new();
        let path = dir.join("ar_matrix.csv");
        let file = fs::File::create(&path).map_err(|source| StageError::Write {
            path: path.clone(),
            source,
        })?;
        matrix.write_csv(BufWriter::new(file))?;
        artifacts.push(self.rel(&path));

        let path = dir.join("ar_table.md");
        write_bytes(&path, matrix.to_markdown().as_bytes())?;
        artifacts.push(self.rel(&path));

        let path = dir.join("gallery.svg");
        write_bytes(&path, self.gallery(&masks)?.as_bytes())?;
        artifacts.push(self.rel(&path));
        Ok((artifacts, false))
    }

    /// First few entries of each class with every model's mask.
    fn gallery(&self, masks: &[Vec<NormalizedMask>]) -> Result<String, StageError> {
        let mut picked = Vec::new();
        for c in 0..self.manifest.classes.len() {
            picked.extend(
                self.manifest
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.class_index == c)
                    .map(|(i, _)| i)
                    .take(GALLERY_PER_CLASS),
            );
        }
        let rows: Vec<GalleryRow> = picked
            .par_iter()
            .map(|&i| {
                let entry = &self.manifest.entries[i];
                let image = self
                    .load_image(i)
                    .map_err(|e| e.in_entry(&entry.id))?
                    .map(|img| fit(DynamicImage::ImageRgb8(img), GALLERY_CELL));
                let masks = masks
                    .iter()
                    .map(|per_model| {
                        let up = per_model[i]
                            .resample(entry.image_size)
                            .map_err(|e| StageError::from(e).in_entry(&entry.id))?;
                        Ok(fit(DynamicImage::ImageLuma8(mask_image(&up)), GALLERY_CELL))
                    })
                    .collect::<Result<_, StageError>>()?;
                Ok(GalleryRow {
                    id: entry.id.clone(),
                    image,
                    masks,
                })
            })
            .collect::<Result<_, StageError>>()?;
        Ok(render_gallery(&rows, &self.models, GALLERY_CELL as f64))
    }
}

/// Reads `x, y` columns back from an embedding CSV.
fn parse_coords(bytes: &[u8], expected_rows: usize) -> Result<Array2<f64>, String> {
    let mut reader = csv::Reader::from_reader(bytes);
    let mut coords = Array2::zeros((expected_rows, 2));
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        if i >= expected_rows || rec.len() != 4 {
            return Err(format!("unexpected row {}", i + 1));
        }
        for k in 0..2 {
            coords[[i, k]] = rec[2 + k]
                .parse::<f64>()
                .map_err(|e| format!("row {}: {e}", i + 1))?;
        }
        rows += 1;
    }
    if rows != expected_rows {
        return Err(format!("{rows} rows, expected {expected_rows}"));
    }
    Ok(coords)
}

/// Digest over the manifest and every input file the selected models use,
/// in manifest order.
fn input_digest(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    models: &[String],
    names_path: &Path,
) -> Result<String, PipelineError> {
    let mut files = vec![manifest_path.to_path_buf()];
    if names_path.exists() {
        files.push(names_path.to_path_buf());
    }
    for e in &manifest.entries {
        files.push(e.segmentation_path.clone());
        files.extend(e.image_path.clone());
        for m in models {
            if let Some(t) = e.tensors.get(m) {
                files.push(t.activation.clone());
                files.push(t.gradient.clone());
            }
        }
    }
    let digests: Vec<String> = files
        .par_iter()
        .map(|p| {
            fs::read(p).map(|b| sha256_hex(&b)).map_err(|source| PipelineError::Input {
                path: p.clone(),
                source,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut hasher = Sha256::new();
    for (path, digest) in files.iter().zip(&digests) {
        let rel = path.strip_prefix(&manifest.root).unwrap_or(path);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(digest.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

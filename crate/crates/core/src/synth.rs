//! Synthetic two-class dataset with planted class-discriminate objects.
//!
//! Class `city_a` images contain a tall skyscraper block and their
//! gradients weight a skyscraper-detector channel; class `city_b` images
//! contain a signboard strip and weight a signboard-detector channel. Each
//! synthetic model adds its own seeded noise; models may use different
//! conv-map sizes. The output directory has the exporter's layout:
//! `manifest.json`, `names.txt`, `images/`, `segmentation/`, `tensors/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::manifest::{write_manifest, EntryRecord};
use crate::objstats::{IGNORE_LABEL, NUM_OBJECTS};
use crate::tensor_io::{write_tensor_file, TensorError, TensorRecord};

pub const WALL: u16 = 0;
pub const BUILDING: u16 = 1;
pub const SKY: u16 = 2;
pub const TREE: u16 = 4;
pub const ROAD: u16 = 6;
pub const SIDEWALK: u16 = 11;
pub const CAR: u16 = 20;
pub const FENCE: u16 = 32;
pub const SIGNBOARD: u16 = 43;
pub const SKYSCRAPER: u16 = 48;

const NAMED: [(u16, &str); 10] = [
    (WALL, "wall"),
    (BUILDING, "building"),
    (SKY, "sky"),
    (TREE, "tree"),
    (ROAD, "road"),
    (SIDEWALK, "sidewalk"),
    (CAR, "car"),
    (FENCE, "fence"),
    (SIGNBOARD, "signboard"),
    (SKYSCRAPER, "skyscraper"),
];

/// Object names for the synthetic label space.
pub fn object_names() -> Vec<String> {
    (0..NUM_OBJECTS as u16)
        .map(|id| {
            NAMED
                .iter()
                .find(|(n, _)| *n == id)
                .map_or_else(|| format!("object_{id}"), |(_, s)| s.to_string())
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("invalid fixture config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthModel {
    pub name: String,
    /// Conv-map size `(H, W)`; must divide the image size.
    pub conv: (usize, usize),
    pub channels: usize,
    pub seed: u64,
    /// Std-dev of additive activation and gradient noise.
    pub noise: f32,
    /// Gradient weight on the sky-detector channel.
    pub sky_weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images_per_class: usize,
    pub image_size: (usize, usize),
    pub models: Vec<SynthModel>,
    pub seed: u64,
    pub write_images: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images_per_class: 60,
            image_size: (64, 64),
            models: vec![
                SynthModel {
                    name: "deep".into(),
                    conv: (8, 8),
                    channels: 8,
                    seed: 11,
                    noise: 0.05,
                    sky_weight: 0.0,
                },
                SynthModel {
                    name: "deep_retrained".into(),
                    conv: (8, 8),
                    channels: 8,
                    seed: 12,
                    noise: 0.05,
                    sky_weight: 0.0,
                },
                SynthModel {
                    name: "shallow".into(),
                    conv: (4, 4),
                    channels: 4,
                    seed: 13,
                    noise: 0.1,
                    sky_weight: 0.3,
                },
            ],
            seed: 2024,
            write_images: true,
        }
    }
}

pub const CLASSES: [&str; 2] = ["city_a", "city_b"];

/// Label map of one synthetic street scene.
fn scene(class: usize, (h, w): (usize, usize), rng: &mut ChaCha8Rng) -> Array2<u16> {
    let mut seg = Array2::from_elem((h, w), BUILDING);
    let sky_rows = h / 4 + rng.random_range(0..=h / 16);
    let road_top = h - h / 4;
    for ((y, x), v) in seg.indexed_iter_mut() {
        *v = if y < sky_rows {
            SKY
        } else if y >= road_top + 2 {
            ROAD
        } else if y >= road_top {
            SIDEWALK
        } else if x < w / 8 {
            WALL
        } else {
            BUILDING
        };
    }

    // Tree at a random side of the street.
    let tw = w / 8;
    let tx = if rng.random_bool(0.5) { 0 } else { w - tw };
    for y in road_top - h / 4..road_top {
        for x in tx..tx + tw {
            seg[[y, x]] = TREE;
        }
    }
    // A car on the road.
    let cx = rng.random_range(0..w - w / 4);
    for y in road_top + 3..(road_top + 3 + h / 16).min(h) {
        for x in cx..cx + w / 4 {
            seg[[y, x]] = CAR;
        }
    }

    let bw = 3 * w / 8;
    let x0 = w / 4 + rng.random_range(0..=w / 8);
    match class {
        0 => {
            let y0 = h / 8 + rng.random_range(0..=h / 16);
            for y in y0..y0 + h / 2 {
                for x in x0..x0 + bw {
                    seg[[y, x]] = SKYSCRAPER;
                }
            }
        }
        _ => {
            let y0 = 5 * h / 8 + rng.random_range(0..=h / 32);
            for y in y0..y0 + h / 8 {
                for x in x0..x0 + bw {
                    seg[[y, x]] = SIGNBOARD;
                }
            }
            for y in road_top - h / 16..road_top {
                for x in w / 8..w - w / 8 {
                    if seg[[y, x]] == BUILDING {
                        seg[[y, x]] = FENCE;
                    }
                }
            }
        }
    }
    // A few void pixels, as segmenters emit.
    seg[[h - 1, w - 1]] = IGNORE_LABEL;
    seg[[h - 1, w - 2]] = IGNORE_LABEL;
    seg
}

fn label_color(label: u16) -> [u8; 3] {
    match label {
        SKY => [135, 190, 235],
        BUILDING => [150, 120, 100],
        WALL => [170, 170, 160],
        TREE => [40, 130, 50],
        ROAD => [70, 70, 70],
        SIDEWALK => [190, 180, 170],
        CAR => [200, 30, 30],
        FENCE => [120, 90, 40],
        SIGNBOARD => [240, 200, 20],
        SKYSCRAPER => [90, 110, 160],
        _ => [0, 0, 0],
    }
}

fn render_image(seg: &Array2<u16>, rng: &mut ChaCha8Rng) -> RgbImage {
    let (h, w) = seg.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = label_color(seg[[y as usize, x as usize]]);
        let jitter: i16 = rng.random_range(-8..=8);
        Rgb(base.map(|c| (c as i16 + jitter).clamp(0, 255) as u8))
    })
}

/// Fraction of each conv cell covered by `label`.
fn coverage(seg: &Array2<u16>, label: u16, (ch, cw): (usize, usize)) -> Array2<f32> {
    let (h, w) = seg.dim();
    let (sy, sx) = (h / ch, w / cw);
    Array2::from_shape_fn((ch, cw), |(i, j)| {
        let mut hits = 0usize;
        for y in i * sy..(i + 1) * sy {
            for x in j * sx..(j + 1) * sx {
                hits += usize::from(seg[[y, x]] == label);
            }
        }
        hits as f32 / (sy * sx) as f32
    })
}

/// Activations `[K, H, W]` and gradients for one image under `model`.
/// Channel 0 detects skyscrapers, 1 signboards, 2 sky, 3 road; the rest
/// carry noise.
fn model_tensors(
    seg: &Array2<u16>,
    class: usize,
    model: &SynthModel,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array3<f32>) {
    let (ch, cw) = model.conv;
    let k = model.channels;
    let noise = Normal::new(0.0f32, model.noise.max(1e-6)).expect("finite std");
    let detectors = [SKYSCRAPER, SIGNBOARD, SKY, ROAD];

    let mut act = Array3::<f32>::zeros((k, ch, cw));
    for c in 0..k {
        let base = detectors
            .get(c)
            .map(|&l| coverage(seg, l, model.conv))
            .unwrap_or_else(|| Array2::zeros((ch, cw)));
        for i in 0..ch {
            for j in 0..cw {
                act[[c, i, j]] = (base[[i, j]] + noise.sample(rng)).max(0.0);
            }
        }
    }

    let mut grad = Array3::<f32>::zeros((k, ch, cw));
    for c in 0..k {
        let mean = match c {
            0 if class == 0 => 1.0,
            1 if class == 1 => 1.0,
            2 => model.sky_weight,
            _ => 0.0,
        };
        for v in grad.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
            *v = mean + noise.sample(rng);
        }
    }
    (act, grad)
}

/// Writes the fixture into `dir` and returns the manifest path.
pub fn generate_fixture(dir: impl AsRef<Path>, config: &SynthConfig) -> Result<PathBuf, SynthError> {
    let dir = dir.as_ref();
    let (h, w) = config.image_size;
    if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
        return Err(SynthError::Config(format!(
            "image size {h}x{w} must be a positive multiple of 32"
        )));
    }
    for m in &config.models {
        if m.conv.0 == 0 || m.conv.1 == 0 || h % m.conv.0 != 0 || w % m.conv.1 != 0 {
            return Err(SynthError::Config(format!(
                "model {}: conv size {:?} must divide the image size",
                m.name, m.conv
            )));
        }
        if m.channels < 4 {
            return Err(SynthError::Config(format!("model {}: needs at least 4 channels", m.name)));
        }
    }

    for sub in ["images", "segmentation"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for m in &config.models {
        std::fs::create_dir_all(dir.join("tensors").join(&m.name))?;
    }

    let mut scene_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model_rngs: Vec<ChaCha8Rng> = config
        .models
        .iter()
        .map(|m| ChaCha8Rng::seed_from_u64(m.seed))
        .collect();

    let mut entries = Vec::new();
    for (class, class_name) in CLASSES.iter().enumerate() {
        for i in 0..config.images_per_class {
            let id = format!("{class_name}_{i:03}");
            let seg = scene(class, config.image_size, &mut scene_rng);
            let seg_rel = format!("segmentation/{id}.tnsr");
            write_tensor_file(&TensorRecord::from_array2_u16(&seg)?, dir.join(&seg_rel))?;

            let image = if config.write_images {
                let rel = format!("images/{id}.png");
                render_image(&seg, &mut scene_rng).save(dir.join(&rel))?;
                Some(rel)
            } else {
                None
            };

            let mut tensors = BTreeMap::new();
            for (m, rng) in config.models.iter().zip(model_rngs.iter_mut()) {
                let (act, grad) = model_tensors(&seg, class, m, rng);
                let a_rel = format!("tensors/{}/{id}.act.tnsr", m.name);
                let g_rel = format!("tensors/{}/{id}.grad.tnsr", m.name);
                write_tensor_file(&TensorRecord::from_array3_f32(&act)?, dir.join(&a_rel))?;
                write_tensor_file(&TensorRecord::from_array3_f32(&grad)?, dir.join(&g_rel))?;
                tensors.insert(m.name.clone(), (a_rel, g_rel));
            }

            entries.push(EntryRecord {
                id,
                class_index: class,
                image,
                segmentation: seg_rel,
                tensors,
                image_size: config.image_size,
            });
        }
    }

    std::fs::write(dir.join("names.txt"), object_names().join("\n") + "\n")?;
    let manifest = dir.join("manifest.json");
    write_manifest(
        &manifest,
        &CLASSES.map(String::from),
        &config.models.iter().map(|m| m.name.clone()).collect::<Vec<_>>(),
        &entries,
    )?;
    Ok(manifest)
}

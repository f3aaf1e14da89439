//! Grad-CAM heatmaps, weighted masks, binary masks and visual explanations.
//!
//! The per-image pipeline is
//! `channel_weights -> compute_heatmap -> normalize_mask -> upsample_bilinear -> threshold_mask`.

use image::RgbImage;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;
use thiserror::Error;

use crate::manifest::{DatasetManifest, ImageEntry};
use crate::tensor_io::{read_tensor_file, TensorError, TensorRecord};

/// Threshold used when the caller does not pick one.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum GradCamError {
    #[error("expected a 3-D f32 tensor [K, H, W], found {0}")]
    WrongRank(String),
    #[error("channel count mismatch: {activations} activation maps, {weights} weights")]
    ChannelMismatch { activations: usize, weights: usize },
    #[error("activation shape {activations:?} does not match gradient shape {gradients:?}")]
    ShapeMismatch {
        activations: Vec<usize>,
        gradients: Vec<usize>,
    },
    #[error("target size {0}x{1} has a zero dimension")]
    ZeroTarget(usize, usize),
    #[error("source map has a zero dimension")]
    EmptyMap,
    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f32),
    #[error("dimension mismatch: image {image:?}, mask {mask:?}")]
    DimensionMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("entry {entry} has no tensors for model {model}")]
    MissingModel { entry: String, model: String },
    #[error("entry {entry}: {source}")]
    Entry {
        entry: String,
        source: Box<GradCamError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Grad-CAM localization map: non-negative, finite, `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap(Array2<f32>);

impl Heatmap {
    /// Wraps an existing grid; negative or non-finite values are rejected.
    pub fn new(values: Array2<f32>) -> Option<Self> {
        values
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            .then_some(Self(values))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }
}

/// A weighted mask (`mask_norm`) with values in `[0, 1]`.
///
/// Masks built by [`normalize_mask`] span exactly `[0, 1]` unless
/// `degenerate`; resampled masks only keep the bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMask {
    pub values: Array2<f32>,
    pub degenerate: bool,
}

impl NormalizedMask {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Bilinear resample to `target`; the degeneracy flag carries over.
    pub fn resample(&self, target: (usize, usize)) -> Result<NormalizedMask, GradCamError> {
        Ok(NormalizedMask {
            values: upsample_bilinear(self.values.view(), target)?,
            degenerate: self.degenerate,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub values: Array2<bool>,
    pub threshold_used: f32,
}

impl BinaryMask {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn count_selected(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }
}

fn view3(record: &TensorRecord) -> Result<Array3<f32>, GradCamError> {
    record
        .to_array3_f32()
        .map_err(|_| GradCamError::WrongRank(format!("{} {:?}", record.dtype(), record.shape())))
}

/// Per-channel spatial mean of the gradients: `w_k = mean_{h,w} grad[k,h,w]`.
pub fn channel_weights(gradients: &TensorRecord) -> Result<Vec<f32>, GradCamError> {
    Ok(channel_weights_array(view3(gradients)?.view()))
}

pub fn channel_weights_array(gradients: ArrayView3<f32>) -> Vec<f32> {
    let (_, h, w) = gradients.dim();
    let area = (h * w) as f64;
    gradients
        .axis_iter(Axis(0))
        .map(|ch| (ch.iter().map(|&g| g as f64).sum::<f64>() / area) as f32)
        .collect()
}

/// `max(0, sum_k weights[k] * activations[k])`.
pub fn compute_heatmap(
    activations: &TensorRecord,
    weights: &[f32],
) -> Result<Heatmap, GradCamError> {
    compute_heatmap_array(view3(activations)?.view(), weights)
}

pub fn compute_heatmap_array(
    activations: ArrayView3<f32>,
    weights: &[f32],
) -> Result<Heatmap, GradCamError> {
    let (k, h, w) = activations.dim();
    if k != weights.len() {
        return Err(GradCamError::ChannelMismatch {
            activations: k,
            weights: weights.len(),
        });
    }
    let mut acc = Array2::<f64>::zeros((h, w));
    for (ch, &wk) in activations.axis_iter(Axis(0)).zip(weights) {
        let wk = wk as f64;
        Zip::from(&mut acc).and(&ch).for_each(|a, &v| *a += wk * v as f64);
    }
    Ok(Heatmap(acc.mapv(|v| v.max(0.0) as f32)))
}

/// Bilinear interpolation with corner alignment: source row `i` maps to
/// `i * (H0 - 1) / (H - 1)`. Output values stay inside the input's range.
pub fn upsample_bilinear(
    map: ArrayView2<f32>,
    target: (usize, usize),
) -> Result<Array2<f32>, GradCamError> {
    let (h, w) = map.dim();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(GradCamError::ZeroTarget(th, tw));
    }
    if h == 0 || w == 0 {
        return Err(GradCamError::EmptyMap);
    }

    // Source coordinate of each target index.
    fn axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                if src == 1 || dst == 1 {
                    return (0, 0, 0.0);
                }
                let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
                let lo = (pos.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    }
    let rows = axis(h, th);
    let cols = axis(w, tw);

    let mut out = Array2::<f32>::zeros((th, tw));
    for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let a = map[[y0, x0]] as f64;
            let b = map[[y0, x1]] as f64;
            let c = map[[y1, x0]] as f64;
            let d = map[[y1, x1]] as f64;
            let top = a + fx * (b - a);
            let bottom = c + fx * (d - c);
            let v = top + fy * (bottom - top);
            let lo = a.min(b).min(c).min(d);
            let hi = a.max(b).max(c).max(d);
            out[[y, x]] = v.clamp(lo, hi) as f32;
        }
    }
    Ok(out)
}

/// Min-max normalization into `[0, 1]`; constant inputs give an all-zero
/// mask flagged `degenerate`.
pub fn normalize_mask(heatmap: &Heatmap) -> NormalizedMask {
    let values = &heatmap.0;
    let (min, max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() || max <= min {
        return NormalizedMask {
            values: Array2::zeros(values.dim()),
            degenerate: true,
        };
    }
    let (min, span) = (min as f64, max as f64 - min as f64);
    NormalizedMask {
        values: values.mapv(|v| ((v as f64 - min) / span) as f32),
        degenerate: false,
    }
}

/// Selects pixels with `value >= t`.
pub fn threshold_mask(mask: &NormalizedMask, t: f32) -> Result<BinaryMask, GradCamError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GradCamError::ThresholdOutOfRange(t));
    }
    Ok(BinaryMask {
        values: mask.values.mapv(|v| v >= t),
        threshold_used: t,
    })
}

/// Blacks out every pixel the mask does not select.
pub fn apply_explanation(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, GradCamError> {
    let dims = (image.height() as usize, image.width() as usize);
    if dims != mask.dim() {
        return Err(GradCamError::DimensionMismatch {
            image: dims,
            mask: mask.dim(),
        });
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if !mask.values[[y as usize, x as usize]] {
            px.0 = [0, 0, 0];
        }
    }
    Ok(out)
}

/// Outputs of the per-image mask pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// Weighted mask at conv-map resolution.
    pub conv: NormalizedMask,
    /// Weighted mask upsampled to image resolution.
    pub image: NormalizedMask,
    pub binary: BinaryMask,
}

/// Weighted mask at conv resolution from a gradient/activation pair.
pub fn conv_mask(
    activations: ArrayView3<f32>,
    gradients: ArrayView3<f32>,
) -> Result<NormalizedMask, GradCamError> {
    if activations.dim() != gradients.dim() {
        return Err(GradCamError::ShapeMismatch {
            activations: activations.shape().to_vec(),
            gradients: gradients.shape().to_vec(),
        });
    }
    let weights = channel_weights_array(gradients);
    let heatmap = compute_heatmap_array(activations, &weights)?;
    Ok(normalize_mask(&heatmap))
}

/// Image-resolution and binary masks derived from a conv-resolution mask.
pub fn masks_from_conv(
    conv: NormalizedMask,
    image_size: (usize, usize),
    t: f32,
) -> Result<MaskSet, GradCamError> {
    let image = conv.resample(image_size)?;
    let binary = threshold_mask(&image, t)?;
    Ok(MaskSet {
        conv,
        image,
        binary,
    })
}

pub fn mask_pipeline_arrays(
    activations: ArrayView3<f32>,
    gradients: ArrayView3<f32>,
    image_size: (usize, usize),
    t: f32,
) -> Result<MaskSet, GradCamError> {
    masks_from_conv(conv_mask(activations, gradients)?, image_size, t)
}

/// Loads an entry's tensors for `model` and runs the full mask pipeline.
pub fn mask_pipeline(entry: &ImageEntry, model: &str, t: f32) -> Result<MaskSet, GradCamError> {
    let (act, grad) = load_pair(entry, model)?;
    mask_pipeline_arrays(act.view(), grad.view(), entry.image_size, t)
}

fn load_pair(entry: &ImageEntry, model: &str) -> Result<(Array3<f32>, Array3<f32>), GradCamError> {
    let paths = entry
        .tensors
        .get(model)
        .ok_or_else(|| GradCamError::MissingModel {
            entry: entry.id.clone(),
            model: model.to_string(),
        })?;
    let act = view3(&read_tensor_file(&paths.activation)?)?;
    let grad = view3(&read_tensor_file(&paths.gradient)?)?;
    Ok((act, grad))
}

/// Conv-resolution weighted masks of every entry for `model`, in manifest
/// order. Errors name the failing entry.
pub fn conv_masks(manifest: &DatasetManifest, model: &str) -> Result<Vec<NormalizedMask>, GradCamError> {
    manifest
        .entries
        .par_iter()
        .map(|entry| {
            load_pair(entry, model)
                .and_then(|(a, g)| conv_mask(a.view(), g.view()))
                .map_err(|e| GradCamError::Entry {
                    entry: entry.id.clone(),
                    source: Box::new(e),
                })
        })
        .collect()
}

//! Average residual (AR) between models' weighted masks.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::gradcam::{GradCamError, NormalizedMask};

#[derive(Debug, Error)]
pub enum ModelCmpError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("empty mask")]
    EmptyMask,
    #[error("image {entry} has no mask for model {model}")]
    MissingMask { entry: String, model: String },
    #[error("image {entry}: {source}")]
    Resample {
        entry: String,
        source: GradCamError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean absolute per-pixel difference of two same-sized masks.
pub fn average_residual(a: &NormalizedMask, b: &NormalizedMask) -> Result<f64, ModelCmpError> {
    mean_abs_residual(a.values.view(), b.values.view())
}

/// Mean absolute difference of two equal-shape grids, accumulated in f64
/// in row-major order.
pub fn mean_abs_residual<T>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<f64, ModelCmpError>
where
    T: Copy + Into<f64>,
{
    if a.dim() != b.dim() {
        return Err(ModelCmpError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.is_empty() {
        return Err(ModelCmpError::EmptyMask);
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x.into() - y.into()).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

/// Symmetric matrix of AR values averaged over a common image set.
#[derive(Debug, Clone, PartialEq)]
pub struct ArMatrix {
    pub models: Vec<String>,
    pub values: Array2<f64>,
    /// Images contributing to every entry.
    pub image_count: usize,
}

impl ArMatrix {
    pub fn get(&self, m1: &str, m2: &str) -> Option<f64> {
        let i = self.models.iter().position(|m| m == m1)?;
        let j = self.models.iter().position(|m| m == m2)?;
        Some(self.values[[i, j]])
    }

    /// Header row and first column carry the model ids.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), ModelCmpError> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["model".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (i, m) in self.models.iter().enumerate() {
            let mut rec = vec![m.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per unordered model pair, four decimals.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Models (m1-m2) | Average AR |\n|---|---|\n");
        for i in 0..self.models.len() {
            for j in i + 1..self.models.len() {
                out.push_str(&format!(
                    "| {}-{} | {:.4} |\n",
                    self.models[i], self.models[j], self.values[[i, j]]
                ));
            }
        }
        out
    }
}

/// Masks of one image across models, plus the image resolution they are
/// compared at.
#[derive(Debug, Clone)]
pub struct ImageMasks<'a> {
    pub id: &'a str,
    pub image_size: (usize, usize),
    /// One conv-resolution mask per model, in model order; `None` if missing.
    pub masks: Vec<Option<&'a NormalizedMask>>,
}

/// AR matrix over `images`. Each model's mask is bilinearly resampled to the
/// image resolution before comparison; per-image residuals are accumulated
/// in image order.
pub fn ar_matrix(models: &[String], images: &[ImageMasks<'_>]) -> Result<ArMatrix, ModelCmpError> {
    let m = models.len();
    let per_image: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| {
            let mut resampled = Vec::with_capacity(m);
            for (k, mask) in img.masks.iter().enumerate() {
                let mask = mask.ok_or_else(|| ModelCmpError::MissingMask {
                    entry: img.id.to_string(),
                    model: models[k].clone(),
                })?;
                resampled.push(mask.resample(img.image_size).map_err(|source| {
                    ModelCmpError::Resample {
                        entry: img.id.to_string(),
                        source,
                    }
                })?);
            }
            let mut out = vec![0.0; m * m];
            for i in 0..m {
                for j in i + 1..m {
                    let r = average_residual(&resampled[i], &resampled[j])?;
                    out[i * m + j] = r;
                    out[j * m + i] = r;
                }
            }
            Ok(out)
        })
        .collect::<Result<_, ModelCmpError>>()?;

    let mut values = Array2::<f64>::zeros((m, m));
    for residuals in &per_image {
        for (v, r) in values.iter_mut().zip(residuals) {
            *v += r;
        }
    }
    if !per_image.is_empty() {
        values /= per_image.len() as f64;
    }
    Ok(ArMatrix {
        models: models.to_vec(),
        values,
        image_count: per_image.len(),
    })
}

//! Weighted masks as descriptors: PCA followed by exact t-SNE.

mod pca;
mod tsne;

pub use pca::{pca_reduce, PcaResult, DEFAULT_COMPONENTS};
pub use tsne::{
    joint_probabilities, pairwise_sq_distances, perplexity_calibrate, tsne_embed,
    EmbeddingResult, KlPoint, TsneParams, ENTROPY_TOLERANCE, KL_EVERY, MAX_CALIBRATION_STEPS,
    P_FLOOR,
};

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::gradcam::{conv_masks, GradCamError, NormalizedMask};
use crate::manifest::DatasetManifest;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("perplexity {perplexity} too large for {n} points (need n > 3 * perplexity)")]
    PerplexityTooLarge { perplexity: f64, n: usize },
    #[error("invalid t-SNE parameters: {0}")]
    InvalidParams(String),
    #[error("invalid distance matrix: {0}")]
    InvalidDistances(String),
    #[error("KL divergence became non-finite at iteration {iteration}")]
    NonFiniteKl { iteration: usize },
    #[error("descriptor {index} has {found} values, expected {expected}")]
    DescriptorLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Mask(#[from] GradCamError),
}

/// Flattened conv-resolution masks, one row per image in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    pub ids: Vec<String>,
    pub values: Array2<f32>,
}

impl DescriptorMatrix {
    pub fn from_masks(ids: Vec<String>, masks: &[NormalizedMask]) -> Result<Self, EmbeddingError> {
        let d = masks.first().map_or(0, |m| m.values.len());
        let mut flat = Vec::with_capacity(masks.len() * d);
        for (index, m) in masks.iter().enumerate() {
            if m.values.len() != d {
                return Err(EmbeddingError::DescriptorLength {
                    index,
                    expected: d,
                    found: m.values.len(),
                });
            }
            flat.extend(m.values.iter().copied());
        }
        let values = Array2::from_shape_vec((masks.len(), d), flat).expect("checked lengths");
        Ok(Self { ids, values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

/// Result of the descriptor -> PCA -> t-SNE chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEmbedding {
    pub ids: Vec<String>,
    pub pca: PcaResult,
    pub embedding: EmbeddingResult,
}

pub fn embed_scores(
    data: ArrayView2<f64>,
    n_components: usize,
    params: &TsneParams,
) -> Result<(PcaResult, EmbeddingResult), EmbeddingError> {
    let pca = pca_reduce(data, n_components)?;
    let embedding = tsne_embed(pca.scores.view(), params)?;
    Ok((pca, embedding))
}

pub fn embed_descriptors(
    descriptors: &DescriptorMatrix,
    n_components: usize,
    params: &TsneParams,
) -> Result<MaskEmbedding, EmbeddingError> {
    let (pca, embedding) = embed_scores(descriptors.to_f64().view(), n_components, params)?;
    Ok(MaskEmbedding {
        ids: descriptors.ids.clone(),
        pca,
        embedding,
    })
}

/// Flattens each image's conv-resolution mask for `model`, reduces to
/// [`DEFAULT_COMPONENTS`] principal components and embeds with t-SNE.
pub fn embed_masks(
    manifest: &DatasetManifest,
    model: &str,
    params: &TsneParams,
) -> Result<MaskEmbedding, EmbeddingError> {
    let masks = conv_masks(manifest, model)?;
    let ids = manifest.entries.iter().map(|e| e.id.clone()).collect();
    embed_descriptors(&DescriptorMatrix::from_masks(ids, &masks)?, DEFAULT_COMPONENTS, params)
}

//! Interpretability toolkit for place-recognition CNNs.
//!
//! Turns exported last-conv activations and gradients into Grad-CAM
//! weighted masks, clusters the masks (PCA + t-SNE), and scores them with
//! two metrics: the per-class object pixel ratio `R` and the cross-model
//! average residual `AR`.

pub mod embedding;
pub mod gradcam;
pub mod manifest;
pub mod modelcmp;
pub mod objstats;
pub mod report;
pub mod synth;
pub mod tensor_io;

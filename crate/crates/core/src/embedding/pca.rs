use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::EmbeddingError;

/// Default number of principal components kept ahead of t-SNE.
pub const DEFAULT_COMPONENTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `N x C` projections of the centered data.
    pub scores: Array2<f64>,
    /// `C x D` unit principal axes, rows ordered by decreasing variance.
    pub components: Array2<f64>,
    /// Eigenvalues of the sample covariance, descending, length `C`.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub requested_components: usize,
}

impl PcaResult {
    pub fn n_components(&self) -> usize {
        self.scores.ncols()
    }

    /// True when the requested component count exceeded `min(N - 1, D)`.
    pub fn was_clamped(&self) -> bool {
        self.requested_components != self.n_components()
    }
}

/// Projects `x` (`N x D`) onto the top eigenvectors of its sample covariance.
///
/// Each axis is sign-fixed so that its largest-magnitude entry is positive;
/// `n_components` is clamped to `min(N - 1, D)`.
pub fn pca_reduce(x: ArrayView2<f64>, n_components: usize) -> Result<PcaResult, EmbeddingError> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(EmbeddingError::TooFewSamples { n, min: 2 });
    }
    let c = n_components.min(n - 1).min(d);

    let mean: Array1<f64> = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1) as f64;

    let cov_na = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(cov_na);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let total: f64 = (0..d).map(|i| cov[[i, i]]).sum();
    let mut components = Array2::<f64>::zeros((c, d));
    let mut variance = Vec::with_capacity(c);
    for (row, &idx) in order.iter().take(c).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let pivot = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[[row, i]] = sign * v[i];
        }
        variance.push(eig.eigenvalues[idx].max(0.0));
    }
    let ratio = variance
        .iter()
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();

    Ok(PcaResult {
        scores: centered.dot(&components.t()),
        components,
        explained_variance: variance,
        explained_variance_ratio: ratio,
        requested_components: n_components,
    })
}

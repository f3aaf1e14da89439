//! Exact O(N^2) t-SNE.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::EmbeddingError;

/// Joint probabilities are floored here before optimization.
pub const P_FLOOR: f64 = 1e-12;
/// Entropy tolerance (bits) for the per-point bandwidth search.
pub const ENTROPY_TOLERANCE: f64 = 1e-5;
/// The bisection stops below this, a tenth of [`ENTROPY_TOLERANCE`].
const SEARCH_TOLERANCE: f64 = ENTROPY_TOLERANCE / 10.0;
/// Maximum bisection steps per point.
pub const MAX_CALIBRATION_STEPS: usize = 50;
/// KL divergence is recorded every this many iterations.
pub const KL_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations that use the exaggerated P.
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// First iteration that uses `final_momentum`.
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneParams {
    /// Checks the parameters against a dataset of `n` points.
    pub fn validate(&self, n: usize) -> Result<(), EmbeddingError> {
        let positive = [
            ("perplexity", self.perplexity),
            ("learning_rate", self.learning_rate),
            ("early_exaggeration", self.early_exaggeration),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EmbeddingError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("initial_momentum", self.initial_momentum),
            ("final_momentum", self.final_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(EmbeddingError::InvalidParams(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(EmbeddingError::InvalidParams("iterations must be positive".into()));
        }
        check_perplexity(n, self.perplexity)
    }
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<(), EmbeddingError> {
    if (n as f64) <= 3.0 * perplexity {
        return Err(EmbeddingError::PerplexityTooLarge { perplexity, n });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlPoint {
    pub iteration: usize,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingResult {
    /// `N x 2` embedding coordinates.
    pub coords: Array2<f64>,
    pub kl_trace: Vec<KlPoint>,
    pub params: TsneParams,
}

/// Squared Euclidean distances between rows.
pub fn pairwise_sq_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
                    }
                })
                .collect()
        })
        .collect();
    Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("n x n")
}

/// Gaussian row for precision `beta`, shifted by the row's nearest distance.
/// Returns the Shannon entropy in bits.
fn gaussian_row(d: &[f64], i: usize, dmin: f64, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&dj, o)) in d.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let shifted = dj - dmin;
        let p = (-beta * shifted).exp();
        *o = p;
        sum += p;
        weighted += p * shifted;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2
}

/// Conditional input similarities `p_{j|i}`: each row is a Gaussian kernel
/// whose precision is bisected until the row entropy equals
/// `log2(perplexity)`.
pub fn perplexity_calibrate(
    distances_sq: ArrayView2<f64>,
    perplexity: f64,
) -> Result<Array2<f64>, EmbeddingError> {
    let (n, m) = distances_sq.dim();
    if n != m {
        return Err(EmbeddingError::InvalidDistances(format!("matrix is {n}x{m}")));
    }
    if !(perplexity.is_finite() && perplexity > 0.0) {
        return Err(EmbeddingError::InvalidParams(format!(
            "perplexity must be positive, got {perplexity}"
        )));
    }
    check_perplexity(n, perplexity)?;
    for i in 0..n {
        if distances_sq[[i, i]] != 0.0 {
            return Err(EmbeddingError::InvalidDistances(format!("nonzero diagonal at {i}")));
        }
        for j in 0..i {
            let v = distances_sq[[i, j]];
            if !(v.is_finite() && v >= 0.0) || v != distances_sq[[j, i]] {
                return Err(EmbeddingError::InvalidDistances(format!(
                    "entry ({i}, {j}) is negative, non-finite or asymmetric"
                )));
            }
        }
    }

    let target = perplexity.log2();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = distances_sq.row(i).to_vec();
            let others = d.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v);
            let dmin = others.clone().fold(f64::INFINITY, f64::min);
            let spread = others.map(|v| v - dmin).sum::<f64>() / (n - 1) as f64;

            let mut beta = if spread > 0.0 { 1.0 / spread } else { 1.0 };
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut row = vec![0.0; n];
            for _ in 0..MAX_CALIBRATION_STEPS {
                let h = gaussian_row(&d, i, dmin, beta, &mut row);
                let diff = h - target;
                if diff.abs() < SEARCH_TOLERANCE {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { (lo * hi).sqrt() } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = if lo > 0.0 { (lo * hi).sqrt() } else { beta / 2.0 };
                }
            }
            row
        })
        .collect();
    Ok(Array2::from_shape_vec((n, n), rows.into_iter().flatten().collect()).expect("n x n"))
}

/// Symmetrized joint probabilities `(p_{j|i} + p_{i|j}) / 2N`, floored at
/// [`P_FLOOR`] off the diagonal.
pub fn joint_probabilities(conditional: &Array2<f64>) -> Array2<f64> {
    let n = conditional.nrows();
    let denom = 2.0 * n as f64;
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            ((conditional[[i, j]] + conditional[[j, i]]) / denom).max(P_FLOOR)
        }
    })
}

/// Student-t kernel `1 / (1 + |y_i - y_j|^2)` (zero diagonal) and its sum.
fn student_kernel(y: &Array2<f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            let mut sum = 0.0;
            for (j, r) in row.iter_mut().enumerate() {
                if i != j {
                    let dx = y[[i, 0]] - y[[j, 0]];
                    let dy = y[[i, 1]] - y[[j, 1]];
                    *r = 1.0 / (1.0 + dx * dx + dy * dy);
                    sum += *r;
                }
            }
            (row, sum)
        })
        .collect();
    let z: f64 = rows.iter().map(|(_, s)| s).sum();
    let flat = rows.into_iter().flat_map(|(r, _)| r).collect();
    (Array2::from_shape_vec((n, n), flat).expect("n x n"), z)
}

/// `KL(P || Q)` over off-diagonal pairs.
fn kl_divergence(p: &Array2<f64>, kernel: &Array2<f64>, z: f64) -> f64 {
    let n = p.nrows();
    let per_row: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let pij = p[[i, j]];
                    let qij = (kernel[[i, j]] / z).max(f64::MIN_POSITIVE);
                    pij * (pij / qij).ln()
                })
                .sum()
        })
        .collect();
    // Rounding can leave a tiny negative value at the optimum.
    per_row.iter().sum::<f64>().max(0.0)
}

/// Embeds the rows of `data` into two dimensions.
pub fn tsne_embed(data: ArrayView2<f64>, params: &TsneParams) -> Result<EmbeddingResult, EmbeddingError> {
    let n = data.nrows();
    params.validate(n)?;

    let d2 = pairwise_sq_distances(data);
    let p = joint_probabilities(&perplexity_calibrate(d2.view(), params.perplexity)?);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_simple_fn((n, 2), || normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut trace = Vec::with_capacity(params.iterations / KL_EVERY + 2);

    for iter in 0..params.iterations {
        let (kernel, z) = student_kernel(&y);
        if iter % KL_EVERY == 0 {
            let kl = kl_divergence(&p, &kernel, z);
            if !kl.is_finite() {
                return Err(EmbeddingError::NonFiniteKl { iteration: iter });
            }
            trace.push(KlPoint { iteration: iter, kl });
        }

        let exaggeration = if iter < params.exaggeration_iterations {
            params.early_exaggeration
        } else {
            1.0
        };
        let grad_rows: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let k = kernel[[i, j]];
                    let coef = (exaggeration * p[[i, j]] - k / z) * k;
                    g[0] += coef * (y[[i, 0]] - y[[j, 0]]);
                    g[1] += coef * (y[[i, 1]] - y[[j, 1]]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();

        let momentum = if iter < params.momentum_switch {
            params.initial_momentum
        } else {
            params.final_momentum
        };
        for (i, g) in grad_rows.iter().enumerate() {
            for (d, &gd) in g.iter().enumerate() {
                let gain = &mut gains[[i, d]];
                *gain = if (gd > 0.0) != (update[[i, d]] > 0.0) {
                    *gain + 0.2
                } else {
                    (*gain * 0.8).max(0.01)
                };
                let u = momentum * update[[i, d]] - params.learning_rate * *gain * gd;
                update[[i, d]] = u;
                y[[i, d]] += u;
            }
        }
        let mean = y.mean_axis(Axis(0)).expect("n >= 1");
        y -= &mean.view().insert_axis(Axis(0));

        if y.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFiniteKl { iteration: iter });
        }
    }

    let (kernel, z) = student_kernel(&y);
    let kl = kl_divergence(&p, &kernel, z);
    if !kl.is_finite() {
        return Err(EmbeddingError::NonFiniteKl {
            iteration: params.iterations,
        });
    }
    trace.push(KlPoint {
        iteration: params.iterations,
        kl,
    });

    Ok(EmbeddingResult {
        coords: y,
        kl_trace: trace,
        params: params.clone(),
    })
}

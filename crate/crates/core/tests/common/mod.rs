//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite. Nothing here calls into the code under test.
#![allow(dead_code)]

use rand::Rng;

/// `w_k` as the plain average of channel `k`, accumulated element by element.
pub fn weights_oracle(grad: &[f32], k: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; k];
    for c in 0..k {
        let mut s = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                s += grad[c * h * w + y * w + x] as f64;
            }
        }
        out[c] = s / (h * w) as f64;
    }
    out
}

/// `max(0, sum_k w_k A_k)` per pixel, row-major `h * w`.
pub fn heatmap_oracle(act: &[f32], weights: &[f64], k: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f64;
            for c in 0..k {
                s += weights[c] * act[c * h * w + y * w + x] as f64;
            }
            out[y * w + x] = if s > 0.0 { s } else { 0.0 };
        }
    }
    out
}

/// Min-max scaling; `None` when the input is constant.
pub fn normalize_oracle(v: &[f64]) -> Option<Vec<f64>> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return None;
    }
    Some(v.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n x n` matrix stored
/// row-major. Returns eigenvalues descending and eigenvectors as columns
/// of the returned row-major matrix, in the same order.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    (values, vectors)
}

/// Sample covariance (divisor `n - 1`) of row-major `n x d` data.
pub fn covariance(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[i * d + j] / n as f64;
        }
    }
    let mut c = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] += (x[i * d + a] - mean[a]) * (x[i * d + b] - mean[b]);
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    c
}

/// Sine of the largest principal angle between the column spans of the
/// orthonormal `d x c` bases `u` and `v`, bounded above via the Frobenius
/// norm of `(I - V V^T) U`.
pub fn subspace_sine(u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let mut frob = 0.0;
    for ui in u {
        let mut r = ui.clone();
        for vj in v {
            let dot: f64 = ui.iter().zip(vj).map(|(a, b)| a * b).sum();
            for (rk, vk) in r.iter_mut().zip(vj) {
                *rk -= dot * vk;
            }
        }
        frob += r.iter().map(|x| x * x).sum::<f64>();
    }
    frob.sqrt()
}

/// Mean silhouette coefficient with Euclidean distances.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dist = |i: usize, j: usize| {
        let dx = points[i][0] - points[j][0];
        let dy = points[i][1] - points[j][1];
        (dx * dx + dy * dy).sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
        }
        if counts[labels[i]] == 0 {
            continue;
        }
        let a = sums[labels[i]] / counts[labels[i]] as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Shannon entropy in bits of a probability row, skipping `skip`.
pub fn entropy_bits(row: &[f64], skip: usize) -> f64 {
    row.iter()
        .enumerate()
        .filter(|&(j, &p)| j != skip && p > 0.0)
        .map(|(_, &p)| -p * p.log2())
        .sum()
}

/// Mean absolute difference of two equal-length slices.
pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Ratio of summed selected pixels to summed pixels of `object` over images.
pub fn ratio_oracle(images: &[(Vec<u16>, Vec<bool>)], object: u16) -> Option<f64> {
    let (mut m, mut n) = (0u64, 0u64);
    for (seg, mask) in images {
        for (&l, &s) in seg.iter().zip(mask) {
            if l == object {
                n += 1;
                m += s as u64;
            }
        }
    }
    (n > 0).then(|| m as f64 / n as f64)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Two isotropic unit-variance Gaussian clusters whose centers are `sep`
/// apart along every axis direction combined (distance `sep`).
pub fn two_clusters<R: Rng>(rng: &mut R, n: usize, d: usize, sep: f64) -> (Vec<f64>, Vec<usize>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut x = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let offset = sep / (d as f64).sqrt();
    for i in 0..n {
        let c = i % 2;
        labels.push(c);
        for _ in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            x.push(z + if c == 1 { offset } else { 0.0 });
        }
    }
    (x, labels)
}

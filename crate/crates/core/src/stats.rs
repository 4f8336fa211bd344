//! Descriptive statistics, normal-distribution helpers and the block-wise
//! Monte Carlo estimator shared by the oracles.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::{erfc, erfc_inv};

use crate::rng;

/// Standard normal CDF, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile for `p` in `(0, 1)`.
pub fn norm_quantile(p: f64) -> f64 {
    let q = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // one Newton step against `norm_cdf` tightens the tails
    let d = norm_pdf(q);
    if d > 0.0 && q.is_finite() {
        q - (norm_cdf(q) - p) / d
    } else {
        q
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Sample kurtosis `E[(x - m)^4] / Var^2` (3 for a Gaussian).
pub fn kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2)
}

/// Linear-interpolated empirical quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fraction of `sorted` that is `<= x`.
pub fn ecdf_sorted(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Mean and unbiased covariance (row-major `dim x dim`) of `n` rows stored
/// row-major in `data`, computed in two passes.
pub fn covariance(data: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() / dim;
    let mut m = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    let mut d = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for k in 0..dim {
            d[k] = row[k] - m[k];
        }
        for i in 0..dim {
            let di = d[i];
            let out = &mut cov[i * dim..];
            for j in i..dim {
                out[j] += di * d[j];
            }
        }
    }
    let denom = n as f64 - 1.0;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / denom;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    (m, cov)
}

/// Single-pass (Welford co-moment) version of [`covariance`].
pub fn covariance_one_pass(data: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = vec![0.0; dim];
    let mut c = vec![0.0; dim * dim];
    let mut delta = vec![0.0; dim];
    for (k, row) in data.chunks_exact(dim).enumerate() {
        let n = (k + 1) as f64;
        for i in 0..dim {
            delta[i] = row[i] - m[i];
            m[i] += delta[i] / n;
        }
        for i in 0..dim {
            for j in 0..dim {
                c[i * dim + j] += delta[i] * (row[j] - m[j]);
            }
        }
    }
    let n = (data.len() / dim) as f64;
    c.iter_mut().for_each(|v| *v /= n - 1.0);
    (m, c)
}

/// Monte Carlo mean and covariance with standard errors.
#[derive(Clone, Debug)]
pub struct McMoments {
    pub dim: usize,
    pub n: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub cov_se: Vec<f64>,
}

fn weighted_mean_se(estimates: &[(f64, f64)]) -> (f64, f64) {
    // (weight, value) pairs; SE from the spread of per-block estimates.
    let wsum: f64 = estimates.iter().map(|e| e.0).sum();
    let m = estimates.iter().map(|e| e.0 * e.1).sum::<f64>() / wsum;
    let nb = estimates.len() as f64;
    if nb < 2.0 {
        return (m, f64::NAN);
    }
    let var: f64 = estimates
        .iter()
        .map(|e| (e.0 / wsum).powi(2) * (e.1 - m).powi(2))
        .sum();
    (m, (var * nb / (nb - 1.0)).sqrt())
}

/// Estimates mean and covariance of a `dim`-dimensional random vector from
/// `n` draws. `draw` fills one sample from the given stream.
///
/// Draws are grouped in blocks of [`rng::BLOCK`], each with its own keyed
/// stream, and standard errors come from the spread of per-block
/// estimates. Results do not depend on the number of worker threads.
pub fn block_moments<F>(dim: usize, n: usize, seed: u64, draw: F) -> McMoments
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let blocks: Vec<(u64, usize)> = rng::blocks(n).collect();
    let per_block: Vec<(usize, Vec<f64>, Vec<f64>)> = blocks
        .par_iter()
        .map(|&(b, len)| {
            let mut r = rng::keyed(seed, b);
            let mut buf = vec![0.0; len * dim];
            for row in buf.chunks_exact_mut(dim) {
                draw(&mut r, row);
            }
            let (m, c) = if len > 1 {
                covariance(&buf, dim)
            } else {
                (buf.clone(), vec![0.0; dim * dim])
            };
            (len, m, c)
        })
        .collect();

    let mut mean = vec![0.0; dim];
    let mut mean_se = vec![0.0; dim];
    for i in 0..dim {
        let est: Vec<(f64, f64)> = per_block.iter().map(|(l, m, _)| (*l as f64, m[i])).collect();
        (mean[i], mean_se[i]) = weighted_mean_se(&est);
    }
    let mut cov = vec![0.0; dim * dim];
    let mut cov_se = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let est: Vec<(f64, f64)> = per_block
                .iter()
                .filter(|(l, _, _)| *l > 1)
                .map(|(l, _, c)| ((*l - 1) as f64, c[i * dim + j]))
                .collect();
            let (v, se) = weighted_mean_se(&est);
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
            cov_se[i * dim + j] = se;
            cov_se[j * dim + i] = se;
        }
    }
    McMoments {
        dim,
        n,
        mean,
        mean_se,
        cov,
        cov_se,
    }
}

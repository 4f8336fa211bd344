//! Gaussian fits to sample clouds and the KL divergence between them.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

/// Diagonal jitter added to fitted full covariances, relative to `trace / dim`.
pub const JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: Covariance,
    /// Amount added to the diagonal during fitting (0 when built directly).
    pub jitter: f64,
}

impl GaussianFit {
    pub fn full(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape("covariance does not match the mean"));
        }
        Ok(GaussianFit {
            mean,
            cov: Covariance::Full(cov),
            jitter: 0.0,
        })
    }

    pub fn diagonal(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if var.len() != mean.len() {
            return Err(Error::shape("variances do not match the mean"));
        }
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Fit("diagonal variances must be positive".into()));
        }
        Ok(GaussianFit {
            mean,
            cov: Covariance::Diagonal(var),
            jitter: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        match &self.cov {
            Covariance::Full(m) => m.diagonal().iter().copied().collect(),
            Covariance::Diagonal(v) => v.clone(),
        }
    }

    pub fn dense_cov(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
        }
    }

    fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.dense_cov()).ok_or_else(|| Error::Fit("covariance is not positive definite".into()))
    }

    /// Draws `n` rows (row-major) as `mean + L z` for standard normal `z`
    /// from stream `(seed, 0)`. Fits of equal dimension drawn with the same
    /// seed share their `z`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut r = rng::keyed(seed, 0);
        let mut z = vec![0.0; d];
        let mut out = Vec::with_capacity(n * d);
        match &self.cov {
            Covariance::Diagonal(v) => {
                let sd: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
                for _ in 0..n {
                    rng::fill_std_normal(&mut r, &mut z);
                    out.extend((0..d).map(|i| self.mean[i] + sd[i] * z[i]));
                }
            }
            Covariance::Full(_) => {
                let l = self.cholesky()?.l();
                for _ in 0..n {
                    rng::fill_std_normal(&mut r, &mut z);
                    let x = &l * DVector::from_column_slice(&z);
                    out.extend((0..d).map(|i| self.mean[i] + x[i]));
                }
            }
        }
        Ok(out)
    }

    fn log_det(&self) -> Result<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => Ok(v.iter().map(|x| x.ln()).sum()),
            Covariance::Full(_) => {
                let l = self.cholesky()?.l();
                Ok(2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>())
            }
        }
    }
}

/// Sample mean and unbiased covariance of `n` rows of `dim` values, with
/// [`JITTER`] `* trace / dim` added to the diagonal.
pub fn fit_full(samples: &[f64], dim: usize) -> Result<GaussianFit> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::shape("samples are not a whole number of rows"));
    }
    let n = samples.len() / dim;
    if n < 2 {
        return Err(Error::invalid("a covariance fit needs at least 2 samples"));
    }
    if n <= dim {
        log::warn!("fitting a {dim}-dimensional covariance to {n} samples; result is jitter dominated");
    }
    let (mean, cov) = stats::covariance(samples, dim);
    let mut cov = DMatrix::from_row_slice(dim, dim, &cov);
    let trace = cov.trace();
    let jitter = if trace > 0.0 { JITTER * trace / dim as f64 } else { JITTER };
    for i in 0..dim {
        cov[(i, i)] += jitter;
    }
    let fit = GaussianFit {
        mean,
        cov: Covariance::Full(cov),
        jitter,
    };
    fit.cholesky()?;
    Ok(fit)
}

/// Same mean, variances from the diagonal of `full`: the diagonal Gaussian
/// closest to `full` in `KL(full || .)`.
pub fn fit_diag(full: &GaussianFit) -> Result<GaussianFit> {
    let mut d = GaussianFit::diagonal(full.mean.clone(), full.variances())?;
    d.jitter = full.jitter;
    Ok(d)
}

/// `KL(p || q)` between two Gaussians, in nats. Negative round-off is
/// clamped to zero.
pub fn kl_divergence(p: &GaussianFit, q: &GaussianFit) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(Error::shape(format!("fits have dimensions {d} and {}", q.dim())));
    }
    let diff: Vec<f64> = (0..d).map(|i| q.mean[i] - p.mean[i]).collect();
    let (trace, maha) = match &q.cov {
        Covariance::Diagonal(qv) => {
            let pv = p.variances();
            let trace: f64 = (0..d).map(|i| pv[i] / qv[i]).sum();
            let maha: f64 = (0..d).map(|i| diff[i] * diff[i] / qv[i]).sum();
            (trace, maha)
        }
        Covariance::Full(_) => {
            let ch = q.cholesky()?;
            let sol = ch.solve(&p.dense_cov());
            let dv = ch.solve(&DVector::from_column_slice(&diff));
            let maha: f64 = dv.iter().zip(&diff).map(|(a, b)| a * b).sum();
            (sol.trace(), maha)
        }
    };
    let kl = 0.5 * (trace + maha - d as f64 + q.log_det()? - p.log_det()?);
    Ok(kl.max(0.0))
}

/// `E_KL = KL(full || diag)`.
pub fn kl_error(full: &GaussianFit, diag: &GaussianFit) -> Result<f64> {
    kl_divergence(full, diag)
}

/// Monte Carlo estimate of `KL(p || q)` from `n` draws of `p`, with its
/// standard error. Used to cross-check the closed form.
pub fn kl_monte_carlo(p: &GaussianFit, q: &GaussianFit, n: usize, seed: u64) -> Result<(f64, f64)> {
    let d = p.dim();
    let xs = p.sample(n, seed)?;
    let lp = log_density_fn(p)?;
    let lq = log_density_fn(q)?;
    let vals: Vec<f64> = xs.chunks_exact(d).map(|x| lp(x) - lq(x)).collect();
    Ok((stats::mean(&vals), (stats::variance(&vals) / n as f64).sqrt()))
}

fn log_density_fn(g: &GaussianFit) -> Result<impl Fn(&[f64]) -> f64 + '_> {
    let ch = g.cholesky()?;
    let ld = g.log_det()?;
    let d = g.dim() as f64;
    Ok(move |x: &[f64]| {
        let diff = DVector::from_iterator(x.len(), x.iter().zip(&g.mean).map(|(a, b)| a - b));
        let sol = ch.solve(&diff);
        -0.5 * (diff.dot(&sol) + ld + d * (2.0 * std::f64::consts::PI).ln())
    })
}

/// Convenience: random covariance `A A^T + eps I` used by tests and demos.
pub fn random_spd(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng::std_normal(rng));
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

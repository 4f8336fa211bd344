//! Diagonal-covariance Gaussian mixtures fitted by EM, with BIC model
//! selection and dominant-component extraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub converged: bool,
}

/// Free parameters of a `k` component diagonal mixture in `dim` dimensions.
pub fn n_free_params(k: usize, dim: usize) -> usize {
    k * 2 * dim + k - 1
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Workspace<'a> {
    data: &'a [f64],
    dim: usize,
    n: usize,
    floor: Vec<f64>,
}

impl Workspace<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Log densities `log w_j + log N(x_i | mu_j, var_j)` into `out[i*k + j]`.
    fn log_joint(&self, w: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>], out: &mut [f64]) {
        let k = w.len();
        let consts: Vec<f64> = (0..k)
            .map(|j| {
                w[j].ln()
                    - 0.5 * vars[j].iter().map(|v| v.ln()).sum::<f64>()
                    - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()
            })
            .collect();
        let inv: Vec<Vec<f64>> = vars.iter().map(|v| v.iter().map(|x| 1.0 / x).collect()).collect();
        for i in 0..self.n {
            let x = self.row(i);
            for j in 0..k {
                let mut q = 0.0;
                for ((xv, m), iv) in x.iter().zip(&means[j]).zip(&inv[j]) {
                    let d = xv - m;
                    q += d * d * iv;
                }
                out[i * k + j] = consts[j] - 0.5 * q;
            }
        }
    }

    /// k-means++ seeding.
    fn seed_centers(&self, k: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
        let mut centers = vec![self.row(r.random_range(0..self.n)).to_vec()];
        let mut d2 = vec![f64::INFINITY; self.n];
        while centers.len() < k {
            let c = centers.last().unwrap();
            for (i, d) in d2.iter_mut().enumerate() {
                let dist: f64 = self.row(i).iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                *d = d.min(dist);
            }
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = r.random::<f64>() * total;
                let mut idx = self.n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if u < d {
                        idx = i;
                        break;
                    }
                    u -= d;
                }
                idx
            } else {
                r.random_range(0..self.n)
            };
            centers.push(self.row(pick).to_vec());
        }
        centers
    }

    fn em(&self, k: usize, r: &mut impl Rng, max_iter: usize, tol: f64) -> GmmFit {
        let dim = self.dim;
        let n = self.n;
        let mut means = self.seed_centers(k, r);
        let mut vars: Vec<Vec<f64>> = vec![self.global_var(); k];
        let mut w = vec![1.0 / k as f64; k];
        let mut lj = vec![0.0; n * k];
        let mut prev = f64::NEG_INFINITY;
        let mut ll = f64::NEG_INFINITY;
        let mut converged = false;
        for _ in 0..max_iter {
            self.log_joint(&w, &means, &vars, &mut lj);
            ll = 0.0;
            for i in 0..n {
                let row = &mut lj[i * k..(i + 1) * k];
                let lse = log_sum_exp(row);
                ll += lse;
                row.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            if (ll - prev).abs() <= tol * (1.0 + ll.abs()) {
                converged = true;
                break;
            }
            prev = ll;
            // M-step; `lj` now holds responsibilities
            for j in 0..k {
                let nk: f64 = (0..n).map(|i| lj[i * k + j]).sum();
                if nk < 1e-10 {
                    // empty component: reseed on a random point
                    means[j] = self.row(r.random_range(0..n)).to_vec();
                    vars[j] = self.global_var();
                    w[j] = 1.0 / n as f64;
                    continue;
                }
                let mut m = vec![0.0; dim];
                for i in 0..n {
                    let g = lj[i * k + j];
                    for (a, x) in m.iter_mut().zip(self.row(i)) {
                        *a += g * x;
                    }
                }
                m.iter_mut().for_each(|v| *v /= nk);
                let mut v = vec![0.0; dim];
                for i in 0..n {
                    let g = lj[i * k + j];
                    for ((a, x), mm) in v.iter_mut().zip(self.row(i)).zip(&m) {
                        *a += g * (x - mm).powi(2);
                    }
                }
                for (a, f) in v.iter_mut().zip(&self.floor) {
                    *a = (*a / nk).max(*f);
                }
                means[j] = m;
                vars[j] = v;
                w[j] = nk / n as f64;
            }
            let ws: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= ws);
        }
        let bic = -2.0 * ll + n_free_params(k, dim) as f64 * (n as f64).ln();
        GmmFit {
            k,
            weights: w,
            means,
            vars,
            log_likelihood: ll,
            bic,
            converged,
        }
    }

    fn global_var(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.n {
            for (a, x) in m.iter_mut().zip(self.row(i)) {
                *a += x;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n as f64);
        let mut v = vec![0.0; self.dim];
        for i in 0..self.n {
            for ((a, x), mm) in v.iter_mut().zip(self.row(i)).zip(&m) {
                *a += (x - mm).powi(2);
            }
        }
        v.iter()
            .zip(&self.floor)
            .map(|(a, f)| (a / self.n as f64).max(*f))
            .collect()
    }
}

/// Fits a `k` component mixture to `n` rows of `dim` values (row-major),
/// keeping the best of a few seeded restarts.
pub fn fit_gmm(data: &[f64], dim: usize, k: usize, seed: u64) -> Result<GmmFit> {
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(Error::shape("data is not a whole number of rows"));
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot fit {k} components to {n} points")));
    }
    let mut ws = Workspace {
        data,
        dim,
        n,
        floor: vec![0.0; dim],
    };
    // variance floor relative to each coordinate's spread
    let gv = ws.global_var();
    ws.floor = gv.iter().map(|v| (1e-6 * v).max(1e-300)).collect();
    let (restarts, max_iter) = if dim <= 16 { (4, 500) } else { (1, 100) };
    let mut best: Option<GmmFit> = None;
    for rep in 0..restarts {
        let mut r = rng::keyed(seed, (k * 16 + rep) as u64);
        let fit = ws.em(k, &mut r, max_iter, 1e-10);
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

/// Mixture chosen by BIC among `1..=k_max` components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicSelection {
    pub best: GmmFit,
    /// `(k, bic)` for every candidate that was fitted.
    pub bics: Vec<(usize, f64)>,
}

/// Fits `1..=k_max` components and keeps the lowest BIC. With fewer than
/// `k_max * (dim + 1)` rows only one component is fitted.
pub fn select_by_bic(data: &[f64], dim: usize, k_max: usize, seed: u64) -> Result<BicSelection> {
    if dim == 0 || data.len() % dim != 0 || data.is_empty() {
        return Err(Error::shape("data is not a whole number of rows"));
    }
    let n = data.len() / dim;
    let k_max = k_max.max(1);
    let k_top = if n < k_max * (dim + 1) { 1 } else { k_max };
    let mut bics = Vec::with_capacity(k_top);
    let mut best: Option<GmmFit> = None;
    for k in 1..=k_top {
        let fit = fit_gmm(data, dim, k, seed)?;
        bics.push((k, fit.bic));
        if best.as_ref().is_none_or(|b| fit.bic < b.bic) {
            best = Some(fit);
        }
    }
    Ok(BicSelection {
        best: best.unwrap(),
        bics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominantMode {
    pub k: usize,
    /// Rows hard-assigned to the highest-weight component, in input order.
    pub indices: Vec<usize>,
    pub weight: f64,
    /// `false` when EM stopped at its iteration cap.
    pub converged: bool,
    pub bics: Vec<(usize, f64)>,
}

/// Selects a mixture by BIC and returns the rows belonging to its heaviest
/// component.
pub fn gmm_dominant_mode(data: &[f64], dim: usize, k_max: usize, seed: u64) -> Result<DominantMode> {
    let sel = select_by_bic(data, dim, k_max, seed)?;
    let fit = &sel.best;
    let n = data.len() / dim;
    let heavy = (0..fit.k)
        .max_by(|&a, &b| fit.weights[a].total_cmp(&fit.weights[b]))
        .unwrap();
    let indices = if fit.k == 1 {
        (0..n).collect()
    } else {
        let ws = Workspace {
            data,
            dim,
            n,
            floor: vec![0.0; dim],
        };
        let mut lj = vec![0.0; n * fit.k];
        ws.log_joint(&fit.weights, &fit.means, &fit.vars, &mut lj);
        (0..n)
            .filter(|&i| {
                let row = &lj[i * fit.k..(i + 1) * fit.k];
                (0..fit.k).all(|j| row[j] <= row[heavy])
            })
            .collect()
    };
    if !fit.converged {
        log::warn!("EM hit its iteration cap with {} components", fit.k);
    }
    Ok(DominantMode {
        k: fit.k,
        indices,
        weight: fit.weights[heavy],
        converged: fit.converged,
        bics: sel.bics,
    })
}

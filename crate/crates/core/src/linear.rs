//! Moments of products of independent mean-field Gaussian weight matrices.
//!
//! Layer lists are ordered bottom first: `[W1, W2, ..., WL]` describes the
//! product `WL ... W2 W1`.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{self, McMoments};

/// Standard deviation used for layers that should act deterministically.
pub const DETERMINISTIC_STD: f64 = 1e-12;

/// Elementwise independent Gaussian weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldLayer {
    pub mu: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

impl MeanFieldLayer {
    pub fn new(mu: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::shape(format!(
                "mean is {:?} but std is {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("weight std must be positive and finite"));
        }
        Ok(MeanFieldLayer { mu, sigma })
    }

    /// Layer with a fixed value, represented with [`DETERMINISTIC_STD`].
    pub fn deterministic(value: DMatrix<f64>) -> Self {
        let sigma = DMatrix::from_element(value.nrows(), value.ncols(), DETERMINISTIC_STD);
        MeanFieldLayer { mu: value, sigma }
    }

    pub fn uniform(rows: usize, cols: usize, mu: f64, sigma: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(rows, cols, mu),
            DMatrix::from_element(rows, cols, sigma),
        )
    }

    pub fn rows(&self) -> usize {
        self.mu.nrows()
    }

    pub fn cols(&self) -> usize {
        self.mu.ncols()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DMatrix<f64> {
        // column-major fill order, fixed so streams stay reproducible
        DMatrix::from_fn(self.rows(), self.cols(), |r, c| {
            self.mu[(r, c)] + self.sigma[(r, c)] * rng::std_normal(rng)
        })
    }
}

/// Covariance between all pairs of entries of a `rows x cols` random matrix,
/// `get(a, b, c, d) = Cov(m_ab, m_cd)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovTensor4 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CovTensor4 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        CovTensor4 {
            rows,
            cols,
            data: vec![0.0; n * n],
        }
    }

    /// Wraps a flattened `(rows*cols)^2` matrix whose row/column index is
    /// `a * cols + b`. The lower triangle is overwritten with the upper one.
    pub fn from_flat(rows: usize, cols: usize, mut data: Vec<f64>) -> Result<Self> {
        let n = rows * cols;
        if data.len() != n * n {
            return Err(Error::shape(format!(
                "flattened covariance has {} entries, expected {}",
                data.len(),
                n * n
            )));
        }
        for p in 0..n {
            for q in 0..p {
                data[p * n + q] = data[q * n + p];
            }
        }
        Ok(CovTensor4 { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Side length of the flattened matrix.
    pub fn flat_dim(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[(a * self.cols + b) * self.flat_dim() + c * self.cols + d]
    }

    /// Row-major flattened matrix.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.flat_dim();
        DMatrix::from_row_slice(n, n, &self.data)
    }

    /// Covariance of `vec(M)` under column-major stacking (index `b * rows + a`).
    pub fn to_vec_cov(&self) -> DMatrix<f64> {
        let n = self.flat_dim();
        let r = self.rows;
        DMatrix::from_fn(n, n, |p, q| self.get(p % r, p / r, q % r, q / r))
    }

    /// Largest absolute diagonal and off-diagonal entries of the flattened matrix.
    pub fn max_abs_diag_offdiag(&self) -> (f64, f64) {
        let n = self.flat_dim();
        let mut diag: f64 = 0.0;
        let mut off: f64 = 0.0;
        for p in 0..n {
            for q in 0..n {
                let v = self.data[p * n + q].abs();
                if p == q {
                    diag = diag.max(v);
                } else {
                    off = off.max(v);
                }
            }
        }
        (diag, off)
    }

    /// Smallest eigenvalue of the flattened matrix and its trace.
    pub fn min_eigenvalue_and_trace(&self) -> (f64, f64) {
        let m = self.to_matrix();
        let trace = m.trace();
        let eig = m.symmetric_eigenvalues();
        (eig.iter().copied().fold(f64::INFINITY, f64::min), trace)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductMoments {
    pub mean: DMatrix<f64>,
    pub cov: CovTensor4,
}

fn check_chain(layers: &[MeanFieldLayer]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("need at least one layer"));
    }
    for (l, w) in layers.windows(2).enumerate() {
        if w[1].cols() != w[0].rows() {
            return Err(Error::shape(format!(
                "layer {} has {} columns but layer {} has {} rows",
                l + 1,
                w[1].cols(),
                l,
                w[0].rows()
            )));
        }
    }
    Ok(())
}

pub fn product_mean(layers: &[MeanFieldLayer]) -> Result<DMatrix<f64>> {
    check_chain(layers)?;
    let mut m = layers[0].mu.clone();
    for layer in &layers[1..] {
        m = &layer.mu * m;
    }
    Ok(m)
}

/// Moments of a single mean-field layer.
pub fn single_layer_moments(layer: &MeanFieldLayer) -> ProductMoments {
    let (r, c) = (layer.rows(), layer.cols());
    let n = r * c;
    let mut data = vec![0.0; n * n];
    for a in 0..r {
        for b in 0..c {
            let p = a * c + b;
            data[p * n + p] = layer.sigma[(a, b)].powi(2);
        }
    }
    ProductMoments {
        mean: layer.mu.clone(),
        cov: CovTensor4 { rows: r, cols: c, data },
    }
}

/// Closed-form covariance of `w2 * w1`.
pub fn cov_two_layer(w1: &MeanFieldLayer, w2: &MeanFieldLayer) -> Result<CovTensor4> {
    check_chain(&[w1.clone(), w2.clone()])?;
    let (rows, inner, cols) = (w2.rows(), w1.rows(), w1.cols());
    let n = rows * cols;
    let mut data = vec![0.0; n * n];
    for a in 0..rows {
        for b in 0..cols {
            let p = a * cols + b;
            for c in 0..rows {
                for d in 0..cols {
                    let q = c * cols + d;
                    if q < p {
                        continue;
                    }
                    let mut acc = 0.0;
                    for i in 0..inner {
                        let v2 = w2.sigma[(a, i)].powi(2);
                        let v1 = w1.sigma[(i, b)].powi(2);
                        if a == c && b == d {
                            acc += v2 * v1;
                        }
                        if b == d {
                            acc += w2.mu[(a, i)] * (w2.mu[(c, i)] * v1);
                        }
                        if a == c {
                            acc += v2 * (w1.mu[(i, b)] * w1.mu[(i, d)]);
                        }
                    }
                    data[p * n + q] = acc;
                }
            }
        }
    }
    CovTensor4::from_flat(rows, cols, data)
}

/// Extends a product `M` by a new independent top layer `W`, returning the
/// moments of `W M`.
pub fn cov_recursive_step(prev: &ProductMoments, top: &MeanFieldLayer) -> Result<ProductMoments> {
    let (inner, cols) = prev.mean.shape();
    if top.cols() != inner {
        return Err(Error::shape(format!(
            "top layer has {} columns but the product has {} rows",
            top.cols(),
            inner
        )));
    }
    let rows = top.rows();
    let pc = &prev.cov;
    let m = &prev.mean;
    let var = top.sigma.map(|s| s * s);

    // t[((i * cols + b) * rows + c) * cols + d] = sum_j mu_cj cov(m_ib, m_jd)
    let mut t = vec![0.0; inner * cols * rows * cols];
    for i in 0..inner {
        for b in 0..cols {
            for c in 0..rows {
                for d in 0..cols {
                    let mut acc = 0.0;
                    for j in 0..inner {
                        acc += top.mu[(c, j)] * pc.get(i, b, j, d);
                    }
                    t[((i * cols + b) * rows + c) * cols + d] = acc;
                }
            }
        }
    }

    let n = rows * cols;
    let mut data = vec![0.0; n * n];
    for a in 0..rows {
        for b in 0..cols {
            let p = a * cols + b;
            for c in 0..rows {
                for d in 0..cols {
                    let q = c * cols + d;
                    if q < p {
                        continue;
                    }
                    let mut acc = 0.0;
                    for i in 0..inner {
                        let v = var[(a, i)];
                        if a == c {
                            acc += v * pc.get(i, b, i, d);
                        }
                        acc += top.mu[(a, i)] * t[((i * cols + b) * rows + c) * cols + d];
                        if a == c {
                            acc += v * (m[(i, b)] * m[(i, d)]);
                        }
                    }
                    data[p * n + q] = acc;
                }
            }
        }
    }
    Ok(ProductMoments {
        mean: &top.mu * m,
        cov: CovTensor4::from_flat(rows, cols, data)?,
    })
}

/// Mean and full covariance of the product of all `layers`.
pub fn cov_product(layers: &[MeanFieldLayer]) -> Result<ProductMoments> {
    check_chain(layers)?;
    let mut acc = single_layer_moments(&layers[0]);
    for layer in &layers[1..] {
        acc = cov_recursive_step(&acc, layer)?;
    }
    Ok(acc)
}

/// One draw of the product, written row-major into `out`.
fn draw_product(layers: &[MeanFieldLayer], rng: &mut impl Rng, out: &mut [f64]) {
    let mut m = layers[0].sample(rng);
    for layer in &layers[1..] {
        m = layer.sample(rng) * m;
    }
    let cols = m.ncols();
    for a in 0..m.nrows() {
        for b in 0..cols {
            out[a * cols + b] = m[(a, b)];
        }
    }
}

/// Independent draws of the product matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductSamples {
    pub rows: usize,
    pub cols: usize,
    /// Sample `s` occupies `data[s*rows*cols..(s+1)*rows*cols]`, row-major.
    pub data: Vec<f64>,
}

impl ProductSamples {
    pub fn len(&self) -> usize {
        self.data.len() / (self.rows * self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, s: usize) -> DMatrix<f64> {
        let k = self.rows * self.cols;
        DMatrix::from_row_slice(self.rows, self.cols, &self.data[s * k..(s + 1) * k])
    }
}

pub fn mc_product_samples(layers: &[MeanFieldLayer], n: usize, seed: u64) -> Result<ProductSamples> {
    check_chain(layers)?;
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let (rows, cols) = (layers.last().unwrap().rows(), layers[0].cols());
    let k = rows * cols;
    let mut data = vec![0.0; n * k];
    let chunks: Vec<(u64, &mut [f64])> = data
        .chunks_mut(rng::BLOCK * k)
        .enumerate()
        .map(|(b, c)| (b as u64, c))
        .collect();
    chunks.into_par_iter().for_each(|(b, chunk)| {
        let mut r = rng::keyed(seed, b);
        for out in chunk.chunks_exact_mut(k) {
            draw_product(layers, &mut r, out);
        }
    });
    Ok(ProductSamples { rows, cols, data })
}

/// Monte Carlo moments of the product with standard errors. Uses the same
/// streams as [`mc_product_samples`] without holding all draws in memory.
pub fn mc_product_moments(layers: &[MeanFieldLayer], n: usize, seed: u64) -> Result<McMoments> {
    check_chain(layers)?;
    if n < 2 * rng::BLOCK {
        return Err(Error::invalid("Monte Carlo moments need at least two blocks of draws"));
    }
    let k = layers.last().unwrap().rows() * layers[0].cols();
    Ok(stats::block_moments(k, n, seed, |r, out| draw_product(layers, r, out)))
}

/// Factors of `M = A B C` with deterministic `A`, `C` and `B` elementwise
/// `N(mu_B, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MvgFactors {
    pub a: DMatrix<f64>,
    pub mu_b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl MvgFactors {
    pub fn new(a: DMatrix<f64>, mu_b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if a.ncols() != mu_b.nrows() || mu_b.ncols() != c.nrows() {
            return Err(Error::shape(format!(
                "A {:?}, B {:?}, C {:?} are not conformable",
                a.shape(),
                mu_b.shape(),
                c.shape()
            )));
        }
        Ok(MvgFactors { a, mu_b, c })
    }

    /// Row covariance `A A^T`.
    pub fn u(&self) -> DMatrix<f64> {
        &self.a * self.a.transpose()
    }

    /// Column covariance `C^T C`.
    pub fn v(&self) -> DMatrix<f64> {
        self.c.transpose() * &self.c
    }

    /// The same product as a three-layer mean-field chain `[C, B, A]`.
    pub fn as_layers(&self) -> Vec<MeanFieldLayer> {
        let b = MeanFieldLayer {
            mu: self.mu_b.clone(),
            sigma: DMatrix::from_element(self.mu_b.nrows(), self.mu_b.ncols(), 1.0),
        };
        vec![
            MeanFieldLayer::deterministic(self.c.clone()),
            b,
            MeanFieldLayer::deterministic(self.a.clone()),
        ]
    }
}

/// Moments of `A B C`: `Cov(m_ab, m_cd) = U_ac V_bd`, i.e. `vec` covariance
/// `V ⊗ U`.
pub fn mvg_product(f: &MvgFactors) -> Result<ProductMoments> {
    let u = f.u();
    let v = f.v();
    let (rows, cols) = (f.a.nrows(), f.c.ncols());
    let n = rows * cols;
    let mut data = vec![0.0; n * n];
    for a in 0..rows {
        for b in 0..cols {
            for c in 0..rows {
                for d in 0..cols {
                    data[(a * cols + b) * n + c * cols + d] = u[(a, c)] * v[(b, d)];
                }
            }
        }
    }
    Ok(ProductMoments {
        mean: &f.a * &f.mu_b * &f.c,
        cov: CovTensor4::from_flat(rows, cols, data)?,
    })
}

/// Draws of entry `(0, 0)` of a product of `depth` square `width x width`
/// layers with i.i.d. `N(0, sigma^2)` entries.
pub fn prior_element_density(depth: usize, width: usize, sigma: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if depth == 0 || width == 0 {
        return Err(Error::invalid("depth and width must be at least 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let mut out = vec![0.0; n];
    let chunks: Vec<(u64, &mut [f64])> = out
        .chunks_mut(rng::BLOCK)
        .enumerate()
        .map(|(b, c)| (b as u64, c))
        .collect();
    chunks.into_par_iter().for_each(|(b, chunk)| {
        let mut r = rng::keyed(seed, b);
        let mut v = vec![0.0; width];
        let mut next = vec![0.0; width];
        for slot in chunk.iter_mut() {
            // e0^T W_L ... W_1 e0: carry column 0 of the partial product,
            // only drawing the entries that can reach it.
            if depth == 1 {
                *slot = sigma * rng::std_normal(&mut r);
                continue;
            }
            for x in v.iter_mut() {
                *x = sigma * rng::std_normal(&mut r);
            }
            for _ in 1..depth - 1 {
                for y in next.iter_mut() {
                    let mut acc = 0.0;
                    for &x in &v {
                        acc += sigma * rng::std_normal(&mut r) * x;
                    }
                    *y = acc;
                }
                std::mem::swap(&mut v, &mut next);
            }
            *slot = v.iter().map(|&x| sigma * rng::std_normal(&mut r) * x).sum();
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_layer(rows: usize, cols: usize, seed: u64) -> MeanFieldLayer {
        let mut r = rng::keyed(seed, 99);
        let mu = DMatrix::from_fn(rows, cols, |_, _| r.random_range(0.1..1.0));
        let sigma = DMatrix::from_fn(rows, cols, |_, _| r.random_range(0.1..0.6));
        MeanFieldLayer::new(mu, sigma).unwrap()
    }

    #[test]
    fn scalar_two_layer_variance() {
        let w1 = MeanFieldLayer::uniform(1, 1, 0.7, 0.2).unwrap();
        let w2 = MeanFieldLayer::uniform(1, 1, -1.3, 0.5).unwrap();
        let cov = cov_two_layer(&w1, &w2).unwrap();
        let expect = 0.25 * 0.04 + 1.69 * 0.04 + 0.49 * 0.25;
        assert!((cov.get(0, 0, 0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn single_layer_is_diagonal() {
        let l = random_layer(3, 2, 1);
        let pm = cov_product(std::slice::from_ref(&l)).unwrap();
        for a in 0..3 {
            for b in 0..2 {
                for c in 0..3 {
                    for d in 0..2 {
                        let v = pm.cov.get(a, b, c, d);
                        if (a, b) == (c, d) {
                            assert_eq!(v, l.sigma[(a, b)].powi(2));
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn two_layer_delta_structure_and_recursion_agree() {
        let w1 = random_layer(3, 2, 2);
        let w2 = random_layer(2, 3, 3);
        let closed = cov_two_layer(&w1, &w2).unwrap();
        let rec = cov_recursive_step(&single_layer_moments(&w1), &w2).unwrap();
        assert_eq!(closed, rec.cov);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for d in 0..2 {
                        if a != c && b != d {
                            assert_eq!(closed.get(a, b, c, d), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_top_layer_leaves_covariance() {
        let layers = vec![random_layer(3, 3, 4), random_layer(3, 3, 5)];
        let pm = cov_product(&layers).unwrap();
        let top = MeanFieldLayer::deterministic(DMatrix::identity(3, 3));
        let next = cov_recursive_step(&pm, &top).unwrap();
        for (x, y) in pm.cov.flat().iter().zip(next.cov.flat()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn three_layer_positivity() {
        let layers: Vec<_> = (0..3).map(|_| MeanFieldLayer::uniform(2, 2, 0.5, 0.3).unwrap()).collect();
        let pm = cov_product(&layers).unwrap();
        assert!(pm.cov.flat().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn shape_errors() {
        let a = random_layer(2, 3, 1);
        let b = random_layer(2, 3, 2);
        assert!(matches!(cov_product(&[a.clone(), b.clone()]), Err(Error::Shape(_))));
        assert!(cov_two_layer(&a, &b).is_err());
        assert!(product_mean(&[]).is_err());
        assert!(MeanFieldLayer::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn mvg_identity_and_scaling() {
        let f = MvgFactors::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(mvg_product(&f).unwrap().cov.to_vec_cov(), DMatrix::identity(4, 4));
        let f2 = MvgFactors::new(DMatrix::identity(2, 2) * 2.0, DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(mvg_product(&f2).unwrap().cov.to_vec_cov(), DMatrix::identity(4, 4) * 4.0);
    }

    #[test]
    fn mvg_is_kronecker_and_matches_chain() {
        let mut r = rng::keyed(7, 0);
        let a = DMatrix::from_fn(2, 3, |_, _| rng::std_normal(&mut r));
        let c = DMatrix::from_fn(3, 2, |_, _| rng::std_normal(&mut r));
        let mu_b = DMatrix::from_fn(3, 3, |_, _| rng::std_normal(&mut r));
        let f = MvgFactors::new(a, mu_b, c).unwrap();
        let pm = mvg_product(&f).unwrap();
        let kron = f.v().kronecker(&f.u());
        assert!((pm.cov.to_vec_cov() - &kron).abs().max() < 1e-12);
        let chain = cov_product(&f.as_layers()).unwrap();
        for (x, y) in pm.cov.flat().iter().zip(chain.cov.flat()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-9));
        }
    }

    #[test]
    fn deterministic_sampler_limit_and_reproducibility() {
        let layers: Vec<_> = (0..3)
            .map(|s| MeanFieldLayer::deterministic(random_layer(3, 3, s).mu))
            .collect();
        let mean = product_mean(&layers).unwrap();
        let s = mc_product_samples(&layers, 50, 1).unwrap();
        for i in 0..s.len() {
            assert!((s.get(i) - &mean).abs().max() < 1e-8);
        }
        let s1 = mc_product_samples(&random_chain(), 5000, 4).unwrap();
        let s2 = mc_product_samples(&random_chain(), 5000, 4).unwrap();
        assert_eq!(s1, s2);
    }

    fn random_chain() -> Vec<MeanFieldLayer> {
        vec![random_layer(2, 3, 10), random_layer(2, 2, 11)]
    }

    #[test]
    fn streamed_moments_match_stored_samples() {
        let layers = random_chain();
        let n = 3 * rng::BLOCK;
        let samples = mc_product_samples(&layers, n, 8).unwrap();
        let mm = mc_product_moments(&layers, n, 8).unwrap();
        let (m, _) = stats::covariance(&samples.data, 6);
        for (x, y) in m.iter().zip(&mm.mean) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_density_single_layer_and_scalar_product() {
        let xs = prior_element_density(1, 4, 0.23, 100_000, 1).unwrap();
        let ks = stats::ks_statistic(&xs, |x| stats::norm_cdf(x / 0.23));
        assert!(ks < 0.01, "{ks}");
        let ys = prior_element_density(2, 1, 1.0, 400_000, 2).unwrap();
        let k = stats::kurtosis(&ys);
        assert!((k - 9.0).abs() < 0.9, "{k}");
    }
}

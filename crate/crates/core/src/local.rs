//! Local product matrices of piecewise-linear networks.
//!
//! At an input `x` every hidden unit sits on one linear piece of its
//! activation, so the network acts on a neighbourhood of `x` as the single
//! matrix `P = W_L D_{L-1} W_{L-1} ... D_1 W_1`, with `D_l` the diagonal of
//! branch multipliers. Biases are folded in by appending a constant `1` to
//! the input and a bias column to `P`.

use nalgebra::DMatrix;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::compensated::Dd;
use crate::error::{Error, Result};
use crate::gmm;
use crate::linear::CovTensor4;
use crate::mfvi::MeanFieldPosterior;
use crate::model::{self, ActivationPattern, NetworkSpec};
use crate::rng;
use crate::stats;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalProductSample {
    /// `n_L x (n_0 + 1)` with folded biases, else `n_L x n_0`, rounded to f64.
    pub p: DMatrix<f64>,
    /// Low-order parts: `p + p_lo` is the double-double value of the product.
    pub p_lo: DMatrix<f64>,
    pub pattern: ActivationPattern,
    /// Index of the parameter draw this sample came from.
    pub theta_ref: u64,
    pub biases_folded: bool,
}

impl LocalProductSample {
    /// `P x~` evaluated in double-double and rounded once.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n_in = self.p.ncols() - usize::from(self.biases_folded);
        if x.len() != n_in {
            return Err(Error::shape(format!("input has {} entries, expected {n_in}", x.len())));
        }
        Ok((0..self.p.nrows())
            .map(|r| {
                let mut acc = Dd::ZERO;
                for (c, &xv) in x.iter().enumerate() {
                    acc = acc.fma_f64(
                        Dd {
                            hi: self.p[(r, c)],
                            lo: self.p_lo[(r, c)],
                        },
                        xv,
                    );
                }
                if self.biases_folded {
                    let c = n_in;
                    acc = acc + Dd {
                        hi: self.p[(r, c)],
                        lo: self.p_lo[(r, c)],
                    };
                }
                acc.to_f64()
            })
            .collect())
    }
}

/// Local product matrix at `x`, using the activation pattern that
/// [`model::forward`] reports there.
pub fn local_product_matrix(spec: &NetworkSpec, theta: &[f64], x: &[f64]) -> Result<LocalProductSample> {
    let (_, pattern) = model::forward(spec, theta, x)?;
    local_product_with_pattern(spec, theta, &pattern)
}

/// Local product matrix for an explicit activation pattern.
pub fn local_product_with_pattern(
    spec: &NetworkSpec,
    theta: &[f64],
    pattern: &ActivationPattern,
) -> Result<LocalProductSample> {
    let layout = spec.layout();
    if theta.len() != layout.len {
        return Err(Error::shape(format!(
            "parameter vector has {} entries, network needs {}",
            theta.len(),
            layout.len
        )));
    }
    if pattern.on.len() != spec.depth() - 1 {
        return Err(Error::shape("pattern does not match the number of hidden layers"));
    }
    let folded = spec.has_bias();
    let cols = spec.input_dim() + usize::from(folded);

    // rows of the running product, each a vector of double-doubles
    let first = &layout.layers[0];
    let mut p: Vec<Vec<Dd>> = (0..first.rows)
        .map(|r| {
            let mut row: Vec<Dd> = theta[first.weight_offset + r * first.cols..][..first.cols]
                .iter()
                .map(|&w| Dd::from_f64(w))
                .collect();
            if let Some(o) = first.bias_offset {
                row.push(Dd::from_f64(theta[o + r]));
            }
            row
        })
        .collect();

    for (l, b) in layout.layers.iter().enumerate().skip(1) {
        let mult = pattern.multipliers(l - 1);
        if mult.len() != p.len() {
            return Err(Error::shape("pattern width does not match the layer"));
        }
        for (row, &m) in p.iter_mut().zip(&mult) {
            if m != 1.0 {
                row.iter_mut().for_each(|v| *v = v.mul_f64(m));
            }
        }
        let next: Vec<Vec<Dd>> = (0..b.rows)
            .map(|r| {
                let w = &theta[b.weight_offset + r * b.cols..][..b.cols];
                let mut out = vec![Dd::ZERO; cols];
                if let Some(o) = b.bias_offset {
                    out[cols - 1] = Dd::from_f64(theta[o + r]);
                }
                for (c, slot) in out.iter_mut().enumerate() {
                    let mut acc = *slot;
                    for (k, &wk) in w.iter().enumerate() {
                        acc = acc.fma_f64(p[k][c], wk);
                    }
                    *slot = acc;
                }
                out
            })
            .collect();
        p = next;
    }

    let rows = p.len();
    let hi = DMatrix::from_fn(rows, cols, |r, c| p[r][c].hi);
    let lo = DMatrix::from_fn(rows, cols, |r, c| p[r][c].lo);
    Ok(LocalProductSample {
        p: hi,
        p_lo: lo,
        pattern: pattern.clone(),
        theta_ref: 0,
        biases_folded: folded,
    })
}

/// Local product matrices at `x` for `n` parameter draws from `q`. Draw `i`
/// uses stream `i` of `seed`.
pub fn sample_local_products(q: &MeanFieldPosterior, x: &[f64], n: usize, seed: u64) -> Result<Vec<LocalProductSample>> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    (0..n)
        .map(|i| {
            let theta = q.sample(&mut rng::keyed(seed, i as u64));
            let mut s = local_product_matrix(&q.spec, &theta, x)?;
            s.theta_ref = i as u64;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryModality {
    pub row: usize,
    pub col: usize,
    /// Number of mixture components selected by BIC.
    pub k: usize,
    pub multimodal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalCovReport {
    pub mean: DMatrix<f64>,
    pub cov: CovTensor4,
    pub n_samples: usize,
    pub anchor: Vec<f64>,
    /// Filled by [`flag_multimodal`]; empty until then.
    pub modality: Vec<EntryModality>,
}

fn flat_entries(samples: &[LocalProductSample]) -> (usize, usize, Vec<f64>) {
    let (rows, cols) = samples[0].p.shape();
    let mut data = Vec::with_capacity(samples.len() * rows * cols);
    for s in samples {
        for r in 0..rows {
            for c in 0..cols {
                data.push(s.p[(r, c)] + s.p_lo[(r, c)]);
            }
        }
    }
    (rows, cols, data)
}

/// Unbiased mean and covariance over the entries of the sampled matrices.
pub fn empirical_cov(samples: &[LocalProductSample], anchor: &[f64]) -> Result<LocalCovReport> {
    if samples.len() < 2 {
        return Err(Error::invalid("empirical covariance needs at least 2 samples"));
    }
    let shape = samples[0].p.shape();
    if samples.iter().any(|s| s.p.shape() != shape) {
        return Err(Error::shape("samples have different shapes"));
    }
    let (rows, cols, data) = flat_entries(samples);
    let (m, c) = stats::covariance(&data, rows * cols);
    Ok(LocalCovReport {
        mean: DMatrix::from_row_slice(rows, cols, &m),
        cov: CovTensor4::from_flat(rows, cols, c)?,
        n_samples: samples.len(),
        anchor: anchor.to_vec(),
        modality: Vec::new(),
    })
}

/// Runs BIC mixture selection (1 to 4 components) on the marginal of each
/// requested entry.
pub fn flag_multimodal(samples: &[LocalProductSample], entries: &[(usize, usize)], seed: u64) -> Result<Vec<EntryModality>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let (rows, cols) = samples[0].p.shape();
    entries
        .iter()
        .map(|&(r, c)| {
            if r >= rows || c >= cols {
                return Err(Error::shape(format!("entry ({r}, {c}) outside {rows}x{cols}")));
            }
            let xs: Vec<f64> = samples.iter().map(|s| s.p[(r, c)] + s.p_lo[(r, c)]).collect();
            let sel = gmm::select_by_bic(&xs, 1, 4, seed)?;
            Ok(EntryModality {
                row: r,
                col: c,
                k: sel.best.k,
                multimodal: sel.best.k >= 2,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    /// Mean over (draw, input) pairs of the fraction of hidden units on the
    /// identity branch.
    pub on_fraction: f64,
    pub on_fraction_sd: f64,
    pub layer_on_fraction: Vec<f64>,
    /// (draw, input) pairs for which some hidden layer was entirely off.
    pub all_off_events: usize,
    pub evaluations: usize,
}

/// Activation statistics over `n_theta` draws from `q` and every row of
/// `inputs`.
pub fn activation_stats(q: &MeanFieldPosterior, inputs: &DMatrix<f64>, n_theta: usize, seed: u64) -> Result<ActivationStats> {
    if inputs.nrows() == 0 {
        return Err(Error::invalid("no inputs"));
    }
    if n_theta == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    let spec = &q.spec;
    let act = spec.activation();
    let hidden = spec.hidden_widths().to_vec();
    let total_hidden: usize = hidden.iter().sum();
    let n = inputs.nrows();
    let mut fractions = Vec::with_capacity(n_theta * n);
    let mut layer_on = vec![0usize; hidden.len()];
    let mut all_off = 0;
    for t in 0..n_theta {
        let theta = q.sample(&mut rng::keyed(seed, t as u64));
        let layers = model::unflatten(spec, &theta)?;
        let mut h = inputs.transpose();
        let mut on_counts = vec![0usize; n];
        let mut any_layer_off = vec![false; n];
        for (l, layer) in layers.iter().enumerate().take(hidden.len()) {
            let mut z = &layer.weight * &h;
            if let Some(b) = &layer.bias {
                for mut col in z.column_iter_mut() {
                    col += b;
                }
            }
            for i in 0..n {
                let on = z.column(i).iter().filter(|&&v| act.is_on(v)).count();
                on_counts[i] += on;
                layer_on[l] += on;
                if on == 0 {
                    any_layer_off[i] = true;
                }
            }
            z.apply(|v| *v = act.apply(*v));
            h = z;
        }
        for i in 0..n {
            fractions.push(if total_hidden > 0 {
                on_counts[i] as f64 / total_hidden as f64
            } else {
                1.0
            });
        }
        all_off += any_layer_off.iter().filter(|&&b| b).count();
    }
    let evals = n_theta * n;
    let mean = stats::mean(&fractions);
    let sd = if fractions.len() > 1 { stats::variance(&fractions).sqrt() } else { 0.0 };
    Ok(ActivationStats {
        on_fraction: mean,
        on_fraction_sd: sd,
        layer_on_fraction: layer_on
            .iter()
            .zip(&hidden)
            .map(|(&c, &w)| c as f64 / (w * evals) as f64)
            .collect(),
        all_off_events: all_off,
        evaluations: evals,
    })
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Upper bound on the number of linear regions of a ReLU network:
/// `prod_{i < last hidden} floor(n_i / n_0)^{n_0} * sum_{j=0}^{n_0} C(n_last, j)`.
///
/// Floors below one are raised to one so narrow layers cannot zero the bound.
pub fn region_count_bound(spec: &NetworkSpec) -> BigUint {
    let n0 = spec.input_dim();
    let hidden = spec.hidden_widths();
    let Some((&last, rest)) = hidden.split_last() else {
        return BigUint::from(1u32);
    };
    let mut bound = BigUint::from(1u32);
    for &ni in rest {
        bound *= BigUint::from((ni / n0).max(1)).pow(n0 as u32);
    }
    let tail: BigUint = (0..=n0).map(|j| binomial(last, j)).sum();
    bound * tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;

    fn ulps(a: f64, b: f64) -> u64 {
        if a == b {
            return 0;
        }
        let ia = a.to_bits() as i64;
        let ib = b.to_bits() as i64;
        if (ia < 0) != (ib < 0) {
            return u64::MAX;
        }
        ia.abs_diff(ib)
    }

    #[test]
    fn linear_activation_is_plain_product() {
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Linear, false).unwrap();
        let theta: Vec<f64> = (0..spec.n_params()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let layers = model::unflatten(&spec, &theta).unwrap();
        let plain = &layers[1].weight * &layers[0].weight;
        for x in [[1.0, -2.0], [-5.0, 0.5]] {
            let s = local_product_matrix(&spec, &theta, &x).unwrap();
            assert!((&s.p - &plain).abs().max() < 1e-15);
        }
    }

    #[test]
    fn all_on_relu_is_plain_product() {
        let spec = NetworkSpec::new(vec![2, 2, 1], Activation::Relu, false).unwrap();
        let theta = [1.0, 0.5, 0.2, 1.0, 2.0, -1.0];
        let s = local_product_matrix(&spec, &theta, &[1.0, 1.0]).unwrap();
        assert!(s.pattern.on[0].iter().all(|&b| b));
        assert_eq!(s.p, DMatrix::from_row_slice(1, 2, &[2.0 - 0.2, 1.0 - 1.0]));
    }

    #[test]
    fn folded_product_reproduces_forward() {
        let spec = NetworkSpec::new(vec![3, 6, 5, 2], Activation::LeakyRelu { alpha: 0.1 }, true).unwrap();
        for seed in 0..50u64 {
            let mut r = rng::keyed(seed, 0);
            let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng::std_normal(&mut r)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng::std_normal(&mut r)).collect();
            let s = local_product_matrix(&spec, &theta, &x).unwrap();
            let (y, _) = model::forward(&spec, &theta, &x).unwrap();
            let py = s.apply(&x).unwrap();
            for (a, b) in y.iter().zip(&py) {
                assert!(ulps(*a, *b) <= 4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identical_samples_have_zero_covariance() {
        let spec = NetworkSpec::new(vec![2, 3, 2], Activation::Relu, true).unwrap();
        let theta = vec![0.3; spec.n_params()];
        let s = local_product_matrix(&spec, &theta, &[0.1, 0.2]).unwrap();
        let rep = empirical_cov(&[s.clone(), s.clone(), s], &[0.1, 0.2]).unwrap();
        assert!(rep.cov.flat().iter().all(|&v| v == 0.0));
        assert!(empirical_cov(&rep_one(&spec), &[0.0, 0.0]).is_err());
    }

    fn rep_one(spec: &NetworkSpec) -> Vec<LocalProductSample> {
        vec![local_product_matrix(spec, &vec![0.1; spec.n_params()], &[0.0, 0.0]).unwrap()]
    }

    #[test]
    fn activation_stats_forced_cases() {
        let lin = NetworkSpec::new(vec![2, 4, 1], Activation::Linear, true).unwrap();
        let q = MeanFieldPosterior::init(&lin, 0);
        let x = DMatrix::from_element(5, 2, 1.0);
        let st = activation_stats(&q, &x, 3, 0).unwrap();
        assert_eq!((st.on_fraction, st.all_off_events), (1.0, 0));

        let relu = NetworkSpec::new(vec![2, 4, 1], Activation::Relu, false).unwrap();
        let n = relu.n_params();
        let q = MeanFieldPosterior::from_mean_std(relu, vec![-1.0; n], &vec![1e-6; n]).unwrap();
        let st = activation_stats(&q, &x, 3, 0).unwrap();
        assert_eq!(st.layer_on_fraction, vec![0.0]);
        assert_eq!(st.all_off_events, 15);
    }

    #[test]
    fn region_bounds() {
        let s = |w: Vec<usize>| NetworkSpec::new(w, Activation::Relu, true).unwrap();
        assert_eq!(region_count_bound(&s(vec![2, 3, 1])), BigUint::from(7u32));
        assert_eq!(region_count_bound(&s(vec![1, 1, 1, 1])), BigUint::from(2u32));
        // floor(4/2)^2 * (1 + 3 + 3)
        assert_eq!(region_count_bound(&s(vec![2, 4, 3, 1])), BigUint::from(28u32));
        assert_eq!(region_count_bound(&s(vec![3, 1])), BigUint::from(1u32));
        assert!(region_count_bound(&s(vec![5, 2, 2, 1])) >= BigUint::from(1u32));
    }
}

//! Unnormalized log posterior of a network under an isotropic Gaussian prior.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hmc::{self, HmcConfig, LogDensity, PosteriorSamples};
use crate::likelihood::Likelihood;
use crate::model::{self, NetworkSpec};

pub struct BnnPosterior<'a> {
    pub spec: &'a NetworkSpec,
    pub data: &'a Dataset,
    pub likelihood: Likelihood,
    pub prior_precision: f64,
}

impl LogDensity for BnnPosterior<'_> {
    fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        bnn_log_posterior(self.spec, self.data, &self.likelihood, self.prior_precision, theta)
    }
}

/// `log p(D | theta) + log p(theta)` dropping constants, with
/// `p(theta) = N(0, I / prior_precision)`. An empty dataset leaves the prior.
pub fn bnn_log_posterior(
    spec: &NetworkSpec,
    data: &Dataset,
    likelihood: &Likelihood,
    prior_precision: f64,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != spec.n_params() {
        return Err(Error::shape(format!("theta has {} values, network has {}", theta.len(), spec.n_params())));
    }
    let (mut value, mut grad) = if data.is_empty() {
        (0.0, vec![0.0; theta.len()])
    } else {
        let mut failure = None;
        let (nll, g) = model::grad_logdensity(spec, theta, &data.inputs, |out| match likelihood.nll(out, &data.targets) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                (f64::NAN, DMatrix::zeros(out.nrows(), out.ncols()))
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        (-nll, g.into_iter().map(|v| -v).collect())
    };
    for (gi, t) in grad.iter_mut().zip(theta) {
        value -= 0.5 * prior_precision * t * t;
        *gi -= prior_precision * t;
    }
    if !value.is_finite() {
        return Err(Error::non_finite("log posterior", None));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite("log posterior gradient", Some(i)));
    }
    Ok((value, grad))
}

/// HMC on the network posterior, using `config.prior_precision`.
pub fn sample_posterior(
    spec: &NetworkSpec,
    data: &Dataset,
    likelihood: Likelihood,
    config: &HmcConfig,
) -> Result<PosteriorSamples> {
    let target = BnnPosterior {
        spec,
        data,
        likelihood,
        prior_precision: config.prior_precision,
    };
    let mut s = hmc::hmc_sample(&target, config)?;
    s.layout = Some(spec.layout());
    Ok(s)
}

/// Ensemble prediction: class probabilities (or regression outputs) averaged
/// over the given parameter rows.
pub fn ensemble_predict(spec: &NetworkSpec, thetas: &[&[f64]], inputs: &DMatrix<f64>, likelihood: &Likelihood) -> Result<DMatrix<f64>> {
    if thetas.is_empty() {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    let mut acc = DMatrix::zeros(inputs.nrows(), spec.output_dim());
    for theta in thetas {
        let out = model::forward_batch(spec, theta, inputs)?;
        acc += match likelihood {
            Likelihood::Categorical => crate::likelihood::softmax_rows(&out),
            Likelihood::Gaussian { .. } => out,
        };
    }
    Ok(acc / thetas.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;
    use crate::model::Activation;

    fn one_point() -> Dataset {
        Dataset::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            Targets::Classes {
                labels: vec![1],
                n_classes: 2,
            },
            "one",
            0,
        )
        .unwrap()
    }

    #[test]
    fn prior_only_at_zero() {
        let spec = NetworkSpec::new(vec![1, 3, 2], Activation::Relu, true).unwrap();
        let empty = one_point().subset(&[]);
        let (v, g) = bnn_log_posterior(&spec, &empty, &Likelihood::Categorical, 1.0, &vec![0.0; spec.n_params()]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_computed_single_point() {
        // 1-2 linear net without biases: logits (w0 x, w1 x)
        let spec = NetworkSpec::new(vec![1, 2], Activation::Linear, false).unwrap();
        let theta = [0.5, -0.25];
        let (v, g) = bnn_log_posterior(&spec, &one_point(), &Likelihood::Categorical, 2.0, &theta).unwrap();
        let (l0, l1) = (1.0f64, -0.5f64);
        let lse = (l0.exp() + l1.exp()).ln();
        let want = (l1 - lse) - 0.5 * 2.0 * (0.25 + 0.0625);
        assert!((v - want).abs() < 1e-14);
        let p0 = (l0 - lse).exp();
        let p1 = (l1 - lse).exp();
        assert!((g[0] - (-p0 * 2.0 - 2.0 * 0.5)).abs() < 1e-14);
        assert!((g[1] - ((1.0 - p1) * 2.0 + 2.0 * 0.25)).abs() < 1e-14);
    }
}

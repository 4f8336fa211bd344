//! Mean-field Gaussian variational inference with the reparameterization
//! gradient and an Adam / AMSGrad optimizer.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::linear::MeanFieldLayer;
use crate::model::{self, Activation, NetworkSpec};
use crate::rng;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inv_softplus(s: f64) -> f64 {
    s + (-(-s).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Initial `rho`, giving std `log(1 + e^-3)`.
pub const RHO_INIT: f64 = -3.0;

/// Fully factorized Gaussian over the flat parameter vector, std =
/// softplus(rho).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldPosterior {
    pub spec: NetworkSpec,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl MeanFieldPosterior {
    pub fn new(spec: NetworkSpec, mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let n = spec.n_params();
        if mu.len() != n || rho.len() != n {
            return Err(Error::shape(format!(
                "posterior needs {n} means and rhos, got {} and {}",
                mu.len(),
                rho.len()
            )));
        }
        Ok(MeanFieldPosterior { spec, mu, rho })
    }

    /// Builds a posterior from means and standard deviations.
    pub fn from_mean_std(spec: NetworkSpec, mu: Vec<f64>, std: &[f64]) -> Result<Self> {
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("posterior std must be positive"));
        }
        let rho = std.iter().map(|&s| inv_softplus(s)).collect();
        Self::new(spec, mu, rho)
    }

    /// Means drawn with variance `gain / fan_in` (gain 2 for ReLU, adjusted
    /// for the leak, 1 for linear), biases zero, all `rho` at [`RHO_INIT`].
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let gain = match spec.activation() {
            Activation::Linear => 1.0,
            Activation::Relu => 2.0,
            Activation::LeakyRelu { alpha } => 2.0 / (1.0 + alpha * alpha),
        };
        let layout = spec.layout();
        let mut mu = vec![0.0; layout.len];
        let mut r = rng::keyed(seed, 0);
        for b in &layout.layers {
            let s = (gain / b.cols as f64).sqrt();
            for v in &mut mu[b.weight_offset..b.weight_offset + b.rows * b.cols] {
                *v = s * rng::std_normal(&mut r);
            }
        }
        MeanFieldPosterior {
            spec: spec.clone(),
            rho: vec![RHO_INIT; layout.len],
            mu,
        }
    }

    pub fn n_params(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| m + softplus(r) * rng::std_normal(rng))
            .collect()
    }

    /// Weight block of layer `l` as a mean-field layer (biases excluded).
    pub fn weight_layer(&self, l: usize) -> MeanFieldLayer {
        let b = self.spec.layout().layers[l];
        let k = b.rows * b.cols;
        let mu = DMatrix::from_row_slice(b.rows, b.cols, &self.mu[b.weight_offset..b.weight_offset + k]);
        let sd: Vec<f64> = self.rho[b.weight_offset..b.weight_offset + k]
            .iter()
            .map(|&r| softplus(r))
            .collect();
        MeanFieldLayer {
            mu,
            sigma: DMatrix::from_row_slice(b.rows, b.cols, &sd),
        }
    }

    pub fn weight_layers(&self) -> Vec<MeanFieldLayer> {
        (0..self.spec.depth()).map(|l| self.weight_layer(l)).collect()
    }
}

/// Zero-mean Gaussian prior with one standard deviation per layer, shared by
/// that layer's weights and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub stds: Vec<f64>,
}

impl PriorSpec {
    pub fn isotropic(std: f64, depth: usize) -> Self {
        PriorSpec { stds: vec![std; depth] }
    }

    fn per_param(&self, spec: &NetworkSpec) -> Result<Vec<f64>> {
        if self.stds.len() != spec.depth() {
            return Err(Error::shape(format!(
                "prior has {} layer stds for a depth-{} network",
                self.stds.len(),
                spec.depth()
            )));
        }
        if self.stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("prior std must be positive"));
        }
        let layout = spec.layout();
        let mut out = vec![0.0; layout.len];
        for (b, &s) in layout.layers.iter().zip(&self.stds) {
            out[b.weight_offset..b.weight_offset + b.rows * b.cols].fill(s);
            if let Some(o) = b.bias_offset {
                out[o..o + b.rows].fill(s);
            }
        }
        Ok(out)
    }
}

/// `KL(N(mq, sq^2) || N(mp, sp^2))`.
pub fn gaussian_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_train_samples: usize,
    pub n_test_samples: usize,
    /// Multiplier on the KL term.
    pub temperature: f64,
    pub seed: u64,
    pub likelihood: Likelihood,
    pub amsgrad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            n_train_samples: 16,
            n_test_samples: 16,
            temperature: 1.0,
            seed: 0,
            likelihood: Likelihood::Categorical,
            amsgrad: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.n_train_samples == 0 || self.n_test_samples == 0 {
            return Err(Error::invalid("batch size, epochs and sample counts must be positive"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::invalid("temperature must be non-negative"));
        }
        self.likelihood.validate()
    }
}

/// One evaluation of the negative ELBO on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Elbo {
    /// `kl_scale * kl + nll`.
    pub value: f64,
    /// Unscaled KL to the prior.
    pub kl: f64,
    /// Mean over samples of the summed batch negative log-likelihood.
    pub nll: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

/// Negative ELBO on `batch` and its gradient with respect to `(mu, rho)`.
///
/// The KL term is multiplied by `temperature * batch_len / dataset_size`.
/// The likelihood term averages `n_samples` reparameterized draws whose
/// noise comes from streams keyed by `seed`, so equal seeds give common
/// random numbers.
#[allow(clippy::too_many_arguments)]
pub fn elbo(
    q: &MeanFieldPosterior,
    prior: &PriorSpec,
    batch: &Dataset,
    likelihood: &Likelihood,
    n_samples: usize,
    dataset_size: usize,
    temperature: f64,
    seed: u64,
) -> Result<Elbo> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if dataset_size == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let n = q.n_params();
    let prior_sd = prior.per_param(&q.spec)?;
    let sd = q.std();
    let kl_scale = temperature * batch.len() as f64 / dataset_size as f64;

    let mut kl = 0.0;
    let mut grad_mu = vec![0.0; n];
    let mut grad_rho = vec![0.0; n];
    for i in 0..n {
        let (m, s, sp) = (q.mu[i], sd[i], prior_sd[i]);
        kl += gaussian_kl(m, s, 0.0, sp);
        grad_mu[i] = kl_scale * m / (sp * sp);
        grad_rho[i] = kl_scale * (-1.0 / s + s / (sp * sp)) * sigmoid(q.rho[i]);
    }

    let mut nll = 0.0;
    if !batch.is_empty() {
        let inv = 1.0 / n_samples as f64;
        let mut eps = vec![0.0; n];
        let mut theta = vec![0.0; n];
        for s in 0..n_samples {
            rng::fill_std_normal(&mut rng::keyed(seed, s as u64), &mut eps);
            for i in 0..n {
                theta[i] = q.mu[i] + sd[i] * eps[i];
            }
            let (v, g) = model::grad_logdensity(&q.spec, &theta, &batch.inputs, |out| {
                likelihood
                    .nll(out, &batch.targets)
                    .unwrap_or_else(|_| (f64::NAN, DMatrix::from_element(out.nrows(), out.ncols(), f64::NAN)))
            })?;
            nll += inv * v;
            for i in 0..n {
                grad_mu[i] += inv * g[i];
                grad_rho[i] += inv * g[i] * eps[i] * sigmoid(q.rho[i]);
            }
        }
    }
    let value = kl_scale * kl + nll;
    if !value.is_finite() {
        return Err(Error::non_finite("negative ELBO", None));
    }
    Ok(Elbo {
        value,
        kl,
        nll,
        grad_mu,
        grad_rho,
    })
}

/// Per-epoch averages over batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub neg_elbo: f64,
    pub kl_term: f64,
    pub nll_term: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub posterior: MeanFieldPosterior,
    pub history: Vec<EpochRecord>,
}

struct Adam {
    lr: f64,
    amsgrad: bool,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64, amsgrad: bool) -> Self {
        Adam {
            lr,
            amsgrad,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            v_max: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let v = if self.amsgrad {
                self.v_max[i] = self.v_max[i].max(self.v[i]);
                self.v_max[i]
            } else {
                self.v[i]
            };
            params[i] -= self.lr * (self.m[i] / c1) / ((v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains from [`MeanFieldPosterior::init`] seeded with `config.seed`.
pub fn train(spec: &NetworkSpec, dataset: &Dataset, prior: &PriorSpec, config: &TrainConfig) -> Result<TrainResult> {
    let init = MeanFieldPosterior::init(spec, rng::derive_seed(config.seed, 1));
    train_from(init, dataset, prior, config)
}

/// Minimizes the negative ELBO starting at `q`. Reproducible given
/// `config.seed`.
pub fn train_from(
    mut q: MeanFieldPosterior,
    dataset: &Dataset,
    prior: &PriorSpec,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = q.n_params();
    let mut params: Vec<f64> = q.mu.iter().chain(&q.rho).copied().collect();
    let mut opt = Adam::new(2 * n, config.learning_rate, config.amsgrad);
    let mut history = Vec::with_capacity(config.epochs);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let shuffle_seed = rng::derive_seed(config.seed, 2);
    let noise_seed = rng::derive_seed(config.seed, 3);
    let mut step = 0u64;
    let mut grad = vec![0.0; 2 * n];
    for epoch in 0..config.epochs {
        idx.shuffle(&mut rng::keyed(shuffle_seed, epoch as u64));
        let (mut sum_v, mut sum_kl, mut sum_nll, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for chunk in idx.chunks(config.batch_size) {
            let batch = dataset.subset(chunk);
            let e = elbo(
                &q,
                prior,
                &batch,
                &config.likelihood,
                config.n_train_samples,
                dataset.len(),
                config.temperature,
                rng::derive_seed(noise_seed, step),
            )
            .map_err(|err| match err {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    reason: err.to_string(),
                },
                other => other,
            })?;
            step += 1;
            sum_v += e.value;
            sum_kl += e.kl * config.temperature * batch.len() as f64 / dataset.len() as f64;
            sum_nll += e.nll;
            nb += 1.0;
            grad[..n].copy_from_slice(&e.grad_mu);
            grad[n..].copy_from_slice(&e.grad_rho);
            opt.step(&mut params, &grad);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    reason: "parameters became non-finite".into(),
                });
            }
            q.mu.copy_from_slice(&params[..n]);
            q.rho.copy_from_slice(&params[n..]);
        }
        let rec = EpochRecord {
            epoch,
            neg_elbo: sum_v / nb,
            kl_term: sum_kl / nb,
            nll_term: sum_nll / nb,
        };
        log::debug!("epoch {epoch}: neg elbo {:.6}", rec.neg_elbo);
        history.push(rec);
    }
    Ok(TrainResult { posterior: q, history })
}

/// Network outputs (`n x n_out`) for `n_samples` independent parameter
/// draws. Draw `s` uses stream `s` of `seed`.
pub fn predict(q: &MeanFieldPosterior, inputs: &DMatrix<f64>, n_samples: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    (0..n_samples)
        .map(|s| {
            let theta = q.sample(&mut rng::keyed(seed, s as u64));
            model::forward_batch(&q.spec, &theta, inputs)
        })
        .collect()
}

/// Predictive class probabilities averaged over draws.
pub fn predict_proba(q: &MeanFieldPosterior, inputs: &DMatrix<f64>, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let outs = predict(q, inputs, n_samples, seed)?;
    let mut acc = DMatrix::zeros(inputs.nrows(), q.spec.output_dim());
    for o in &outs {
        acc += crate::likelihood::softmax_rows(o);
    }
    Ok(acc / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, Targets};

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(vec![2, 4, 2], Activation::LeakyRelu { alpha: 0.1 }, true).unwrap()
    }

    #[test]
    fn softplus_roundtrip_and_init_std() {
        for &s in &[1e-12, 1e-3, 0.0486, 1.0, 30.0] {
            assert!((softplus(inv_softplus(s)) - s).abs() <= 1e-12 * s.max(1.0));
        }
        let q = MeanFieldPosterior::init(&small_spec(), 0);
        let expected = (1.0 + (-3.0f64).exp()).ln();
        assert!(q.std().iter().all(|&s| (s - expected).abs() < 1e-15));
        assert!((expected - 0.0486).abs() < 1e-4);
        assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
    }

    #[test]
    fn kl_closed_form() {
        assert!((gaussian_kl(1.0, 1.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(gaussian_kl(0.3, 0.2, 0.3, 0.2), 0.0);
    }

    #[test]
    fn kl_zero_at_prior_and_empty_batch() {
        let spec = small_spec();
        let n = spec.n_params();
        let q = MeanFieldPosterior::from_mean_std(spec.clone(), vec![0.0; n], &vec![0.23; n]).unwrap();
        let prior = PriorSpec::isotropic(0.23, 2);
        let empty = Dataset::new(DMatrix::zeros(0, 2), Targets::Classes { labels: vec![], n_classes: 2 }, "e", 0).unwrap();
        let e = elbo(&q, &prior, &empty, &Likelihood::Categorical, 1, 10, 1.0, 0).unwrap();
        assert!(e.kl.abs() < 1e-12);
        assert!(e.grad_mu.iter().chain(&e.grad_rho).all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn zero_temperature_is_pure_nll() {
        let spec = small_spec();
        let q = MeanFieldPosterior::init(&spec, 1);
        let ds = data::two_moons(20, 0.1, 0).unwrap();
        let e = elbo(&q, &PriorSpec::isotropic(0.23, 2), &ds, &Likelihood::Categorical, 3, 20, 0.0, 5).unwrap();
        assert_eq!(e.value, e.nll);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let spec = small_spec();
        let mut q = MeanFieldPosterior::init(&spec, 2);
        q.rho.iter_mut().enumerate().for_each(|(i, r)| *r = -2.0 + 0.05 * i as f64);
        let ds = data::two_moons(16, 0.1, 3).unwrap();
        let prior = PriorSpec::isotropic(0.5, 2);
        let lik = Likelihood::Categorical;
        let f = |q: &MeanFieldPosterior| elbo(q, &prior, &ds, &lik, 8, 100, 1.0, 9).unwrap();
        let base = f(&q);
        let h = 1e-5;
        for i in 0..q.n_params() {
            for which in 0..2 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                let (p, m, g) = if which == 0 {
                    qp.mu[i] += h;
                    qm.mu[i] -= h;
                    (&qp, &qm, base.grad_mu[i])
                } else {
                    qp.rho[i] += h;
                    qm.rho[i] -= h;
                    (&qp, &qm, base.grad_rho[i])
                };
                let fd = (f(p).value - f(m).value) / (2.0 * h);
                assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-2), "param {i}/{which}: fd {fd} vs {g}");
            }
        }
    }

    #[test]
    fn predict_deterministic_limit_and_seed() {
        let spec = small_spec();
        let init = MeanFieldPosterior::init(&spec, 3);
        let q = MeanFieldPosterior::from_mean_std(spec.clone(), init.mu.clone(), &vec![1e-12; spec.n_params()]).unwrap();
        let x = data::two_moons(10, 0.0, 0).unwrap().inputs;
        let det = model::forward_batch(&spec, &q.mu, &x).unwrap();
        for o in predict(&q, &x, 5, 1).unwrap() {
            assert!((o - &det).abs().max() < 1e-9);
        }
        assert_eq!(predict(&init, &x, 3, 7).unwrap(), predict(&init, &x, 3, 7).unwrap());
    }

    #[test]
    fn training_is_reproducible_and_decreases_loss() {
        let spec = small_spec();
        let ds = data::two_moons(128, 0.1, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            n_train_samples: 2,
            ..TrainConfig::default()
        };
        let prior = PriorSpec::isotropic(1.0, 2);
        let a = train(&spec, &ds, &prior, &cfg).unwrap();
        let b = train(&spec, &ds, &prior, &cfg).unwrap();
        assert_eq!(a.posterior, b.posterior);
        assert!(a.history.last().unwrap().neg_elbo < a.history[0].neg_elbo);
    }

    #[test]
    fn divergence_reports_epoch() {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Linear, true).unwrap();
        let ds = Dataset::new(DMatrix::from_element(4, 1, 1e200), Targets::Real(vec![0.0; 4]), "x", 0).unwrap();
        let cfg = TrainConfig {
            likelihood: Likelihood::Gaussian { noise_std: 1e-200 },
            ..TrainConfig::default()
        };
        let err = train(&spec, &ds, &PriorSpec::isotropic(1.0, 1), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }), "{err}");
    }
}

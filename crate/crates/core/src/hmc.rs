//! Hamiltonian Monte Carlo with dual-averaging step size adaptation and an
//! optional diagonal mass matrix estimated during burn-in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamLayout;
use crate::rng;

/// A differentiable log density.
pub trait LogDensity {
    fn dim(&self) -> usize;
    /// `log p(x)` up to a constant, and its gradient.
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    pub step_size: f64,
    /// Leapfrog steps per transition; every transition after burn-in is kept.
    pub n_leapfrog: usize,
    /// Transitions spent adapting the step size.
    pub burn_in: usize,
    pub target_accept: f64,
    pub n_kept: usize,
    pub seed: u64,
    pub prior_precision: f64,
    /// Each transition scales the step size by a uniform factor in
    /// `[1 - step_jitter, 1 + step_jitter]`.
    pub step_jitter: f64,
    /// Estimate a diagonal mass matrix from burn-in draws. Off means a unit
    /// mass matrix.
    pub adapt_mass: bool,
    pub init: Option<Vec<f64>>,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.01,
            n_leapfrog: 100,
            burn_in: 1000,
            target_accept: 0.8,
            n_kept: 1000,
            seed: 0,
            prior_precision: 1.0,
            step_jitter: 0.1,
            adapt_mass: true,
            init: None,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step size must be positive"));
        }
        if self.n_leapfrog == 0 || self.burn_in == 0 || self.n_kept == 0 {
            return Err(Error::invalid("leapfrog steps, burn-in and kept samples must be at least 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::invalid("target acceptance must lie in (0, 1)"));
        }
        if !(self.prior_precision > 0.0) {
            return Err(Error::invalid("prior precision must be positive"));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::invalid("step jitter must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub dim: usize,
    /// Row-major `n_kept x dim`.
    pub samples: Vec<f64>,
    pub log_post: Vec<f64>,
    /// Fraction of kept transitions that were accepted.
    pub acceptance_rate: f64,
    /// Step size frozen at the end of burn-in.
    pub step_size: f64,
    /// Diagonal of the inverse mass matrix used after burn-in.
    pub inv_mass: Vec<f64>,
    pub layout: Option<ParamLayout>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.log_post.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_post.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }
}

struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }
}

/// Burn-in transitions after which the mass matrix is re-estimated: a fast
/// step-size-only phase (15%), three doubling windows, and a final 10% with
/// the mass fixed. Short burn-ins use one window.
fn mass_window_ends(burn_in: usize) -> Vec<usize> {
    if burn_in < 20 {
        return Vec::new();
    }
    let start = burn_in * 15 / 100;
    let end = burn_in - burn_in / 10;
    let mid = end - start;
    if mid < 150 {
        return vec![end];
    }
    let w = mid / 7;
    vec![start + w, start + 3 * w, end]
}

#[derive(Default)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.n == 0 {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        let k = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / k;
            *s += d * (v - *m);
        }
    }

    /// Variance shrunk toward `1e-3`, as a regularized inverse mass.
    fn inv_mass(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| (n / (n + 5.0)) * s / (n - 1.0) + 1e-3 * 5.0 / (n + 5.0))
            .collect()
    }
}

fn eval<T: LogDensity + ?Sized>(target: &T, x: &[f64]) -> Option<(f64, Vec<f64>)> {
    match target.value_and_grad(x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => Some((v, g)),
        _ => None,
    }
}

/// Transitions in a row with non-finite energy before sampling gives up.
const MAX_NON_FINITE_RUN: usize = 50;

/// Runs `burn_in` adapting transitions then keeps `n_kept` transitions.
pub fn hmc_sample<T: LogDensity + ?Sized>(target: &T, config: &HmcConfig) -> Result<PosteriorSamples> {
    config.validate()?;
    let d = target.dim();
    let mut x = match &config.init {
        Some(v) if v.len() != d => return Err(Error::shape(format!("init has {} values, target has {d}", v.len()))),
        Some(v) => v.clone(),
        None => vec![0.0; d],
    };
    let (mut lp, mut grad) =
        eval(target, &x).ok_or_else(|| Error::Sampling("log density is not finite at the initial point".into()))?;

    let mut rng = rng::keyed(config.seed, 0);
    let mut da = DualAveraging::new(config.step_size, config.target_accept);
    let mut eps = config.step_size;
    let mut samples = Vec::with_capacity(config.n_kept * d);
    let mut log_post = Vec::with_capacity(config.n_kept);
    let mut accepted = 0usize;
    let mut bad_run = 0usize;
    let mut p = vec![0.0; d];
    let mut inv_mass = vec![1.0; d];
    let mut sqrt_mass = vec![1.0; d];
    let windows = if config.adapt_mass { mass_window_ends(config.burn_in) } else { Vec::new() };
    let window_start = config.burn_in * 15 / 100;
    let mut window = Welford::default();
    let total = config.burn_in + config.n_kept;

    for it in 0..total {
        let step = eps * (1.0 + config.step_jitter * (2.0 * rng.random::<f64>() - 1.0));
        rng::fill_std_normal(&mut rng, &mut p);
        for (pi, s) in p.iter_mut().zip(&sqrt_mass) {
            *pi *= s;
        }
        let kinetic = |p: &[f64]| 0.5 * p.iter().zip(&inv_mass).map(|(v, m)| v * v * m).sum::<f64>();
        let h0 = -lp + kinetic(&p);

        let mut xn = x.clone();
        let mut gn = grad.clone();
        let mut lpn = lp;
        let mut finite = true;
        for (pi, gi) in p.iter_mut().zip(&gn) {
            *pi += 0.5 * step * gi;
        }
        for s in 0..config.n_leapfrog {
            for ((xi, pi), m) in xn.iter_mut().zip(&p).zip(&inv_mass) {
                *xi += step * m * pi;
            }
            match eval(target, &xn) {
                Some((v, g)) => {
                    lpn = v;
                    gn = g;
                }
                None => {
                    finite = false;
                    break;
                }
            }
            let scale = if s + 1 == config.n_leapfrog { 0.5 } else { 1.0 };
            for (pi, gi) in p.iter_mut().zip(&gn) {
                *pi += scale * step * gi;
            }
        }
        let h1 = -lpn + kinetic(&p);
        let accept_prob = if finite && h1.is_finite() { (h0 - h1).exp().min(1.0) } else { 0.0 };
        if finite && h1.is_finite() {
            bad_run = 0;
        } else {
            bad_run += 1;
            if bad_run >= MAX_NON_FINITE_RUN {
                return Err(Error::Sampling(format!(
                    "{MAX_NON_FINITE_RUN} consecutive trajectories hit non-finite energy (transition {it})"
                )));
            }
        }
        let u: f64 = rng.random();
        let accept = u < accept_prob;
        if accept {
            x = xn;
            grad = gn;
            lp = lpn;
        }

        if it < config.burn_in {
            eps = da.update(accept_prob);
            if !windows.is_empty() && it >= window_start {
                window.push(&x);
                if windows.contains(&(it + 1)) && window.n > 2 {
                    inv_mass = window.inv_mass();
                    sqrt_mass = inv_mass.iter().map(|m| 1.0 / m.sqrt()).collect();
                    window = Welford::default();
                    da = DualAveraging::new(eps, config.target_accept);
                    log::debug!("hmc mass matrix updated at transition {}", it + 1);
                }
            }
            if it + 1 == config.burn_in {
                eps = da.log_eps_bar.exp();
                log::debug!("hmc step size adapted to {eps:.3e}");
            }
        } else {
            accepted += accept as usize;
            samples.extend_from_slice(&x);
            log_post.push(lp);
        }
    }

    Ok(PosteriorSamples {
        dim: d,
        samples,
        log_post,
        acceptance_rate: accepted as f64 / config.n_kept as f64,
        step_size: eps,
        inv_mass,
        layout: None,
    })
}

/// Gaussian target `N(mean, cov)` given through its precision matrix.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` precision.
    pub precision: Vec<f64>,
}

impl LogDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.mean.len();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut g = vec![0.0; d];
        let mut q = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let pi: f64 = row.iter().zip(&diff).map(|(a, b)| a * b).sum();
            g[i] = -pi;
            q += diff[i] * pi;
        }
        Ok((-0.5 * q, g))
    }
}

//! A mean-field network whose output distribution matches a chosen scalar
//! predictive distribution.
//!
//! The first layer (the introducer) copies the input and adds one hidden
//! unit carrying unit Gaussian noise `z`. The remaining layers (the mapper)
//! push `z` through the target's inverse CDF, `G(h) = F^-1(Phi(phi^-1(h)))`.
//! The mapper is fitted by ridge regression on fixed leaky-ReLU ramps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfvi::MeanFieldPosterior;
use crate::model::{self, Activation, NetworkSpec};
use crate::rng;
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Gaussian mixture over a scalar `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureComponent>", into = "Vec<MixtureComponent>")]
pub struct TargetPredictive {
    components: Vec<MixtureComponent>,
}

impl TryFrom<Vec<MixtureComponent>> for TargetPredictive {
    type Error = Error;
    fn try_from(c: Vec<MixtureComponent>) -> Result<Self> {
        TargetPredictive::new(c)
    }
}

impl From<TargetPredictive> for Vec<MixtureComponent> {
    fn from(t: TargetPredictive) -> Self {
        t.components
    }
}

impl TargetPredictive {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("a mixture needs at least one component"));
        }
        if components.iter().any(|c| !(c.weight > 0.0) || !(c.std > 0.0) || !c.mean.is_finite()) {
            return Err(Error::invalid("mixture weights and stds must be positive and means finite"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(TargetPredictive { components })
    }

    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent { weight: 1.0, mean, std }])
    }

    /// `0.5 N(-2, 0.25) + 0.5 N(2, 0.25)` (variances 0.25).
    pub fn bimodal() -> Self {
        let c = |mean| MixtureComponent {
            weight: 0.5,
            mean,
            std: 0.5,
        };
        TargetPredictive {
            components: vec![c(-2.0), c(2.0)],
        }
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let second: f64 = self.components.iter().map(|c| c.weight * (c.std * c.std + c.mean * c.mean)).sum();
        (second - m * m).max(0.0).sqrt()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.components.iter().map(|c| c.weight * stats::norm_cdf((y - c.mean) / c.std)).sum()
    }

    /// `1 - cdf(y)` without cancellation in the upper tail.
    pub fn sf(&self, y: f64) -> f64 {
        self.components.iter().map(|c| c.weight * stats::norm_cdf((c.mean - y) / c.std)).sum()
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * stats::norm_pdf((y - c.mean) / c.std) / c.std)
            .sum()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut r = rng::keyed(seed, 0);
        (0..n)
            .map(|_| {
                let mut u: f64 = r.random();
                let mut pick = self.components.last().unwrap();
                for c in &self.components {
                    if u < c.weight {
                        pick = c;
                        break;
                    }
                    u -= c.weight;
                }
                pick.mean + pick.std * rng::std_normal(&mut r)
            })
            .collect()
    }

    /// Inverse CDF. `u` is clipped to `[1e-15, 1 - 1e-15]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(1e-15, 1.0 - 1e-15);
        // solve in whichever tail keeps the residual well conditioned
        let upper = u > 0.5;
        let goal = if upper { 1.0 - u } else { u };
        let resid = |y: f64| if upper { goal - self.sf(y) } else { self.cdf(y) - goal };
        let mut lo = self.components.iter().map(|c| c.mean - 40.0 * c.std).fold(f64::INFINITY, f64::min);
        let mut hi = self.components.iter().map(|c| c.mean + 40.0 * c.std).fold(f64::NEG_INFINITY, f64::max);
        let mut y = 0.5 * (lo + hi);
        for _ in 0..400 {
            let f = resid(y);
            if f == 0.0 {
                break;
            }
            if f < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let d = self.pdf(y);
            let newton = y - f / d;
            let next = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            let done = (next - y).abs() <= 1e-15 * (1.0 + y.abs()) || hi - lo <= 1e-15 * (1.0 + y.abs());
            y = next;
            if done {
                break;
            }
        }
        y
    }
}

/// `G(h) = F^-1(Phi(phi^-1(h)))` for an invertible activation `phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileMap {
    pub target: TargetPredictive,
    pub activation: Activation,
    /// Input the map is built for.
    pub x: Vec<f64>,
}

impl QuantileMap {
    /// Maps a standard normal draw to the target.
    pub fn of_z(&self, z: f64) -> f64 {
        self.target.quantile(stats::norm_cdf(z))
    }

    /// Maps the activated noise unit `phi(z)` to the target.
    pub fn of_hidden(&self, h: f64) -> Result<f64> {
        let z = self
            .activation
            .inverse(h)
            .ok_or_else(|| Error::invalid("activation is not invertible at this value"))?;
        Ok(self.of_z(z))
    }
}

/// The target does not depend on the input here. `x` is kept because the
/// copied input feeds noise into the mapper.
pub fn quantile_map(target: &TargetPredictive, x: &[f64], activation: Activation) -> Result<QuantileMap> {
    if activation.negative_slope() <= 0.0 {
        return Err(Error::invalid("the quantile map needs an invertible activation"));
    }
    Ok(QuantileMap {
        target: target.clone(),
        activation,
        x: x.to_vec(),
    })
}

/// First layer `D -> D+1`: unit 0 carries `z ~ N(0, 1)` (from its bias), the
/// other units copy the input. Every weight has std `sigma`, biases have std
/// `(1, sigma, ..)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RvIntroducer {
    pub weight_mean: DMatrix<f64>,
    pub weight_std: DMatrix<f64>,
    pub bias_mean: Vec<f64>,
    pub bias_std: Vec<f64>,
}

pub fn build_rv_introducer(input_dim: usize, sigma: f64) -> Result<RvIntroducer> {
    if input_dim == 0 {
        return Err(Error::invalid("input dimension must be positive"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let d = input_dim;
    let weight_mean = DMatrix::from_fn(d + 1, d, |r, c| if r == c + 1 { 1.0 } else { 0.0 });
    let mut bias_std = vec![sigma; d + 1];
    bias_std[0] = 1.0;
    Ok(RvIntroducer {
        weight_mean,
        weight_std: DMatrix::from_element(d + 1, d, sigma),
        bias_mean: vec![0.0; d + 1],
        bias_std,
    })
}

impl RvIntroducer {
    pub fn input_dim(&self) -> usize {
        self.weight_mean.ncols()
    }

    /// Pre-activations for one weight draw from stream `(seed, 0)`.
    pub fn sample_pre(&self, x: &[f64], seed: u64) -> Vec<f64> {
        let mut r = rng::keyed(seed, 0);
        let (rows, cols) = self.weight_mean.shape();
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut v = self.bias_mean[i] + self.bias_std[i] * rng::std_normal(&mut r);
            for j in 0..cols {
                v += (self.weight_mean[(i, j)] + self.weight_std[(i, j)] * rng::std_normal(&mut r)) * x[j];
            }
            out.push(v);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    pub width: usize,
    pub alpha: f64,
    /// Quantile points used for the least-squares fit.
    pub n_fit: usize,
    /// Extra ridge penalty relative to the mean diagonal of the normal
    /// equations, on top of the weight-noise penalty.
    pub ridge: f64,
    /// Std given to every mapper weight and bias in the assembled posterior.
    pub weight_std: f64,
    /// RMSE, relative to the target's standard deviation, above which the
    /// fit is reported as under capacity.
    pub rmse_warn: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            width: 256,
            alpha: 0.1,
            n_fit: 8192,
            ridge: 1e-12,
            weight_std: 1e-3,
            rmse_warn: 0.05,
        }
    }
}

/// Second-stage weights. Hidden unit `k` is `leaky(sign_k * (h0 - knot_k))`
/// and the output is `intercept + sum_k beta_k * unit_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvMapper {
    pub knots: Vec<f64>,
    pub signs: Vec<f64>,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    pub weight_std: f64,
    pub rmse: f64,
    pub under_capacity: bool,
}

impl RvMapper {
    pub fn eval(&self, h0: f64) -> f64 {
        let act = Activation::LeakyRelu { alpha: self.alpha };
        let mut y = self.intercept;
        for ((c, s), b) in self.knots.iter().zip(&self.signs).zip(&self.beta) {
            y += b * act.apply(s * (h0 - c));
        }
        y
    }
}

/// Least-squares fit of the mapper to `map` over `z` at `n_fit` evenly
/// spaced probabilities. The objective is the expected squared error of the
/// network once its weights carry noise of std `weight_std`: to first order
/// that adds `weight_std^2 * E[slope_k^2 * (h0^2 + 1 + |phi(x)|^2)]` per unit
/// to the ridge, which keeps the coefficients behind steep stretches of the
/// quantile map from amplifying the noise. Unit 0 is a falling ramp on the activation's kink,
/// which alone reproduces `phi^-1`. The other knots sit at `phi(z)` for
/// evenly spaced probabilities and alternate between rising and falling
/// ramps, so both tails can take any slope.
pub fn fit_rv_mapper(map: &QuantileMap, config: &MapperConfig) -> Result<RvMapper> {
    if config.width == 0 || config.n_fit < 2 {
        return Err(Error::invalid("mapper width and fit size must be positive"));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::invalid("leaky slope must lie in (0, 1)"));
    }
    if !(config.weight_std > 0.0) {
        return Err(Error::invalid("mapper weight std must be positive"));
    }
    let act = Activation::LeakyRelu { alpha: config.alpha };
    let w = config.width;
    let mut knots = vec![0.0];
    let mut signs = vec![-1.0];
    for j in 0..w - 1 {
        knots.push(act.apply(stats::norm_quantile((j as f64 + 0.5) / (w - 1) as f64)));
        signs.push(if j % 2 == 0 { 1.0 } else { -1.0 });
    }
    let n = config.n_fit;
    let zs: Vec<f64> = (0..n).map(|i| stats::norm_quantile((i as f64 + 0.5) / n as f64)).collect();
    let ys: Vec<f64> = zs.iter().map(|&z| map.of_z(z)).collect();
    let hs: Vec<f64> = zs.iter().map(|&z| act.apply(z)).collect();
    let design = DMatrix::from_fn(n, w + 1, |i, k| if k == w { 1.0 } else { act.apply(signs[k] * (hs[i] - knots[k])) });
    let mut normal = design.tr_mul(&design);
    let lam = config.ridge * normal.trace() / (w + 1) as f64;
    let copies: f64 = map.x.iter().map(|&x| act.apply(x).powi(2)).sum();
    let var = config.weight_std * config.weight_std;
    for k in 0..w {
        let noise: f64 = hs
            .iter()
            .map(|&h| act.multiplier(signs[k] * (h - knots[k])).powi(2) * (h * h + 1.0 + copies))
            .sum();
        normal[(k, k)] += lam + var * noise;
    }
    let rhs = design.tr_mul(&DVector::from_column_slice(&ys));
    let sol = normal
        .cholesky()
        .ok_or_else(|| Error::Fit("mapper normal equations are not positive definite".into()))?
        .solve(&rhs);
    let pred = &design * &sol;
    let rmse = (pred.iter().zip(&ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n as f64).sqrt();
    let under_capacity = rmse > config.rmse_warn * map.target.std();
    if under_capacity {
        log::warn!("mapper of width {w} fits the quantile map with RMSE {rmse:.3e}");
    }
    Ok(RvMapper {
        knots,
        signs,
        beta: sol.iter().take(w).copied().collect(),
        intercept: sol[w],
        alpha: config.alpha,
        weight_std: config.weight_std,
        rmse,
        under_capacity,
    })
}

/// The `D -> D+1 -> width -> 1` leaky network as a mean-field posterior.
pub fn assemble(intro: &RvIntroducer, mapper: &RvMapper) -> Result<MeanFieldPosterior> {
    let d = intro.input_dim();
    let w = mapper.knots.len();
    let spec = NetworkSpec::new(vec![d, d + 1, w, 1], Activation::LeakyRelu { alpha: mapper.alpha }, true)?;
    let layout = spec.layout();
    let mut mu = vec![0.0; layout.len];
    let mut sd = vec![mapper.weight_std; layout.len];

    let b0 = &layout.layers[0];
    for r in 0..d + 1 {
        for c in 0..d {
            mu[b0.weight_offset + r * d + c] = intro.weight_mean[(r, c)];
            sd[b0.weight_offset + r * d + c] = intro.weight_std[(r, c)];
        }
    }
    let o = b0.bias_offset.expect("bias enabled");
    mu[o..o + d + 1].copy_from_slice(&intro.bias_mean);
    sd[o..o + d + 1].copy_from_slice(&intro.bias_std);

    let b1 = &layout.layers[1];
    let o1 = b1.bias_offset.expect("bias enabled");
    for k in 0..w {
        mu[b1.weight_offset + k * (d + 1)] = mapper.signs[k];
        mu[o1 + k] = -mapper.signs[k] * mapper.knots[k];
    }
    let b2 = &layout.layers[2];
    mu[b2.weight_offset..b2.weight_offset + w].copy_from_slice(&mapper.beta);
    mu[b2.bias_offset.expect("bias enabled")] = mapper.intercept;
    MeanFieldPosterior::from_mean_std(spec, mu, &sd)
}

/// `n` outputs of the network at `x`, one weight draw each. Draw `i` uses
/// stream `i` of `seed`, so equal seeds share noise across posteriors of the
/// same shape.
pub fn sample_outputs(q: &MeanFieldPosterior, x: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
    if q.spec.output_dim() != 1 {
        return Err(Error::shape("only scalar outputs are supported"));
    }
    (0..n)
        .map(|i| {
            let theta = q.sample(&mut rng::keyed(seed, i as u64));
            let (y, _) = model::forward(&q.spec, &theta, x)?;
            Ok(y[0])
        })
        .collect()
}

/// Two-sided KS distance between `n` network outputs at `x` and the target.
pub fn induced_vs_target_ks(q: &MeanFieldPosterior, target: &TargetPredictive, x: &[f64], n: usize, seed: u64) -> Result<f64> {
    if n < 100 {
        return Err(Error::invalid("KS check needs at least 100 draws"));
    }
    let ys = sample_outputs(q, x, n, seed)?;
    Ok(stats::ks_statistic(&ys, |y| target.cdf(y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaky() -> Activation {
        Activation::LeakyRelu { alpha: 0.1 }
    }

    #[test]
    fn self_and_affine_maps() {
        let id = quantile_map(&TargetPredictive::gaussian(0.0, 1.0).unwrap(), &[0.0], leaky()).unwrap();
        let aff = quantile_map(&TargetPredictive::gaussian(1.5, 0.3).unwrap(), &[0.0], leaky()).unwrap();
        for i in 0..=60 {
            let z = -3.0 + 0.1 * i as f64;
            let h = leaky().apply(z);
            assert!((id.of_hidden(h).unwrap() - z).abs() < 1e-9, "z = {z}");
            assert!((aff.of_hidden(h).unwrap() - (1.5 + 0.3 * z)).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_inverts_cdf_and_is_monotone() {
        let t = TargetPredictive::bimodal();
        let map = quantile_map(&t, &[0.0], leaky()).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=200 {
            let z = -5.0 + 0.05 * i as f64;
            let y = map.of_z(z);
            assert!(y >= prev);
            prev = y;
            assert!((t.cdf(y) - stats::norm_cdf(z)).abs() < 1e-9, "z = {z}");
        }
        assert!(t.quantile(0.0).is_finite() && t.quantile(1.0).is_finite());
    }

    #[test]
    fn rejects_bad_mixtures() {
        let c = |w| MixtureComponent {
            weight: w,
            mean: 0.0,
            std: 1.0,
        };
        assert!(TargetPredictive::new(vec![c(0.5)]).is_err());
        assert!(TargetPredictive::new(vec![c(1.0), c(0.0)]).is_err());
        assert!(TargetPredictive::new(vec![]).is_err());
        assert!(serde_json::from_str::<TargetPredictive>(r#"[{"weight":0.4,"mean":0,"std":1}]"#).is_err());
    }

    #[test]
    fn deterministic_copy_limit() {
        let intro = build_rv_introducer(1, 1e-12).unwrap();
        for s in 0..20 {
            let pre = intro.sample_pre(&[0.5], s);
            assert!((pre[1] - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn affine_mapper_is_accurate() {
        let map = quantile_map(&TargetPredictive::gaussian(1.0, 2.0).unwrap(), &[0.0], leaky()).unwrap();
        let m = fit_rv_mapper(
            &map,
            &MapperConfig {
                width: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.rmse < 1e-3, "rmse {}", m.rmse);
        assert!(!m.under_capacity);
        assert!((TargetPredictive::bimodal().std() - 4.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn assembled_net_matches_mapper_at_zero_noise() {
        let map = quantile_map(&TargetPredictive::bimodal(), &[0.3], leaky()).unwrap();
        let m = fit_rv_mapper(
            &map,
            &MapperConfig {
                width: 32,
                n_fit: 1024,
                weight_std: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        let intro = build_rv_introducer(1, 1e-12).unwrap();
        let q = assemble(&intro, &m).unwrap();
        // with all other noise negligible the output is mapper(phi(z))
        let ys = sample_outputs(&q, &[0.3], 5, 4).unwrap();
        for (i, y) in ys.iter().enumerate() {
            let theta = q.sample(&mut rng::keyed(4, i as u64));
            let b = q.spec.layout().layers[0].bias_offset.unwrap();
            let z = theta[b];
            assert!((y - m.eval(leaky().apply(z))).abs() < 1e-8);
        }
    }
}

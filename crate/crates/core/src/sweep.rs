//! Mean-field gap as a function of depth at a fixed parameter budget.
//!
//! For each depth the hidden width is chosen so the network has roughly
//! `param_budget` weights. One mean-field fit per depth gives the starting
//! point for several HMC chains. Each chain's dominant mode is fitted with a
//! full and a diagonal Gaussian and the two fits are compared.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::gaussian;
use crate::gmm;
use crate::hmc::HmcConfig;
use crate::io;
use crate::likelihood::{self, Likelihood};
use crate::mfvi::{self, PriorSpec, TrainConfig};
use crate::model::{Activation, NetworkSpec};
use crate::posterior;
use crate::rng;
use crate::transport;

/// Weights (biases excluded) of a net with `depth` hidden layers of `width`.
pub fn weight_count(depth: usize, width: usize, n_in: usize, n_out: usize) -> usize {
    n_in * width + (depth - 1) * width * width + width * n_out
}

/// Hidden width whose weight count is closest to `budget`; ties go to the
/// narrower net.
pub fn solve_width(depth: usize, budget: usize, n_in: usize, n_out: usize) -> Result<usize> {
    if depth == 0 {
        return Err(Error::invalid("depth counts hidden layers and must be at least 1"));
    }
    if budget < weight_count(depth, 1, n_in, n_out) {
        return Err(Error::invalid(format!("budget {budget} is below the smallest depth-{depth} network")));
    }
    let a = (depth - 1) as f64;
    let b = (n_in + n_out) as f64;
    let c = budget as f64;
    let root = if a == 0.0 { c / b } else { (-b + (b * b + 4.0 * a * c).sqrt()) / (2.0 * a) };
    let lo = (root.floor() as usize).max(1);
    let dist = |w: usize| weight_count(depth, w, n_in, n_out).abs_diff(budget);
    Ok(if dist(lo + 1) < dist(lo) { lo + 1 } else { lo })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Hidden-layer counts to sweep.
    pub depths: Vec<usize>,
    pub param_budget: usize,
    pub restarts: usize,
    pub hmc: HmcConfig,
    pub mfvi: TrainConfig,
    pub k_max: usize,
    /// Cap on the cloud size used by the Wasserstein error.
    pub n_wasserstein: usize,
    /// Kept samples (evenly thinned) used for the test-set ensemble.
    pub n_ensemble: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: vec![1, 3, 5],
            param_budget: 1000,
            restarts: 5,
            hmc: HmcConfig {
                n_kept: 2000,
                ..HmcConfig::default()
            },
            mfvi: TrainConfig {
                learning_rate: 1e-2,
                epochs: 200,
                ..TrainConfig::default()
            },
            k_max: 4,
            n_wasserstein: 500,
            n_ensemble: 200,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::invalid("depths must be a non-empty list of positive hidden-layer counts"));
        }
        if self.restarts == 0 || self.k_max == 0 || self.n_wasserstein == 0 || self.n_ensemble == 0 {
            return Err(Error::invalid("restarts, k_max, n_wasserstein and n_ensemble must be positive"));
        }
        self.hmc.validate()?;
        self.mfvi.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub depth: usize,
    pub restart: usize,
    pub width: usize,
    pub n_params: usize,
    pub e_w: f64,
    pub e_kl: f64,
    pub test_acc: f64,
    pub acceptance: f64,
    pub step_size: f64,
    /// Mixture components chosen by BIC and samples in the dominant one.
    pub modes: usize,
    pub mode_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub depth: usize,
    pub restart: usize,
    pub error: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub median: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> MeanSe {
        let n = xs.len() as f64;
        let mean = crate::stats::mean(xs);
        let se = if xs.len() > 1 { (crate::stats::variance(xs) / n).sqrt() } else { f64::NAN };
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if s.is_empty() {
            f64::NAN
        } else if s.len() % 2 == 1 {
            s[s.len() / 2]
        } else {
            0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
        };
        MeanSe { mean, se, median }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSummary {
    pub depth: usize,
    pub n_cells: usize,
    pub e_w: MeanSe,
    pub e_kl: MeanSe,
    pub test_acc: MeanSe,
    pub acceptance: MeanSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub activation: String,
    pub param_budget: usize,
    pub cells: Vec<GapCell>,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<DepthSummary>,
}

impl GapReport {
    fn new(activation: Activation, config: &SweepConfig, cells: Vec<GapCell>, failures: Vec<CellFailure>) -> Self {
        let summary = config
            .depths
            .iter()
            .map(|&depth| {
                let sel: Vec<&GapCell> = cells.iter().filter(|c| c.depth == depth).collect();
                let col = |f: fn(&GapCell) -> f64| MeanSe::of(&sel.iter().map(|c| f(c)).collect::<Vec<_>>());
                DepthSummary {
                    depth,
                    n_cells: sel.len(),
                    e_w: col(|c| c.e_w),
                    e_kl: col(|c| c.e_kl),
                    test_acc: col(|c| c.test_acc),
                    acceptance: col(|c| c.acceptance),
                }
            })
            .collect();
        GapReport {
            activation: activation.name().to_string(),
            param_budget: config.param_budget,
            cells,
            failures,
            summary,
        }
    }

    pub fn depth_summary(&self, depth: usize) -> Option<&DepthSummary> {
        self.summary.iter().find(|s| s.depth == depth)
    }

    /// One row per successful cell: depth, restart, e_w, e_kl, test_acc,
    /// acceptance.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["depth", "restart", "e_w", "e_kl", "test_acc", "acceptance"])?;
        for c in &self.cells {
            w.write_record([
                c.depth.to_string(),
                c.restart.to_string(),
                io::fmt_f64(c.e_w),
                io::fmt_f64(c.e_kl),
                io::fmt_f64(c.test_acc),
                io::fmt_f64(c.acceptance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cell_seed(seed: u64, depth: usize, restart: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, depth as u64), restart as u64 + 1)
}

struct DepthSetup {
    depth: usize,
    width: usize,
    spec: NetworkSpec,
    init: Vec<f64>,
}

fn setup_depth(train: &Dataset, activation: Activation, depth: usize, config: &SweepConfig) -> Result<DepthSetup> {
    let n_in = train.dim();
    let n_out = output_dim(train)?;
    let width = solve_width(depth, config.param_budget, n_in, n_out)?;
    let mut widths = vec![n_in];
    widths.extend(std::iter::repeat_n(width, depth));
    widths.push(n_out);
    let spec = NetworkSpec::new(widths, activation, true)?;
    let prior = PriorSpec::isotropic(1.0 / config.hmc.prior_precision.sqrt(), spec.depth());
    let mfvi_cfg = TrainConfig {
        seed: rng::derive_seed(config.seed, 1000 + depth as u64),
        ..config.mfvi.clone()
    };
    let fit = mfvi::train(&spec, train, &prior, &mfvi_cfg)?;
    log::info!(
        "depth {depth}: width {width}, {} parameters, mean-field neg elbo {:.4}",
        spec.n_params(),
        fit.history.last().map_or(f64::NAN, |r| r.neg_elbo)
    );
    Ok(DepthSetup {
        depth,
        width,
        spec,
        init: fit.posterior.mu,
    })
}

fn output_dim(ds: &Dataset) -> Result<usize> {
    match &ds.targets {
        Targets::Classes { n_classes, .. } => Ok(*n_classes),
        Targets::Real(_) => Ok(1),
    }
}

fn run_cell(setup: &DepthSetup, restart: usize, train: &Dataset, test: &Dataset, likelihood: Likelihood, config: &SweepConfig) -> Result<GapCell> {
    let seed = cell_seed(config.seed, setup.depth, restart);
    let hmc_cfg = HmcConfig {
        seed: rng::derive_seed(seed, 1),
        init: Some(setup.init.clone()),
        ..config.hmc.clone()
    };
    let samples = posterior::sample_posterior(&setup.spec, train, likelihood, &hmc_cfg)?;
    let dim = samples.dim;

    let step = (samples.len() / config.n_ensemble).max(1);
    let members: Vec<&[f64]> = (0..samples.len()).step_by(step).map(|i| samples.row(i)).collect();
    let test_acc = match &test.targets {
        Targets::Classes { labels, .. } => {
            let p = posterior::ensemble_predict(&setup.spec, &members, &test.inputs, &likelihood)?;
            likelihood::accuracy(&p, labels)
        }
        Targets::Real(_) => f64::NAN,
    };

    let mode = gmm::gmm_dominant_mode(&samples.samples, dim, config.k_max, rng::derive_seed(seed, 2))?;
    let cloud: Vec<f64> = mode.indices.iter().flat_map(|&i| samples.row(i).iter().copied()).collect();
    let full = gaussian::fit_full(&cloud, dim)?;
    let diag = gaussian::fit_diag(&full)?;
    let e_kl = gaussian::kl_error(&full, &diag)?;
    let w = transport::wasserstein_error(&cloud, dim, &full, &diag, config.n_wasserstein, rng::derive_seed(seed, 3))?;
    log::info!(
        "depth {} restart {restart}: acceptance {:.3}, k {}, E_KL {:.4}, E_W {:.4}, acc {:.3}",
        setup.depth,
        samples.acceptance_rate,
        mode.k,
        e_kl,
        w.e_w,
        test_acc
    );
    Ok(GapCell {
        depth: setup.depth,
        restart,
        width: setup.width,
        n_params: dim,
        e_w: w.e_w,
        e_kl,
        test_acc,
        acceptance: samples.acceptance_rate,
        step_size: samples.step_size,
        modes: mode.k,
        mode_size: mode.indices.len(),
    })
}

/// Runs every `(depth, restart)` cell. Cells run in parallel on the current
/// rayon pool; a failing cell is recorded and the rest continue.
pub fn depth_gap_sweep(train: &Dataset, test: &Dataset, activation: Activation, config: &SweepConfig) -> Result<GapReport> {
    config.validate()?;
    let likelihood = match train.targets {
        Targets::Classes { .. } => Likelihood::Categorical,
        Targets::Real(_) => return Err(Error::invalid("the depth sweep expects a classification dataset")),
    };
    let setups: Vec<Result<DepthSetup>> = config
        .depths
        .par_iter()
        .map(|&d| setup_depth(train, activation, d, config))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..config.depths.len())
        .flat_map(|i| (0..config.restarts).map(move |r| (i, r)))
        .collect();
    let outcomes: Vec<(usize, usize, Result<GapCell>)> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let depth = config.depths[i];
            let res = match &setups[i] {
                Ok(s) => run_cell(s, r, train, test, likelihood, config),
                Err(e) => Err(Error::Fit(format!("mean-field initialization failed: {e}"))),
            };
            (depth, r, res)
        })
        .collect();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (depth, restart, res) in outcomes {
        match res {
            Ok(c) => cells.push(c),
            Err(e) => {
                log::error!("depth {depth} restart {restart} failed: {e}");
                failures.push(CellFailure {
                    depth,
                    restart,
                    error: e.to_string(),
                })
            }
        }
    }
    Ok(GapReport::new(activation, config, cells, failures))
}

/// Test-set accuracy of an ensemble, for reporting outside the sweep.
pub fn ensemble_accuracy(spec: &NetworkSpec, thetas: &[&[f64]], inputs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let p = posterior::ensemble_predict(spec, thetas, inputs, &Likelihood::Categorical)?;
    Ok(likelihood::accuracy(&p, labels))
}

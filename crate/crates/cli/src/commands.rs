//! One function per subcommand. Each reads a resolved config, writes its
//! artifacts under the output directory and returns the lines to print.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Result};
use mfdl_core::data::{self, Dataset, Standardizer, Task};
use mfdl_core::likelihood::Likelihood;
use mfdl_core::linear::{self, CovTensor4, MvgFactors};
use mfdl_core::local;
use mfdl_core::mfvi::{self, MeanFieldPosterior, PriorSpec, TrainConfig};
use mfdl_core::model::{Activation, NetworkSpec};
use mfdl_core::sweep::{self, GapReport, SweepConfig};
use mfdl_core::uat::{self, MapperConfig, TargetPredictive};
use mfdl_core::{gmm, io, rng, stats};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::DatasetSource;

/// Shared settings from the global flags.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub out: PathBuf,
    pub seed: u64,
}

impl RunContext {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes the fully resolved config the run used.
    pub fn snapshot(&self, command: &str, config: &impl Serialize) -> Result<()> {
        io::write_json(
            &self.path("config.resolved.json"),
            &json!({
                "command": command,
                "seed": self.seed,
                "version": io::VERSION,
                "config": config,
            }),
        )?;
        Ok(())
    }

    /// `name.ext` gets `name.meta.json`.
    fn sidecar(&self, artifact: &Path, config: &impl Serialize, extra: Option<serde_json::Value>) -> Result<()> {
        io::write_sidecar(&artifact.with_extension("meta.json"), config, self.seed, extra)?;
        Ok(())
    }
}

/// Printed lines plus any per-cell failures that should make the exit code
/// nonzero.
#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub failures: Vec<String>,
}

fn split_standardized(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = ds.split_fraction(train_fraction, seed)?;
    let st = Standardizer::fit(&train.inputs);
    Ok((st.apply(&train), st.apply(&test)))
}

fn output_dim(ds: &Dataset) -> usize {
    ds.n_classes().unwrap_or(1)
}

fn check_likelihood(ds: &Dataset, likelihood: &Likelihood) -> Result<()> {
    match (ds.task(), likelihood) {
        (Task::Classification, Likelihood::Categorical) | (Task::Regression, Likelihood::Gaussian { .. }) => Ok(()),
        (task, l) => bail!("likelihood {l:?} does not fit a {task:?} dataset"),
    }
}

/// Accuracy for classification, root mean squared error for regression,
/// both from predictive draws.
fn evaluate(q: &MeanFieldPosterior, ds: &Dataset, likelihood: &Likelihood, n_samples: usize, seed: u64) -> Result<f64> {
    if ds.is_empty() {
        return Ok(f64::NAN);
    }
    match likelihood {
        Likelihood::Categorical => {
            let p = mfvi::predict_proba(q, &ds.inputs, n_samples, seed)?;
            let labels = match &ds.targets {
                data::Targets::Classes { labels, .. } => labels,
                _ => bail!("classification metrics need class labels"),
            };
            let hits = p
                .row_iter()
                .zip(labels)
                .filter(|(row, &y)| row.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0 == y)
                .count();
            Ok(hits as f64 / ds.len() as f64)
        }
        Likelihood::Gaussian { .. } => {
            let outs = mfvi::predict(q, &ds.inputs, n_samples, seed)?;
            let ys = match &ds.targets {
                data::Targets::Real(v) => v,
                _ => bail!("regression metrics need real targets"),
            };
            let mse = (0..ds.len())
                .map(|i| {
                    let m = outs.iter().map(|o| o[(i, 0)]).sum::<f64>() / outs.len() as f64;
                    (m - ys[i]).powi(2)
                })
                .sum::<f64>()
                / ds.len() as f64;
            Ok(mse.sqrt())
        }
    }
}

// ---------------------------------------------------------------- heatmap

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// Trained linear net, covariance from the exact recursion.
    LinearAnalytic,
    /// Trained linear net, covariance from product-matrix draws.
    LinearTrained,
    /// Trained piecewise-linear net, covariance of local product matrices.
    LocalTrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    pub mode: HeatmapMode,
    /// Number of weight matrices.
    pub depth: usize,
    pub width: usize,
    /// Used by `local_trained`; the linear modes are always linear.
    pub activation: Activation,
    pub bias: bool,
    pub dataset: DatasetSource,
    pub train_fraction: f64,
    pub prior_std: f64,
    pub train: TrainConfig,
    /// Posterior draws for the sampled covariances.
    pub n_samples: usize,
    /// Row of the held-out split used as the local anchor.
    pub anchor: usize,
    /// How many of the highest-variance entries get a multimodality check.
    pub n_modality: usize,
    /// Heatmap width in pixels (rounded up to whole cells).
    pub image_px: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            mode: HeatmapMode::LinearAnalytic,
            depth: 5,
            width: 16,
            activation: Activation::LeakyRelu { alpha: 0.1 },
            bias: false,
            dataset: DatasetSource::Blobs {
                n: 2000,
                dim: 16,
                classes: 10,
                separation: 3.0,
            },
            train_fraction: 0.9,
            prior_std: 0.23,
            train: TrainConfig::default(),
            n_samples: 10_000,
            anchor: 0,
            n_modality: 8,
            image_px: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub mode: HeatmapMode,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub rows: usize,
    pub cols: usize,
    pub max_diag: f64,
    pub max_offdiag: f64,
    /// `max_offdiag / max_diag`.
    pub offdiag_ratio: f64,
    pub heldout_metric: f64,
    pub final_neg_elbo: f64,
    pub modality: Vec<local::EntryModality>,
}

pub fn cov_heatmap(ctx: &RunContext, cfg: &HeatmapConfig) -> Result<Outcome> {
    ensure!(cfg.depth >= 1 && cfg.width >= 1, "depth and width must be positive");
    ensure!(cfg.n_samples >= 2, "need at least 2 samples");
    let ds = cfg.dataset.load(rng::derive_seed(ctx.seed, 1))?;
    check_likelihood(&ds, &cfg.train.likelihood)?;
    let (train, heldout) = split_standardized(&ds, cfg.train_fraction, rng::derive_seed(ctx.seed, 2))?;
    let activation = match cfg.mode {
        HeatmapMode::LocalTrained => cfg.activation,
        _ => Activation::Linear,
    };
    let widths = [vec![train.dim()], vec![cfg.width; cfg.depth - 1], vec![output_dim(&train)]].concat();
    let spec = NetworkSpec::new(widths, activation, cfg.bias)?;
    let prior = PriorSpec::isotropic(cfg.prior_std, cfg.depth);
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(ctx.seed, 3),
        ..cfg.train.clone()
    };
    let fit = mfvi::train(&spec, &train, &prior, &train_cfg)?;
    let q = fit.posterior;
    let metric = evaluate(&q, &heldout, &train_cfg.likelihood, train_cfg.n_test_samples, rng::derive_seed(ctx.seed, 4))?;
    let sample_seed = rng::derive_seed(ctx.seed, 5);

    let (mean, cov, modality) = match cfg.mode {
        HeatmapMode::LinearAnalytic => {
            let m = linear::cov_product(&q.weight_layers())?;
            (m.mean, m.cov, Vec::new())
        }
        HeatmapMode::LinearTrained => {
            let layers = q.weight_layers();
            let mc = linear::mc_product_moments(&layers, cfg.n_samples, sample_seed)?;
            let (r, c) = (layers.last().unwrap().rows(), layers[0].cols());
            (DMatrix::from_row_slice(r, c, &mc.mean), CovTensor4::from_flat(r, c, mc.cov)?, Vec::new())
        }
        HeatmapMode::LocalTrained => {
            let pool = if heldout.is_empty() { &train } else { &heldout };
            ensure!(cfg.anchor < pool.len(), "anchor {} outside the {} held-out rows", cfg.anchor, pool.len());
            let x: Vec<f64> = pool.inputs.row(cfg.anchor).iter().copied().collect();
            let samples = local::sample_local_products(&q, &x, cfg.n_samples, sample_seed)?;
            let rep = local::empirical_cov(&samples, &x)?;
            let n = rep.cov.flat_dim();
            let cols = rep.cov.cols();
            let mut by_var: Vec<usize> = (0..n).collect();
            by_var.sort_by(|&a, &b| rep.cov.flat()[b * n + b].total_cmp(&rep.cov.flat()[a * n + a]).then(a.cmp(&b)));
            let entries: Vec<(usize, usize)> = by_var.iter().take(cfg.n_modality).map(|&p| (p / cols, p % cols)).collect();
            let modality = local::flag_multimodal(&samples, &entries, rng::derive_seed(ctx.seed, 6))?;
            (rep.mean, rep.cov, modality)
        }
    };

    let (max_diag, max_offdiag) = cov.max_abs_diag_offdiag();
    let report = HeatmapReport {
        mode: cfg.mode,
        depth: cfg.depth,
        width: cfg.width,
        activation,
        rows: cov.rows(),
        cols: cov.cols(),
        max_diag,
        max_offdiag,
        offdiag_ratio: if max_diag > 0.0 { max_offdiag / max_diag } else { 0.0 },
        heldout_metric: metric,
        final_neg_elbo: fit.history.last().map_or(f64::NAN, |h| h.neg_elbo),
        modality,
    };

    let cov_path = ctx.path("cov.csv");
    io::write_cov_csv(&cov_path, &cov)?;
    ctx.sidecar(&cov_path, cfg, None)?;
    let mean_path = ctx.path("mean.csv");
    io::write_matrix_csv(&mean_path, &mean)?;
    ctx.sidecar(&mean_path, cfg, None)?;
    let m = cov.to_matrix();
    let ppm = ctx.path("heatmap.ppm");
    io::write_heatmap_ppm(&ppm, &m, io::cell_for(m.nrows(), cfg.image_px))?;
    ctx.sidecar(&ppm, cfg, Some(json!({"scale": max_diag.max(max_offdiag)})))?;
    io::write_json(&ctx.path("report.json"), &report)?;

    let mut lines = vec![format!(
        "cov-heatmap {:?} depth {}: max |diag| {:.6e}, max |off-diag| {:.6e}, ratio {:.4}",
        cfg.mode, cfg.depth, max_diag, max_offdiag, report.offdiag_ratio
    )];
    let multi = report.modality.iter().filter(|m| m.multimodal).count();
    if !report.modality.is_empty() {
        lines.push(format!("multimodal entries: {multi} of {}", report.modality.len()));
    }
    Ok(Outcome { lines, failures: vec![] })
}

// ---------------------------------------------------------------- depth gap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthGapConfig {
    pub activations: Vec<Activation>,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub sweep: SweepConfig,
}

impl Default for DepthGapConfig {
    fn default() -> Self {
        DepthGapConfig {
            activations: vec![Activation::Relu, Activation::Linear],
            n_train: 100,
            n_test: 500,
            noise: 0.0,
            sweep: SweepConfig::default(),
        }
    }
}

/// Sweeps every activation. The master seed replaces the sweep seed.
pub fn depth_gap_reports(ctx: &RunContext, cfg: &DepthGapConfig) -> Result<Vec<GapReport>> {
    ensure!(!cfg.activations.is_empty(), "no activations to sweep");
    let train = data::two_moons(cfg.n_train, cfg.noise, rng::derive_seed(ctx.seed, 1))?;
    let test = data::two_moons(cfg.n_test, cfg.noise, rng::derive_seed(ctx.seed, 2))?;
    cfg.activations
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let sweep = SweepConfig {
                seed: rng::derive_seed(ctx.seed, 10 + i as u64),
                ..cfg.sweep.clone()
            };
            Ok(sweep::depth_gap_sweep(&train, &test, a, &sweep)?)
        })
        .collect()
}

pub fn depth_gap(ctx: &RunContext, cfg: &DepthGapConfig) -> Result<Outcome> {
    let reports = depth_gap_reports(ctx, cfg)?;
    let mut out = Outcome::default();
    for r in &reports {
        let csv = ctx.path(&format!("gap_{}.csv", r.activation));
        r.write_csv(&csv)?;
        ctx.sidecar(&csv, cfg, None)?;
        io::write_json(&ctx.path(&format!("gap_{}.json", r.activation)), r)?;
        for s in &r.summary {
            out.lines.push(format!(
                "{} depth {}: E_W median {:.4e}, E_KL median {:.4e}, test acc {:.4}, acceptance {:.3} ({} cells)",
                r.activation, s.depth, s.e_w.median, s.e_kl.median, s.test_acc.mean, s.acceptance.mean, s.n_cells
            ));
        }
        for f in &r.failures {
            out.failures.push(format!("{} depth {} restart {}: {}", r.activation, f.depth, f.restart, f.error));
        }
    }
    io::write_json(&ctx.path("summary.json"), &reports.iter().map(|r| (&r.activation, &r.summary)).collect::<Vec<_>>())?;
    Ok(out)
}

// ---------------------------------------------------------------- mvg check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MvgConfig {
    /// Shapes: A is `rows x inner_rows`, B is `inner_rows x inner_cols`, C is
    /// `inner_cols x cols`.
    pub rows: usize,
    pub inner_rows: usize,
    pub inner_cols: usize,
    pub cols: usize,
    pub n_sets: usize,
    pub n_samples: usize,
    /// Largest allowed `|analytic - MC| / SE`.
    pub z_limit: f64,
}

impl Default for MvgConfig {
    fn default() -> Self {
        MvgConfig {
            rows: 2,
            inner_rows: 3,
            inner_cols: 3,
            cols: 2,
            n_sets: 1,
            n_samples: 1_000_000,
            z_limit: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvgSetResult {
    pub set: usize,
    pub max_z: f64,
    pub max_rel_dev: f64,
    /// Largest relative gap between the Kronecker form and the three-layer
    /// recursion.
    pub recursion_rel_dev: f64,
    pub pass: bool,
}

fn random_matrix(rows: usize, cols: usize, r: &mut impl rand::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng::std_normal(r))
}

pub fn mvg_check_sets(ctx: &RunContext, cfg: &MvgConfig) -> Result<Vec<MvgSetResult>> {
    ensure!(cfg.n_sets >= 1 && cfg.n_samples >= 2 * rng::BLOCK, "need at least one set and two sample blocks");
    (0..cfg.n_sets)
        .map(|s| {
            let mut r = rng::keyed(ctx.seed, s as u64);
            let f = MvgFactors::new(
                random_matrix(cfg.rows, cfg.inner_rows, &mut r),
                random_matrix(cfg.inner_rows, cfg.inner_cols, &mut r),
                random_matrix(cfg.inner_cols, cfg.cols, &mut r),
            )?;
            let exact = linear::mvg_product(&f)?;
            let mc = linear::mc_product_moments(&f.as_layers(), cfg.n_samples, rng::derive_seed(ctx.seed, 1000 + s as u64))?;
            let scale = exact.cov.flat().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let (mut max_z, mut max_rel) = (0.0f64, 0.0f64);
            for (i, &v) in exact.cov.flat().iter().enumerate() {
                let d = (mc.cov[i] - v).abs();
                max_z = max_z.max(d / mc.cov_se[i].max(f64::MIN_POSITIVE));
                max_rel = max_rel.max(d / scale);
            }
            let rec = linear::cov_product(&f.as_layers())?;
            let rec_dev = rec
                .cov
                .flat()
                .iter()
                .zip(exact.cov.flat())
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs() / scale));
            Ok(MvgSetResult {
                set: s,
                max_z,
                max_rel_dev: max_rel,
                recursion_rel_dev: rec_dev,
                pass: max_z <= cfg.z_limit && rec_dev <= 1e-6,
            })
        })
        .collect()
}

pub fn mvg_check(ctx: &RunContext, cfg: &MvgConfig) -> Result<Outcome> {
    let sets = mvg_check_sets(ctx, cfg)?;
    io::write_json(&ctx.path("mvg.json"), &sets)?;
    let max_z = sets.iter().fold(0.0f64, |a, s| a.max(s.max_z));
    let max_rel = sets.iter().fold(0.0f64, |a, s| a.max(s.max_rel_dev));
    let bad: Vec<String> = sets
        .iter()
        .filter(|s| !s.pass)
        .map(|s| format!("factor set {}: max |z| {:.3}, recursion deviation {:.3e}", s.set, s.max_z, s.recursion_rel_dev))
        .collect();
    let verdict = if bad.is_empty() { "PASS" } else { "FAIL" };
    Ok(Outcome {
        lines: vec![format!(
            "{verdict} mvg-check: {} factor sets, max |z| {max_z:.3}, max relative deviation {max_rel:.3e}",
            sets.len()
        )],
        failures: bad,
    })
}

// ---------------------------------------------------------------- uat demo

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UatConfig {
    pub target: TargetPredictive,
    pub x: Vec<f64>,
    pub introducer_sigma: f64,
    pub mapper: MapperConfig,
    pub n_samples: usize,
    pub bins: usize,
    pub k_max: usize,
}

impl Default for UatConfig {
    fn default() -> Self {
        UatConfig {
            target: TargetPredictive::bimodal(),
            x: vec![0.5],
            introducer_sigma: 1e-3,
            mapper: MapperConfig::default(),
            n_samples: 10_000,
            bins: 100,
            k_max: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UatReport {
    pub ks: f64,
    pub n_samples: usize,
    pub gmm_k: usize,
    pub mapper_rmse: f64,
    pub under_capacity: bool,
}

pub fn uat_report(ctx: &RunContext, cfg: &UatConfig) -> Result<(UatReport, Vec<f64>)> {
    let act = Activation::LeakyRelu { alpha: cfg.mapper.alpha };
    let map = uat::quantile_map(&cfg.target, &cfg.x, act)?;
    let mapper = uat::fit_rv_mapper(&map, &cfg.mapper)?;
    let intro = uat::build_rv_introducer(cfg.x.len(), cfg.introducer_sigma)?;
    let q = uat::assemble(&intro, &mapper)?;
    let ys = uat::sample_outputs(&q, &cfg.x, cfg.n_samples, rng::derive_seed(ctx.seed, 1))?;
    ensure!(ys.len() >= 100, "KS check needs at least 100 draws");
    let ks = stats::ks_statistic(&ys, |y| cfg.target.cdf(y));
    let sel = gmm::select_by_bic(&ys, 1, cfg.k_max, rng::derive_seed(ctx.seed, 2))?;
    Ok((
        UatReport {
            ks,
            n_samples: ys.len(),
            gmm_k: sel.best.k,
            mapper_rmse: mapper.rmse,
            under_capacity: mapper.under_capacity,
        },
        ys,
    ))
}

pub fn uat_demo(ctx: &RunContext, cfg: &UatConfig) -> Result<Outcome> {
    ensure!(cfg.bins >= 1, "need at least one bin");
    let (report, ys) = uat_report(ctx, cfg)?;
    let lo = cfg.target.quantile(1e-4).min(ys.iter().copied().fold(f64::INFINITY, f64::min));
    let hi = cfg.target.quantile(1.0 - 1e-4).max(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let grid: Vec<[f64; 2]> = (0..=4 * cfg.bins)
        .map(|i| {
            let y = lo + (hi - lo) * i as f64 / (4 * cfg.bins) as f64;
            [y, cfg.target.pdf(y)]
        })
        .collect();
    let dens = ctx.path("target_density.csv");
    io::write_csv_rows(&dens, Some(&["y", "density"]), grid.iter().map(|r| &r[..]))?;
    ctx.sidecar(&dens, cfg, None)?;
    let hist: Vec<[f64; 2]> = io::histogram_density(&ys, lo, hi, cfg.bins).into_iter().map(|(c, d)| [c, d]).collect();
    let hp = ctx.path("induced_hist.csv");
    io::write_csv_rows(&hp, Some(&["y", "density"]), hist.iter().map(|r| &r[..]))?;
    ctx.sidecar(&hp, cfg, None)?;
    io::write_json(&ctx.path("ks.json"), &report)?;
    let mut lines = vec![format!(
        "uat-demo: KS = {:.4} at n = {}, BIC picks {} components, mapper RMSE {:.3e}",
        report.ks, report.n_samples, report.gmm_k, report.mapper_rmse
    )];
    if report.under_capacity {
        lines.push("warning: mapper is under capacity for this target".into());
    }
    Ok(Outcome { lines, failures: vec![] })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmdConfig {
    pub dataset: DatasetSource,
    pub train_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
    pub prior_std: f64,
    pub train: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            dataset: DatasetSource::Blobs {
                n: 2000,
                dim: 16,
                classes: 10,
                separation: 3.0,
            },
            train_fraction: 0.9,
            hidden: vec![16, 16, 16],
            activation: Activation::LeakyRelu { alpha: 0.1 },
            bias: true,
            prior_std: 0.23,
            train: TrainConfig::default(),
        }
    }
}

pub fn train(ctx: &RunContext, cfg: &TrainCmdConfig) -> Result<Outcome> {
    let ds = cfg.dataset.load(rng::derive_seed(ctx.seed, 1))?;
    check_likelihood(&ds, &cfg.train.likelihood)?;
    let (train, heldout) = split_standardized(&ds, cfg.train_fraction, rng::derive_seed(ctx.seed, 2))?;
    let widths = [vec![train.dim()], cfg.hidden.clone(), vec![output_dim(&train)]].concat();
    let spec = NetworkSpec::new(widths, cfg.activation, cfg.bias)?;
    let prior = PriorSpec::isotropic(cfg.prior_std, spec.depth());
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(ctx.seed, 3),
        ..cfg.train.clone()
    };
    let fit = mfvi::train(&spec, &train, &prior, &train_cfg)?;
    let metric = evaluate(&fit.posterior, &heldout, &train_cfg.likelihood, train_cfg.n_test_samples, rng::derive_seed(ctx.seed, 4))?;
    let ckpt = ctx.path("posterior.json");
    io::write_json(&ckpt, &fit.posterior)?;
    ctx.sidecar(&ckpt, cfg, None)?;
    let hist = ctx.path("history.csv");
    let rows: Vec<[f64; 4]> = fit
        .history
        .iter()
        .map(|h| [h.epoch as f64, h.neg_elbo, h.kl_term, h.nll_term])
        .collect();
    io::write_csv_rows(&hist, Some(&["epoch", "neg_elbo", "kl_term", "nll_term"]), rows.iter().map(|r| &r[..]))?;
    ctx.sidecar(&hist, cfg, None)?;
    let name = match train_cfg.likelihood {
        Likelihood::Categorical => "accuracy",
        Likelihood::Gaussian { .. } => "rmse",
    };
    io::write_json(&ctx.path("metrics.json"), &json!({ name: metric, "n_heldout": heldout.len() }))?;
    Ok(Outcome {
        lines: vec![format!(
            "train: {} parameters, final negative ELBO {:.6}, held-out {name} {metric:.4}",
            spec.n_params(),
            fit.history.last().map_or(f64::NAN, |h| h.neg_elbo)
        )],
        failures: vec![],
    })
}

// ---------------------------------------------------------------- prior density

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorDensityConfig {
    pub depths: Vec<usize>,
    pub width: usize,
    pub sigma: f64,
    pub n_samples: usize,
    pub bins: usize,
    /// Histogram range in units of each depth's sample standard deviation.
    pub range_sd: f64,
}

impl Default for PriorDensityConfig {
    fn default() -> Self {
        PriorDensityConfig {
            depths: (1..=7).collect(),
            width: 16,
            sigma: 0.23,
            n_samples: 100_000,
            bins: 100,
            range_sd: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorDensitySummary {
    pub depth: usize,
    pub std: f64,
    pub excess_kurtosis: f64,
    /// KS distance to the normal with the sample's own standard deviation.
    pub ks_normal: f64,
}

pub fn prior_density(ctx: &RunContext, cfg: &PriorDensityConfig) -> Result<Outcome> {
    ensure!(cfg.bins >= 1 && cfg.range_sd > 0.0 && cfg.n_samples >= 2, "bins, range and sample count must be positive");
    let mut summary = Vec::new();
    let mut lines = Vec::new();
    for &depth in &cfg.depths {
        let xs = linear::prior_element_density(depth, cfg.width, cfg.sigma, cfg.n_samples, rng::derive_seed(ctx.seed, depth as u64))?;
        let sd = stats::variance(&xs).sqrt();
        let z: Vec<f64> = xs.iter().map(|x| x / sd).collect();
        let hist = io::histogram_density(&z, -cfg.range_sd, cfg.range_sd, cfg.bins);
        let rows: Vec<[f64; 3]> = hist.iter().map(|&(c, d)| [c, d, stats::norm_pdf(c)]).collect();
        let path = ctx.path(&format!("prior_density_L{depth}.csv"));
        io::write_csv_rows(&path, Some(&["z", "density", "normal_density"]), rows.iter().map(|r| &r[..]))?;
        ctx.sidecar(&path, cfg, Some(json!({"depth": depth, "std": sd})))?;
        let s = PriorDensitySummary {
            depth,
            std: sd,
            excess_kurtosis: stats::kurtosis(&xs) - 3.0,
            ks_normal: stats::ks_statistic(&z, stats::norm_cdf),
        };
        lines.push(format!(
            "depth {depth}: std {:.4e}, excess kurtosis {:.3}, KS to normal {:.4}",
            s.std, s.excess_kurtosis, s.ks_normal
        ));
        summary.push(s);
    }
    io::write_json(&ctx.path("prior_density.json"), &summary)?;
    Ok(Outcome { lines, failures: vec![] })
}

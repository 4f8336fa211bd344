//! Observation models on network outputs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Targets;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Likelihood {
    /// Softmax over the outputs, one output per class.
    Categorical,
    /// `y ~ N(f(x), noise_std^2)` on a scalar output.
    Gaussian { noise_std: f64 },
}

impl Likelihood {
    /// Summed negative log-likelihood over the rows of `outputs` (`n x k`)
    /// and its gradient with respect to each output.
    pub fn nll(&self, outputs: &DMatrix<f64>, targets: &Targets) -> Result<(f64, DMatrix<f64>)> {
        if outputs.nrows() != targets.len() {
            return Err(Error::shape(format!(
                "{} outputs but {} targets",
                outputs.nrows(),
                targets.len()
            )));
        }
        match (self, targets) {
            (Likelihood::Categorical, Targets::Classes { labels, n_classes }) => {
                if outputs.ncols() != *n_classes {
                    return Err(Error::shape(format!(
                        "network has {} outputs for {n_classes} classes",
                        outputs.ncols()
                    )));
                }
                let mut grad = DMatrix::zeros(outputs.nrows(), outputs.ncols());
                let mut total = 0.0;
                for (i, &label) in labels.iter().enumerate() {
                    let row = outputs.row(i);
                    let mx = row.max();
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    total += lse - row[label];
                    for k in 0..outputs.ncols() {
                        grad[(i, k)] = (row[k] - lse).exp() - if k == label { 1.0 } else { 0.0 };
                    }
                }
                Ok((total, grad))
            }
            (Likelihood::Gaussian { noise_std }, Targets::Real(y)) => {
                if outputs.ncols() != 1 {
                    return Err(Error::shape("Gaussian likelihood needs a scalar output"));
                }
                let s2 = noise_std * noise_std;
                let norm = noise_std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
                let mut grad = DMatrix::zeros(outputs.nrows(), 1);
                let mut total = 0.0;
                for (i, &yi) in y.iter().enumerate() {
                    let r = outputs[(i, 0)] - yi;
                    total += 0.5 * r * r / s2 + norm;
                    grad[(i, 0)] = r / s2;
                }
                Ok((total, grad))
            }
            _ => Err(Error::invalid("likelihood does not match the target type")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Likelihood::Gaussian { noise_std } if !(*noise_std > 0.0) => {
                Err(Error::invalid("Gaussian noise std must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Fraction of rows whose largest entry sits at the true label.
pub fn accuracy(scores: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = scores.row(*i);
            (0..row.len()).all(|k| row[k] <= row[l])
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Row-wise softmax.
pub fn softmax_rows(outputs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = outputs.clone();
    for mut row in p.row_iter_mut() {
        let mx = row.max();
        row.apply(|v| *v = (*v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

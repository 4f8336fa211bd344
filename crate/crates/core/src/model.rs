//! Multilayer perceptrons over a flat parameter vector.
//!
//! Parameters are stored layer by layer as `[W1, b1, W2, b2, ...]`, each
//! weight block row-major with shape `(n_out, n_in)`. Two evaluation paths
//! exist: [`forward`] runs a single input in double-double precision and
//! records the activation pattern, while [`forward_batch`] and
//! [`grad_logdensity`] run whole batches in plain `f64` for training and
//! sampling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::compensated::Dd;
use crate::error::{Error, Result};

/// Elementwise nonlinearity between layers. Serializes as `"linear"`,
/// `"relu"` or `"leaky_relu:<alpha>"`; a bare `"leaky_relu"` reads as
/// slope 0.1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu { alpha: f64 },
}

impl Activation {
    /// Multiplier applied on the non-positive branch. `1` for linear, `0`
    /// for ReLU.
    pub fn negative_slope(self) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => 0.0,
            Activation::LeakyRelu { alpha } => alpha,
        }
    }

    /// `true` when `z` falls on the positive branch. Zero takes the other
    /// branch.
    #[inline]
    pub fn is_on(self, z: f64) -> bool {
        matches!(self, Activation::Linear) || z > 0.0
    }

    #[inline]
    pub fn multiplier(self, z: f64) -> f64 {
        if self.is_on(z) {
            1.0
        } else {
            self.negative_slope()
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        z * self.multiplier(z)
    }

    /// Inverse of the activation, defined when the negative slope is non-zero.
    pub fn inverse(self, h: f64) -> Option<f64> {
        let slope = self.negative_slope();
        if h > 0.0 {
            Some(h)
        } else if slope > 0.0 {
            Some(h / slope)
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::LeakyRelu { .. } => "leaky_relu",
        }
    }

    fn validate(self) -> Result<()> {
        if let Activation::LeakyRelu { alpha } = self {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::invalid(format!(
                    "leaky_relu slope must lie in (0, 1], got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let a = match s.split_once(':') {
            None if s == "linear" => Activation::Linear,
            None if s == "relu" => Activation::Relu,
            None if s == "leaky_relu" => Activation::LeakyRelu { alpha: 0.1 },
            Some(("leaky_relu", a)) => Activation::LeakyRelu {
                alpha: a
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad leaky_relu slope {a:?}")))?,
            },
            _ => return Err(Error::invalid(format!("unknown activation {s:?}"))),
        };
        a.validate()?;
        Ok(a)
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::LeakyRelu { alpha } => write!(f, "leaky_relu:{alpha}"),
            other => f.write_str(other.name()),
        }
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> Self {
        a.to_string()
    }
}

/// Architecture of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct NetworkSpec {
    widths: Vec<usize>,
    activation: Activation,
    bias: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRepr {
    widths: Vec<usize>,
    activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    bias: bool,
}

impl TryFrom<SpecRepr> for NetworkSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        let activation = match r.activation.as_str() {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::LeakyRelu {
                alpha: r
                    .alpha
                    .ok_or_else(|| Error::invalid("leaky_relu needs \"alpha\""))?,
            },
            other => return Err(Error::invalid(format!("unknown activation {other:?}"))),
        };
        NetworkSpec::new(r.widths, activation, r.bias)
    }
}

impl From<NetworkSpec> for SpecRepr {
    fn from(s: NetworkSpec) -> Self {
        let alpha = match s.activation {
            Activation::LeakyRelu { alpha } => Some(alpha),
            _ => None,
        };
        SpecRepr {
            widths: s.widths,
            activation: s.activation.name().to_string(),
            alpha,
            bias: s.bias,
        }
    }
}

/// Where one layer's blocks live inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBlocks {
    pub weight_offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub bias_offset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub layers: Vec<LayerBlocks>,
    pub len: usize,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, bias: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("a network needs at least input and output widths"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        activation.validate()?;
        Ok(NetworkSpec {
            widths,
            activation,
            bias,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn layout(&self) -> ParamLayout {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.depth());
        for w in self.widths.windows(2) {
            let (cols, rows) = (w[0], w[1]);
            let weight_offset = offset;
            offset += rows * cols;
            let bias_offset = self.bias.then(|| {
                let b = offset;
                offset += rows;
                b
            });
            layers.push(LayerBlocks {
                weight_offset,
                rows,
                cols,
                bias_offset,
            });
        }
        ParamLayout {
            layers,
            len: offset,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len
    }

    /// Parameters excluding biases.
    pub fn n_weights(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        let n = self.n_params();
        if theta.len() != n {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, network needs {n}",
                theta.len()
            )));
        }
        Ok(())
    }
}

/// Flat parameters together with the layout they follow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn new(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        spec.check_theta(&values)?;
        Ok(ParamVector {
            values,
            layout: spec.layout(),
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = spec.layout();
        ParamVector {
            values: vec![0.0; layout.len],
            layout,
        }
    }
}

/// One weight layer in structured form.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

pub fn unflatten(spec: &NetworkSpec, theta: &[f64]) -> Result<Vec<DenseLayer>> {
    spec.check_theta(theta)?;
    Ok(spec
        .layout()
        .layers
        .iter()
        .map(|b| DenseLayer {
            weight: DMatrix::from_row_slice(
                b.rows,
                b.cols,
                &theta[b.weight_offset..b.weight_offset + b.rows * b.cols],
            ),
            bias: b
                .bias_offset
                .map(|o| DVector::from_column_slice(&theta[o..o + b.rows])),
        })
        .collect())
}

pub fn flatten(spec: &NetworkSpec, layers: &[DenseLayer]) -> Result<Vec<f64>> {
    let layout = spec.layout();
    if layers.len() != layout.layers.len() {
        return Err(Error::shape("layer count does not match the network"));
    }
    let mut out = vec![0.0; layout.len];
    for (b, layer) in layout.layers.iter().zip(layers) {
        if layer.weight.shape() != (b.rows, b.cols) {
            return Err(Error::shape(format!(
                "weight block is {:?}, expected {:?}",
                layer.weight.shape(),
                (b.rows, b.cols)
            )));
        }
        for r in 0..b.rows {
            for c in 0..b.cols {
                out[b.weight_offset + r * b.cols + c] = layer.weight[(r, c)];
            }
        }
        match (b.bias_offset, &layer.bias) {
            (Some(o), Some(bias)) if bias.len() == b.rows => {
                out[o..o + b.rows].copy_from_slice(bias.as_slice());
            }
            (None, None) => {}
            _ => return Err(Error::shape("bias block does not match the network")),
        }
    }
    Ok(out)
}

/// Which linear piece of the activation each hidden unit used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationPattern {
    /// Multiplier on the non-positive branch.
    pub slope: f64,
    /// `on[l][i]` is true when hidden unit `i` of hidden layer `l` took the
    /// positive branch.
    pub on: Vec<Vec<bool>>,
}

impl ActivationPattern {
    pub fn multiplier(&self, layer: usize, unit: usize) -> f64 {
        if self.on[layer][unit] {
            1.0
        } else {
            self.slope
        }
    }

    pub fn multipliers(&self, layer: usize) -> Vec<f64> {
        (0..self.on[layer].len())
            .map(|i| self.multiplier(layer, i))
            .collect()
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.on.len()
    }
}

fn check_input(spec: &NetworkSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim() {
        return Err(Error::shape(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    Ok(())
}

fn layer_dd(theta: &[f64], b: &LayerBlocks, h: &[Dd]) -> Vec<Dd> {
    (0..b.rows)
        .map(|r| {
            let row = &theta[b.weight_offset + r * b.cols..b.weight_offset + (r + 1) * b.cols];
            let mut acc = match b.bias_offset {
                Some(o) => Dd::from_f64(theta[o + r]),
                None => Dd::ZERO,
            };
            for (hv, &w) in h.iter().zip(row) {
                acc = acc.fma_f64(*hv, w);
            }
            acc
        })
        .collect()
}

/// Evaluates the network at `x`, returning the output and the activation
/// pattern that produced it.
///
/// Arithmetic is carried in double-double precision and rounded once at the
/// output, so the result is the correctly rounded value of the exact network
/// function for all but pathologically cancelling inputs.
pub fn forward(spec: &NetworkSpec, theta: &[f64], x: &[f64]) -> Result<(Vec<f64>, ActivationPattern)> {
    spec.check_theta(theta)?;
    check_input(spec, x)?;
    let act = spec.activation();
    let layout = spec.layout();
    let mut h: Vec<Dd> = x.iter().map(|&v| Dd::from_f64(v)).collect();
    let mut on = Vec::with_capacity(spec.depth() - 1);
    let last = layout.layers.len() - 1;
    for (l, b) in layout.layers.iter().enumerate() {
        let mut z = layer_dd(theta, b, &h);
        if l < last {
            let flags: Vec<bool> = z
                .iter()
                .map(|v| matches!(act, Activation::Linear) || v.is_sign_positive_nonzero())
                .collect();
            let slope = act.negative_slope();
            for (v, &f) in z.iter_mut().zip(&flags) {
                if !f {
                    *v = v.mul_f64(slope);
                }
            }
            on.push(flags);
        }
        h = z;
    }
    let pattern = ActivationPattern {
        slope: act.negative_slope(),
        on,
    };
    Ok((h.into_iter().map(Dd::to_f64).collect(), pattern))
}

/// Evaluates the network with every hidden unit pinned to the branch
/// recorded in `pattern`. The result is affine in `x` and coincides with
/// [`forward`] wherever `forward` reports the same pattern.
pub fn forward_frozen(
    spec: &NetworkSpec,
    theta: &[f64],
    x: &[f64],
    pattern: &ActivationPattern,
) -> Result<Vec<f64>> {
    spec.check_theta(theta)?;
    check_input(spec, x)?;
    let layout = spec.layout();
    if pattern.on.len() != layout.layers.len() - 1 {
        return Err(Error::shape("pattern does not match the number of hidden layers"));
    }
    let mut h: Vec<Dd> = x.iter().map(|&v| Dd::from_f64(v)).collect();
    let last = layout.layers.len() - 1;
    for (l, b) in layout.layers.iter().enumerate() {
        let mut z = layer_dd(theta, b, &h);
        if l < last {
            if pattern.on[l].len() != z.len() {
                return Err(Error::shape("pattern width does not match the layer"));
            }
            for (i, v) in z.iter_mut().enumerate() {
                if !pattern.on[l][i] {
                    *v = v.mul_f64(pattern.slope);
                }
            }
        }
        h = z;
    }
    Ok(h.into_iter().map(Dd::to_f64).collect())
}

fn check_batch(spec: &NetworkSpec, inputs: &DMatrix<f64>) -> Result<()> {
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::shape(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

fn add_bias(z: &mut DMatrix<f64>, bias: &Option<DVector<f64>>) {
    if let Some(b) = bias {
        for mut col in z.column_iter_mut() {
            col += b;
        }
    }
}

/// Plain `f64` forward pass over a batch. `inputs` is `n x n_in`, the result
/// is `n x n_out`.
pub fn forward_batch(spec: &NetworkSpec, theta: &[f64], inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_batch(spec, inputs)?;
    let layers = unflatten(spec, theta)?;
    Ok(forward_layers(spec.activation(), &layers, inputs))
}

pub(crate) fn forward_layers(act: Activation, layers: &[DenseLayer], inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = inputs.transpose();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut z = &layer.weight * &h;
        add_bias(&mut z, &layer.bias);
        if l < last {
            z.apply(|v| *v = act.apply(*v));
        }
        h = z;
    }
    h.transpose()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Value and gradient of a loss defined on network outputs.
///
/// `loss` receives the `n x n_out` output matrix for `inputs` and returns the
/// scalar loss together with its derivative with respect to each output.
/// The gradient is returned in the flat parameter layout.
pub fn grad_logdensity<F>(
    spec: &NetworkSpec,
    theta: &[f64],
    inputs: &DMatrix<f64>,
    loss: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&DMatrix<f64>) -> (f64, DMatrix<f64>),
{
    check_batch(spec, inputs)?;
    spec.check_theta(theta)?;
    let act = spec.activation();
    let layout = spec.layout();
    let last = layout.layers.len() - 1;
    let n = inputs.nrows();

    // Feature-major buffers (`width x n`, one contiguous row per unit) so
    // every inner loop runs over the batch. hs[l] is the input to layer l and
    // zs keeps hidden pre-activations for the backward pass.
    let mut hs: Vec<Vec<f64>> = Vec::with_capacity(last + 1);
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(last);
    hs.push(inputs.as_slice().to_vec());
    let mut out = Vec::new();
    for (l, b) in layout.layers.iter().enumerate() {
        let w = &theta[b.weight_offset..b.weight_offset + b.rows * b.cols];
        let mut z = vec![0.0; b.rows * n];
        for (r, zr) in z.chunks_exact_mut(n).enumerate() {
            if let Some(o) = b.bias_offset {
                zr.fill(theta[o + r]);
            }
            for (c, h) in hs[l].chunks_exact(n).enumerate() {
                axpy(w[r * b.cols + c], h, zr);
            }
        }
        if l < last {
            hs.push(z.iter().map(|&v| act.apply(v)).collect());
            zs.push(z);
        } else {
            out = z;
        }
    }

    let n_out = layout.layers[last].rows;
    let outputs = DMatrix::from_column_slice(n, n_out, &out);
    let (value, d_out) = loss(&outputs);
    if d_out.shape() != outputs.shape() {
        return Err(Error::shape("loss gradient does not match the output shape"));
    }
    let mut delta = d_out.as_slice().to_vec();

    let mut grad = vec![0.0; layout.len];
    for l in (0..=last).rev() {
        let b = &layout.layers[l];
        let w = &theta[b.weight_offset..b.weight_offset + b.rows * b.cols];
        for (r, dr) in delta.chunks_exact(n).enumerate() {
            for (c, h) in hs[l].chunks_exact(n).enumerate() {
                grad[b.weight_offset + r * b.cols + c] = dot(dr, h);
            }
            if let Some(o) = b.bias_offset {
                grad[o + r] = dr.iter().sum();
            }
        }
        if l > 0 {
            let mut back = vec![0.0; b.cols * n];
            for (c, bc) in back.chunks_exact_mut(n).enumerate() {
                for (r, dr) in delta.chunks_exact(n).enumerate() {
                    axpy(w[r * b.cols + c], dr, bc);
                }
            }
            for (bv, &z) in back.iter_mut().zip(&zs[l - 1]) {
                *bv *= act.multiplier(z);
            }
            delta = back;
        }
    }

    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let index = grad.iter().position(|g| !g.is_finite());
        return Err(Error::non_finite("loss", index));
    }
    Ok((value, grad))
}

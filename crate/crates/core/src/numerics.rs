//! Dense matrices, feed-forward networks and their gradients.
//!
//! The encoder and the discriminator are both [`MlpParams`]. A forward pass
//! records a [`Tape`] of per-layer inputs and activations, which is all
//! [`mlp_backward`] needs to produce exact parameter gradients together with
//! the gradient with respect to the network input. The latter is what lets a
//! discriminator's gradient be chained into the encoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite matrix entry at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// New matrix holding the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Mean of every column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidInput(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: `activation(x · weightᵀ + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput(
                "network needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(
                    "MlpParams::new bias",
                    l.out_dim(),
                    format!("{} in layer {i}", l.bias.len()),
                ));
            }
            if l.bias.iter().any(|b| !b.is_finite()) || !l.weight.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite parameter in layer {i}"
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "MlpParams::new chain",
                    format!("layer {} input {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Scaled-uniform initialisation: weights in `[-s, s]` with
    /// `s = sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `dims` lists layer widths from input to output; hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "layer dimensions {dims:?} need at least two positive entries"
            )));
        }
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-s..=s))
                    .collect();
                Layer {
                    weight: Matrix {
                        rows: fan_out,
                        cols: fan_in,
                        data,
                    },
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n_layers { output } else { hidden },
                }
            })
            .collect();
        MlpParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    /// Serialises to the line-oriented text layout read by [`MlpParams::from_text`].
    ///
    /// ```text
    /// mlp <layer count>
    /// layer <out> <in> <activation>
    /// <out lines of `in` weights>
    /// <one line of `out` biases>
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = format!("mlp {}\n", self.layers.len());
        for l in &self.layers {
            s.push_str(&format!(
                "layer {} {} {}\n",
                l.out_dim(),
                l.in_dim(),
                l.activation
            ));
            for r in l.weight.iter_rows() {
                s.push_str(&join_floats(r));
                s.push('\n');
            }
            s.push_str(&join_floats(&l.bias));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, msg: &str| Error::InvalidInput(format!("line {}: {msg}", line + 1));
        let (ln, header) = lines.next().ok_or_else(|| bad(0, "empty parameter file"))?;
        let count: usize = header
            .strip_prefix("mlp ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(ln, "expected `mlp <layers>` header"))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, head) = lines
                .next()
                .ok_or_else(|| bad(ln, "missing layer header"))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "layer" {
                return Err(bad(ln, "expected `layer <out> <in> <activation>`"));
            }
            let out: usize = parts[1].parse().map_err(|_| bad(ln, "bad output width"))?;
            let inp: usize = parts[2].parse().map_err(|_| bad(ln, "bad input width"))?;
            let activation: Activation = parts[3].parse()?;
            let mut data = Vec::with_capacity(out * inp);
            for _ in 0..out {
                let (ln, row) = lines.next().ok_or_else(|| bad(ln, "missing weight row"))?;
                let row = parse_floats(row).map_err(|m| bad(ln, &m))?;
                if row.len() != inp {
                    return Err(bad(ln, "weight row width does not match header"));
                }
                data.extend(row);
            }
            let (ln, brow) = lines.next().ok_or_else(|| bad(ln, "missing bias row"))?;
            let bias = parse_floats(brow).map_err(|m| bad(ln, &m))?;
            if bias.len() != out {
                return Err(bad(ln, "bias width does not match header"));
            }
            layers.push(Layer {
                weight: Matrix::from_vec(out, inp, data)?,
                bias,
                activation,
            });
        }
        MlpParams::new(layers)
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

/// Per-layer weight and bias gradients, shaped like an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl GradBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradBundle {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn is_congruent(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(g, l)| {
                g.weight.rows == l.out_dim()
                    && g.weight.cols == l.in_dim()
                    && g.bias.len() == l.out_dim()
            })
    }

    fn check(&self, params: &MlpParams, context: &'static str) -> Result<()> {
        if self.is_congruent(params) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                format!("{:?}", params.dims()),
                "incongruent gradient",
            ))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(&l.bias))
            .all(|v| v.is_finite())
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn accumulate(&mut self, other: &GradBundle) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight
                .data
                .iter_mut()
                .zip(&b.weight.data)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    /// Flattened view: for each layer, weights (row-major) then biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Per-layer inputs and post-activation outputs recorded by [`mlp_forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("tape has at least one layer")
    }
}

pub fn mlp_forward(params: &MlpParams, batch: &Matrix) -> Result<(Matrix, Tape)> {
    mlp_forward_with(Exec::default(), params, batch)
}

pub fn mlp_forward_with(exec: Exec, params: &MlpParams, batch: &Matrix) -> Result<(Matrix, Tape)> {
    if batch.cols != params.input_dim() {
        return Err(Error::shape(
            "mlp_forward input",
            params.input_dim(),
            batch.cols,
        ));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut outputs = Vec::with_capacity(params.layers.len());
    let mut current = batch.clone();
    for layer in &params.layers {
        let next = dense_forward(exec, layer, &current);
        inputs.push(current);
        current = next;
        outputs.push(current.clone());
    }
    Ok((current, Tape { inputs, outputs }))
}

/// Forward pass without recording a tape.
pub fn mlp_predict(params: &MlpParams, batch: &Matrix) -> Result<Matrix> {
    if batch.cols != params.input_dim() {
        return Err(Error::shape(
            "mlp_predict input",
            params.input_dim(),
            batch.cols,
        ));
    }
    let exec = Exec::default();
    let mut current = dense_forward(exec, &params.layers[0], batch);
    for layer in &params.layers[1..] {
        current = dense_forward(exec, layer, &current);
    }
    Ok(current)
}

fn dense_forward(exec: Exec, layer: &Layer, x: &Matrix) -> Matrix {
    let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
    let mut y = Matrix::zeros(x.rows, out_dim);
    let exec = exec.for_work(x.rows * out_dim * in_dim);
    par::for_each_row(exec, &mut y.data, out_dim, |n, yrow| {
        let xrow = x.row(n);
        for (o, yo) in yrow.iter_mut().enumerate() {
            let w = layer.weight.row(o);
            let a = w.iter().zip(xrow).map(|(w, x)| w * x).sum::<f64>() + layer.bias[o];
            *yo = layer.activation.apply(a);
        }
    });
    y
}

/// Backpropagates `output_grad` (the gradient of a scalar with respect to
/// the network output) through the recorded pass.
///
/// Returns parameter gradients and the gradient with respect to the input
/// batch. No batch averaging happens here; scale `output_grad` accordingly.
pub fn mlp_backward(
    params: &MlpParams,
    tape: &Tape,
    output_grad: &Matrix,
) -> Result<(GradBundle, Matrix)> {
    mlp_backward_with(Exec::default(), params, tape, output_grad)
}

pub fn mlp_backward_with(
    exec: Exec,
    params: &MlpParams,
    tape: &Tape,
    output_grad: &Matrix,
) -> Result<(GradBundle, Matrix)> {
    if tape.inputs.len() != params.layers.len() {
        return Err(Error::shape(
            "mlp_backward tape",
            params.layers.len(),
            tape.inputs.len(),
        ));
    }
    for (i, (l, x)) in params.layers.iter().zip(&tape.inputs).enumerate() {
        if x.cols != l.in_dim() || tape.outputs[i].cols != l.out_dim() {
            return Err(Error::shape(
                "mlp_backward tape layer",
                format!("{}->{}", l.in_dim(), l.out_dim()),
                format!("{}->{}", x.cols, tape.outputs[i].cols),
            ));
        }
    }
    let out = tape.output();
    if output_grad.rows != out.rows || output_grad.cols != out.cols {
        return Err(Error::shape(
            "mlp_backward output_grad",
            format!("{}x{}", out.rows, out.cols),
            format!("{}x{}", output_grad.rows, output_grad.cols),
        ));
    }

    let mut grads = Vec::with_capacity(params.layers.len());
    let mut upstream = output_grad.clone();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let x = &tape.inputs[i];
        let y = &tape.outputs[i];
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let n = x.rows;
        let work = n * out_dim * in_dim;

        // delta = upstream ⊙ act'(y)
        let mut delta = upstream;
        for (d, &yv) in delta.data.iter_mut().zip(&y.data) {
            *d *= layer.activation.derivative_at_output(yv);
        }

        // dW[o] = Σ_n delta[n, o] · x[n]; the sum over n runs in sample order.
        let mut gw = Matrix::zeros(out_dim, in_dim);
        par::for_each_row(exec.for_work(work), &mut gw.data, in_dim, |o, grow| {
            for s in 0..n {
                let d = delta.get(s, o);
                if d != 0.0 {
                    for (g, xv) in grow.iter_mut().zip(x.row(s)) {
                        *g += d * xv;
                    }
                }
            }
        });
        let mut gb = vec![0.0; out_dim];
        for s in 0..n {
            for (g, d) in gb.iter_mut().zip(delta.row(s)) {
                *g += d;
            }
        }

        // dx[n] = Σ_o delta[n, o] · W[o]
        let mut dx = Matrix::zeros(n, in_dim);
        par::for_each_row(exec.for_work(work), &mut dx.data, in_dim, |s, dxrow| {
            for (o, &d) in delta.row(s).iter().enumerate() {
                if d != 0.0 {
                    for (g, w) in dxrow.iter_mut().zip(layer.weight.row(o)) {
                        *g += d * w;
                    }
                }
            }
        });

        grads.push(LayerGrad {
            weight: gw,
            bias: gb,
        });
        upstream = dx;
    }
    grads.reverse();
    Ok((GradBundle { layers: grads }, upstream))
}

/// Default step for [`finite_diff_grad`].
pub const FD_EPSILON: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every parameter.
pub fn finite_diff_grad<F>(params: &MlpParams, mut f: F, epsilon: f64) -> Result<GradBundle>
where
    F: FnMut(&MlpParams) -> f64,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut probe = params.clone();
    let mut grads = GradBundle::zeros_like(params);
    let mut eval = |p: &MlpParams, what: &str| -> Result<f64> {
        let v = f(p);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Oracle(format!(
                "scalar function returned {v} at {what}"
            )))
        }
    };
    for li in 0..params.layers.len() {
        for k in 0..params.layers[li].weight.data.len() {
            let orig = params.layers[li].weight.data[k];
            probe.layers[li].weight.data[k] = orig + epsilon;
            let plus = eval(&probe, "weight")?;
            probe.layers[li].weight.data[k] = orig - epsilon;
            let minus = eval(&probe, "weight")?;
            probe.layers[li].weight.data[k] = orig;
            grads.layers[li].weight.data[k] = (plus - minus) / (2.0 * epsilon);
        }
        for k in 0..params.layers[li].bias.len() {
            let orig = params.layers[li].bias[k];
            probe.layers[li].bias[k] = orig + epsilon;
            let plus = eval(&probe, "bias")?;
            probe.layers[li].bias[k] = orig - epsilon;
            let minus = eval(&probe, "bias")?;
            probe.layers[li].bias[k] = orig;
            grads.layers[li].bias[k] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(grads)
}

/// Central-difference gradient of `f` with respect to every input entry.
pub fn finite_diff_input_grad<F>(input: &Matrix, mut f: F, epsilon: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut probe = input.clone();
    let mut out = Matrix::zeros(input.rows, input.cols);
    for k in 0..input.data.len() {
        let orig = input.data[k];
        probe.data[k] = orig + epsilon;
        let plus = f(&probe);
        probe.data[k] = orig - epsilon;
        let minus = f(&probe);
        probe.data[k] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Oracle(format!(
                "scalar function non-finite at input entry {k}"
            )));
        }
        out.data[k] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(out)
}

/// Largest absolute difference scaled by the larger of the two infinity norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        }
    }
}

/// Momentum accumulators for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    velocity: GradBundle,
    lr: f64,
    momentum: f64,
}

impl OptState {
    pub fn new(params: &MlpParams, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidInput(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(OptState {
            velocity: GradBundle::zeros_like(params),
            lr,
            momentum,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &GradBundle {
        &self.velocity
    }

    /// In-place form of [`sgd_momentum_step`]: `v ← m·v + g; θ ← θ ± lr·v`.
    pub fn apply(
        &mut self,
        params: &mut MlpParams,
        grads: &GradBundle,
        dir: Direction,
    ) -> Result<()> {
        grads.check(params, "sgd_momentum_step grads")?;
        self.velocity.check(params, "sgd_momentum_step state")?;
        let step = dir.sign() * self.lr;
        for ((layer, g), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity.layers)
        {
            for ((p, g), v) in layer
                .weight
                .data
                .iter_mut()
                .zip(&g.weight.data)
                .zip(&mut v.weight.data)
            {
                *v = self.momentum * *v + g;
                *p += step * *v;
            }
            for ((p, g), v) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *v = self.momentum * *v + g;
                *p += step * *v;
            }
        }
        Ok(())
    }
}

/// One momentum step, returning the updated parameters and optimiser state.
pub fn sgd_momentum_step(
    params: &MlpParams,
    grads: &GradBundle,
    state: &OptState,
    dir: Direction,
) -> Result<(MlpParams, OptState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.apply(&mut p, grads, dir)?;
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: Vec<f64>, rows: usize, cols: usize, act: Activation) -> MlpParams {
        MlpParams::new(vec![Layer {
            weight: Matrix::from_vec(rows, cols, weight).unwrap(),
            bias: vec![0.0; rows],
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = single(vec![1.0, 0.0, 0.0, 1.0], 2, 2, Activation::Identity);
        let x = Matrix::from_rows(&[[0.3, -2.0]]).unwrap();
        let (y, _) = mlp_forward(&p, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_sigmoid_layer_outputs_half() {
        let p = single(vec![0.0; 6], 2, 3, Activation::Sigmoid);
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-9.0, 0.0, 4.0]]).unwrap();
        let (y, _) = mlp_forward(&p, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = single(vec![0.0; 6], 2, 3, Activation::Tanh);
        let x = Matrix::zeros(4, 2);
        assert!(matches!(mlp_forward(&p, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn broken_chain_is_rejected() {
        let l = |o, i| Layer {
            weight: Matrix::zeros(o, i),
            bias: vec![0.0; o],
            activation: Activation::Tanh,
        };
        assert!(MlpParams::new(vec![l(3, 2), l(1, 4)]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p =
            MlpParams::init(&[3, 5, 2], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]).unwrap();
        let (y, tape) = mlp_forward(&p, &x).unwrap();
        let (g, dx) = mlp_backward(&p, &tape, &Matrix::zeros(y.rows(), y.cols())).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(dx.max_abs(), 0.0);
    }

    #[test]
    fn backward_rejects_wrong_output_grad_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::init(&[3, 2], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        let (_, tape) = mlp_forward(&p, &Matrix::zeros(2, 3)).unwrap();
        assert!(mlp_backward(&p, &tape, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn init_respects_scale_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::init(
            &[10, 16, 2],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let s0 = (6.0f64 / 26.0).sqrt();
        assert!(p.layers()[0].weight.max_abs() <= s0);
        assert!(p.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(p.layers()[0].activation, Activation::Tanh);
        assert_eq!(p.layers()[1].activation, Activation::Identity);
        assert_eq!(p.dims(), vec![10, 16, 2]);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p =
            MlpParams::init(&[2, 3, 1], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        let g = finite_diff_grad(&p, |_| 4.2, FD_EPSILON).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn finite_diff_of_weight_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p =
            MlpParams::init(&[2, 3, 1], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        let g = finite_diff_grad(
            &p,
            |q| {
                q.layers()
                    .iter()
                    .map(|l| l.weight.data().iter().sum::<f64>())
                    .sum()
            },
            FD_EPSILON,
        )
        .unwrap();
        for l in &g.layers {
            assert!(l.weight.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
            assert!(l.bias.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn finite_diff_reports_non_finite_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(&[2, 1], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        assert!(matches!(
            finite_diff_grad(&p, |_| f64::NAN, FD_EPSILON),
            Err(Error::Oracle(_))
        ));
        assert!(finite_diff_grad(&p, |_| 0.0, 0.0).is_err());
    }

    #[test]
    fn plain_gradient_step() {
        let p = single(vec![0.0], 1, 1, Activation::Identity);
        let mut g = GradBundle::zeros_like(&p);
        g.layers[0].weight.data_mut()[0] = 1.0;
        let st = OptState::new(&p, 1.0, 0.0).unwrap();
        let (p2, _) = sgd_momentum_step(&p, &g, &st, Direction::Descend).unwrap();
        assert_eq!(p2.layers()[0].weight.get(0, 0), -1.0);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let p = single(vec![0.0], 1, 1, Activation::Identity);
        let mut g = GradBundle::zeros_like(&p);
        g.layers[0].weight.data_mut()[0] = 1.0;
        let st = OptState::new(&p, 1.0, 0.9).unwrap();
        let (p1, s1) = sgd_momentum_step(&p, &g, &st, Direction::Descend).unwrap();
        let (p2, _) = sgd_momentum_step(&p1, &g, &s1, Direction::Descend).unwrap();
        assert!((p2.layers()[0].weight.get(0, 0) + 2.9).abs() < 1e-15);
    }

    #[test]
    fn ascent_on_negative_parabola_converges() {
        let mut p = single(vec![0.5], 1, 1, Activation::Identity);
        let mut st = OptState::new(&p, 0.1, 0.5).unwrap();
        for _ in 0..100 {
            let theta = p.layers()[0].weight.get(0, 0);
            let mut g = GradBundle::zeros_like(&p);
            g.layers[0].weight.data_mut()[0] = -2.0 * theta;
            st.apply(&mut p, &g, Direction::Ascend).unwrap();
        }
        assert!(p.layers()[0].weight.get(0, 0).abs() < 1e-3);
    }

    #[test]
    fn optimiser_rejects_bad_hyperparameters() {
        let p = single(vec![0.0], 1, 1, Activation::Identity);
        assert!(OptState::new(&p, 0.0, 0.9).is_err());
        assert!(OptState::new(&p, 1e-3, 1.0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p =
            MlpParams::init(&[4, 3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let q = MlpParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, q);
        assert!(MlpParams::from_text("mlp 1\nlayer 1 2 tanh\n0.5\n0\n").is_err());
    }

    #[test]
    fn relative_error_scales_by_largest_entry() {
        assert_eq!(relative_error(&[2.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0, 1.0], &[2.0, 1.1]) - 0.05).abs() < 1e-12);
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{gemm, sigmoid, softmax_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Linear => x,
        }
    }

    fn apply_value(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }
}

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(
                "assign_flat",
                format!("{} values for {} parameters", flat.len(), self.param_count()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Gradients for a list of bound parameter vars, in binding order.
pub fn collect_grads(grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| grads.wrt(v)).collect()
}

/// Glorot-uniform weights `[fan_in, fan_out]`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.cols() {
            return Err(Error::dim(
                "Linear::new",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }
}

/// Feed-forward network; each layer carries its own activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    /// Wraps existing `(weight, bias, activation)` vars, e.g. slices of a flat parameter vector.
    pub fn from_layers(layers: Vec<(Var, Var, Activation)>) -> Self {
        Self { layers }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::dim(
                    format!("mlp layer {}", i + 1),
                    format!(
                        "input width {} but previous layer outputs {}",
                        pair[1].in_width(),
                        pair[0].out_width()
                    ),
                ));
            }
        }
        if layers.is_empty() {
            return Err(Error::arg("an MLP needs at least one layer"));
        }
        Ok(Self { layers })
    }

    /// `widths = [in, hidden..., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`. Weights are Glorot-uniform, biases zero.
    pub fn init(
        rng: &mut impl Rng,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear {
                weight: glorot(rng, w[0], w[1]),
                bias: Tensor::zeros(&[w[1]]),
                activation: if i == last { output } else { hidden },
            })
            .collect();
        Self { layers }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_width)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone()),
                        tape.leaf(l.bias.clone()),
                        l.activation,
                    )
                })
                .collect(),
        }
    }

    /// Tape-free forward pass over the rows of `x`.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if cur.cols() != layer.in_width() {
                return Err(layer_mismatch(i, layer.in_width(), cur.cols()));
            }
            let (m, k, n) = (cur.rows(), cur.cols(), layer.out_width());
            let mut out = vec![0.0; m * n];
            gemm(cur.data(), m, k, false, layer.weight.data(), k, n, false, &mut out, false);
            for (j, v) in out.iter_mut().enumerate() {
                *v = layer.activation.apply_value(*v + layer.bias.data()[j % n]);
            }
            cur = Tensor::matrix(m, n, out);
        }
        Ok(cur)
    }
}

fn layer_mismatch(layer: usize, expected: usize, got: usize) -> Error {
    Error::dim(
        format!("mlp layer {layer}"),
        format!("expected input width {expected}, got {got}"),
    )
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Applies a bound MLP to the rows of `x`.
pub fn mlp_forward(tape: &mut Tape, mlp: &BoundMlp, x: Var) -> Result<Var> {
    let mut cur = x;
    for (i, &(w, b, act)) in mlp.layers.iter().enumerate() {
        let expected = tape.value(w).rows();
        let got = tape.value(cur).cols();
        if expected != got {
            return Err(layer_mismatch(i, expected, got));
        }
        let z = tape.matmul(cur, w)?;
        let z = tape.add_row(z, b)?;
        cur = act.apply(tape, z);
    }
    Ok(cur)
}

/// LSTM cell weights with the four gates fused column-wise in the order
/// input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `[input, 4 * hidden]`
    pub w_input: Tensor,
    /// `[hidden, 4 * hidden]`
    pub w_hidden: Tensor,
    /// `[4 * hidden]`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

impl BoundLstm {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_input, self.w_hidden, self.bias]
    }
}

pub const GATES: usize = 4;

impl LstmParams {
    pub fn new(w_input: Tensor, w_hidden: Tensor, bias: Tensor) -> Result<Self> {
        let hidden = w_hidden.rows();
        if w_hidden.cols() != GATES * hidden
            || w_input.cols() != GATES * hidden
            || bias.len() != GATES * hidden
        {
            return Err(Error::dim(
                "LstmParams::new",
                format!(
                    "gate shapes disagree: input {:?}, hidden {:?}, bias {:?}",
                    w_input.shape(),
                    w_hidden.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(Self {
            w_input,
            w_hidden,
            bias,
        })
    }

    /// Glorot-uniform gate weights; forget-gate bias starts at 1.
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        let limit_x = (6.0 / (input + hidden) as f64).sqrt();
        let limit_h = (6.0 / (2 * hidden) as f64).sqrt();
        let mut sample = |n: usize, limit: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
        };
        let w_input = Tensor::matrix(input, GATES * hidden, sample(input * GATES * hidden, limit_x));
        let w_hidden =
            Tensor::matrix(hidden, GATES * hidden, sample(hidden * GATES * hidden, limit_h));
        let mut bias = Tensor::zeros(&[GATES * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[input, GATES * hidden]),
            w_hidden: Tensor::zeros(&[hidden, GATES * hidden]),
            bias: Tensor::zeros(&[GATES * hidden]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w_input.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLstm {
        BoundLstm {
            w_input: tape.leaf(self.w_input.clone()),
            w_hidden: tape.leaf(self.w_hidden.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    fn check_widths(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<()> {
        let hidden = self.hidden();
        if x.cols() != self.input_width() {
            return Err(Error::dim(
                "lstm_step",
                format!("input width {} vs {}", x.cols(), self.input_width()),
            ));
        }
        if h.cols() != hidden || c.cols() != hidden {
            return Err(Error::dim(
                "lstm_step",
                format!("state widths {}/{} vs hidden {hidden}", h.cols(), c.cols()),
            ));
        }
        if h.rows() != x.rows() || c.rows() != x.rows() {
            return Err(Error::dim("lstm_step", "row counts of x, h and c differ"));
        }
        Ok(())
    }

    /// Tape-free cell update over the rows of `x`; bit-identical to [`lstm_step`].
    pub fn step_values(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_widths(x, h, c)?;
        let (rows, hidden) = (x.rows(), self.hidden());
        let width = GATES * hidden;
        let mut gx = vec![0.0; rows * width];
        gemm(x.data(), rows, x.cols(), false, self.w_input.data(), x.cols(), width, false, &mut gx, false);
        let mut gh = vec![0.0; rows * width];
        gemm(h.data(), rows, hidden, false, self.w_hidden.data(), hidden, width, false, &mut gh, false);
        let mut h_out = vec![0.0; rows * hidden];
        let mut c_out = vec![0.0; rows * hidden];
        for r in 0..rows {
            let z = |k: usize| gx[r * width + k] + gh[r * width + k] + self.bias.data()[k];
            for j in 0..hidden {
                let i_gate = sigmoid(z(j));
                let f_gate = sigmoid(z(hidden + j));
                let g_gate = z(2 * hidden + j).tanh();
                let o_gate = sigmoid(z(3 * hidden + j));
                let c_new = f_gate * c.data()[r * hidden + j] + i_gate * g_gate;
                c_out[r * hidden + j] = c_new;
                h_out[r * hidden + j] = o_gate * c_new.tanh();
            }
        }
        Ok((
            Tensor::matrix(rows, hidden, h_out),
            Tensor::matrix(rows, hidden, c_out),
        ))
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_input, &self.w_hidden, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }
}

/// One LSTM cell update on the tape; each row of `x`, `h_prev`, `c_prev` is
/// an independent sequence sharing the same weights.
pub fn lstm_step(
    tape: &mut Tape,
    lstm: &BoundLstm,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.value(lstm.w_hidden).rows();
    if tape.value(lstm.w_input).rows() != tape.value(x).cols() {
        return Err(Error::dim(
            "lstm_step",
            format!(
                "input width {} vs {}",
                tape.value(x).cols(),
                tape.value(lstm.w_input).rows()
            ),
        ));
    }
    if tape.value(h_prev).cols() != hidden || tape.value(c_prev).cols() != hidden {
        return Err(Error::dim("lstm_step", "state width differs from hidden size"));
    }
    let zx = tape.matmul(x, lstm.w_input)?;
    let zh = tape.matmul(h_prev, lstm.w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, lstm.bias)?;
    let i = tape.slice_cols(z, 0, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.slice_cols(z, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f);
    let g = tape.slice_cols(z, 2 * hidden, 3 * hidden)?;
    let g = tape.tanh(g);
    let o = tape.slice_cols(z, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

/// Numerically stable softmax of a non-empty vector.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v.data(), &mut out);
    Tensor::new(v.shape().to_vec(), out)
}

pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// The label's probability was below `PROB_EPSILON` and got clamped.
    pub clamped: bool,
}

/// `-ln(probs[label])`, with the probability clamped at `PROB_EPSILON`.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<CrossEntropy> {
    let p = *probs.data().get(label).ok_or_else(|| {
        Error::arg(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    let clamped = p < PROB_EPSILON;
    Ok(CrossEntropy {
        loss: -p.max(PROB_EPSILON).ln(),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_rejects_mismatched_layers() {
        let a = Linear::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3]), Activation::Tanh).unwrap();
        let b = Linear::new(Tensor::zeros(&[4, 1]), Tensor::zeros(&[1]), Activation::Linear).unwrap();
        let err = MlpParams::new(vec![a, b]).unwrap_err();
        assert!(err.to_string().contains("mlp layer 1"), "{err}");
    }

    #[test]
    fn mlp_forward_names_the_layer_on_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpParams::init(&mut rng, &[3, 4, 2], Activation::Tanh, Activation::Linear);
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[1, 2]));
        let err = mlp_forward(&mut tape, &bound, x).unwrap_err();
        assert!(err.to_string().contains("mlp layer 0"), "{err}");
    }

    #[test]
    fn lstm_tape_and_value_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = LstmParams::init(&mut rng, 2, 5);
        let x = Tensor::matrix(3, 2, (0..6).map(|i| i as f64 * 0.3 - 0.7).collect());
        let h = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.37).sin()).collect());
        let c = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.11).cos()).collect());
        let (hv, cv) = params.step_values(&x, &h, &c).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (xv, hp, cp) = (tape.leaf(x), tape.leaf(h), tape.leaf(c));
        let (ht, ct) = lstm_step(&mut tape, &bound, xv, hp, cp).unwrap();
        assert_eq!(tape.value(ht), &hv);
        assert_eq!(tape.value(ct), &cv);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let ce = cross_entropy(&Tensor::vector(vec![1.0, 0.0]), 1).unwrap();
        assert!(ce.clamped);
        assert!((ce.loss - (-PROB_EPSILON.ln())).abs() < 1e-12);
        assert!(cross_entropy(&Tensor::vector(vec![1.0]), 1).is_err());
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax(&Tensor::vector(vec![])).is_err());
    }
}

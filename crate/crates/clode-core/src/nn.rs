//! Neural building blocks: dense MLP and a GRU cell.
//!
//! Weights initialize uniform in [-s, s] with s = 1/sqrt(fan_in); biases
//! start at zero. Hidden activations are tanh, outputs are linear.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ClodeError, Result};
use crate::tensor::{GradientTape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, t: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Tanh => t.tanh(),
            Activation::Identity => Ok(t.clone()),
        }
    }
}

fn uniform_weight(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

/// One dense layer: weight (out, in) and bias (out).
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully connected network. `dims` gives the width of every interface,
/// so `dims.len() - 1` weight layers chain end to end.
#[derive(Clone)]
pub struct MlpParams {
    layers: Vec<Linear>,
    activations: Vec<Activation>,
}

impl MlpParams {
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(ClodeError::InvalidArgument(format!(
                "mlp dims must chain at least in->out with nonzero widths, got {dims:?}"
            )));
        }
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        let mut activations = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(Linear {
                weight: uniform_weight(dims[i + 1], dims[i], dims[i], rng),
                bias: Tensor::zeros(&[dims[i + 1]]),
            });
            activations.push(if i + 1 < n_layers {
                Activation::Tanh
            } else {
                Activation::Identity
            });
        }
        Ok(MlpParams { layers, activations })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[0]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Forward pass for a single input (last dim = in_dim) or a batch of
    /// rows (2-D input, one sample per row).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match input.ndim() {
            1 => {
                if input.shape()[0] != self.in_dim() {
                    return Err(ClodeError::ShapeMismatch {
                        op: "mlp_forward".into(),
                        lhs: vec![self.in_dim()],
                        rhs: input.shape().to_vec(),
                    });
                }
                let mut h = input.clone();
                for (layer, act) in self.layers.iter().zip(&self.activations) {
                    h = act.apply(&layer.weight.matmul(&h)?.add(&layer.bias)?)?;
                }
                Ok(h)
            }
            2 => {
                let rows = input.shape()[0];
                let mut outs = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = input.slice(0, r, 1)?.reshape(&[input.shape()[1]])?;
                    outs.push(self.forward(&row)?);
                }
                let refs: Vec<&Tensor> = outs.iter().collect();
                Tensor::stack_rows(&refs)
            }
            _ => Err(ClodeError::InvalidArgument(format!(
                "mlp_forward expects rank 1 or 2 input, got shape {:?}",
                input.shape()
            ))),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(format!("{prefix}.layer{i}.weight"), &layer.weight);
            f(format!("{prefix}.layer{i}.bias"), &layer.bias);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.layer{i}.weight"), &mut layer.weight);
            f(format!("{prefix}.layer{i}.bias"), &mut layer.bias);
        }
    }

    pub(crate) fn watched(&self, tape: &GradientTape) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: tape.watch(&l.weight),
                    bias: tape.watch(&l.bias),
                })
                .collect(),
            activations: self.activations.clone(),
        }
    }
}

/// Gated recurrent unit parameters: update, reset, and candidate paths.
#[derive(Clone)]
pub struct GruParams {
    pub hidden_size: usize,
    pub w_update: Tensor,
    pub u_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
}

impl GruParams {
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 {
            return Err(ClodeError::InvalidArgument(
                "gru sizes must be nonzero".into(),
            ));
        }
        let w = |rng: &mut ChaCha8Rng| uniform_weight(hidden_size, input_size, input_size, rng);
        let u = |rng: &mut ChaCha8Rng| uniform_weight(hidden_size, hidden_size, hidden_size, rng);
        Ok(GruParams {
            hidden_size,
            w_update: w(rng),
            u_update: u(rng),
            b_update: Tensor::zeros(&[hidden_size]),
            w_reset: w(rng),
            u_reset: u(rng),
            b_reset: Tensor::zeros(&[hidden_size]),
            w_cand: w(rng),
            u_cand: u(rng),
            b_cand: Tensor::zeros(&[hidden_size]),
        })
    }

    pub fn input_size(&self) -> usize {
        self.w_update.shape()[1]
    }

    /// h' = (1 - u) .* h + u .* tanh(Wc x + Uc (r .* h) + bc)
    pub fn step(&self, hidden: &Tensor, input: &Tensor) -> Result<Tensor> {
        if hidden.shape() != [self.hidden_size] {
            return Err(ClodeError::ShapeMismatch {
                op: "gru_cell".into(),
                lhs: vec![self.hidden_size],
                rhs: hidden.shape().to_vec(),
            });
        }
        if input.shape() != [self.input_size()] {
            return Err(ClodeError::ShapeMismatch {
                op: "gru_cell".into(),
                lhs: vec![self.input_size()],
                rhs: input.shape().to_vec(),
            });
        }
        let update = self
            .w_update
            .matmul(input)?
            .add(&self.u_update.matmul(hidden)?)?
            .add(&self.b_update)?
            .sigmoid()?;
        let reset = self
            .w_reset
            .matmul(input)?
            .add(&self.u_reset.matmul(hidden)?)?
            .add(&self.b_reset)?
            .sigmoid()?;
        let cand = self
            .w_cand
            .matmul(input)?
            .add(&self.u_cand.matmul(&reset.mul(hidden)?)?)?
            .add(&self.b_cand)?
            .tanh()?;
        let keep = update.neg()?.add_scalar(1.0)?;
        keep.mul(hidden)?.add(&update.mul(&cand)?)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_update"), &self.w_update);
        f(format!("{prefix}.u_update"), &self.u_update);
        f(format!("{prefix}.b_update"), &self.b_update);
        f(format!("{prefix}.w_reset"), &self.w_reset);
        f(format!("{prefix}.u_reset"), &self.u_reset);
        f(format!("{prefix}.b_reset"), &self.b_reset);
        f(format!("{prefix}.w_cand"), &self.w_cand);
        f(format!("{prefix}.u_cand"), &self.u_cand);
        f(format!("{prefix}.b_cand"), &self.b_cand);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_update"), &mut self.w_update);
        f(format!("{prefix}.u_update"), &mut self.u_update);
        f(format!("{prefix}.b_update"), &mut self.b_update);
        f(format!("{prefix}.w_reset"), &mut self.w_reset);
        f(format!("{prefix}.u_reset"), &mut self.u_reset);
        f(format!("{prefix}.b_reset"), &mut self.b_reset);
        f(format!("{prefix}.w_cand"), &mut self.w_cand);
        f(format!("{prefix}.u_cand"), &mut self.u_cand);
        f(format!("{prefix}.b_cand"), &mut self.b_cand);
    }

    pub(crate) fn watched(&self, tape: &GradientTape) -> GruParams {
        GruParams {
            hidden_size: self.hidden_size,
            w_update: tape.watch(&self.w_update),
            u_update: tape.watch(&self.u_update),
            b_update: tape.watch(&self.b_update),
            w_reset: tape.watch(&self.w_reset),
            u_reset: tape.watch(&self.u_reset),
            b_reset: tape.watch(&self.b_reset),
            w_cand: tape.watch(&self.w_cand),
            u_cand: tape.watch(&self.u_cand),
            b_cand: tape.watch(&self.b_cand),
        }
    }
}

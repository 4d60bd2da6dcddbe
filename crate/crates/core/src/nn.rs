//! Parameterised building blocks shared by the models.

use rand::Rng;

use crate::tensor::{ParamId, ParamSet, Result, Tape, Tensor, Var};

/// Splits `total` into `parts` widths differing by at most one, larger first.
pub fn split_even(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// `x·W (+ b)` with `W` stored as `[d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = params.add_glorot(format!("{name}.w"), d_in, d_out, rng);
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    /// All-zero weights and bias.
    pub fn zeros(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = params.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => tape.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Two-layer perceptron `d → hidden → d_out` with a rectifier in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(params: &mut ParamSet, name: &str, d: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(params, &format!("{name}.up"), d, hidden, true, rng),
            down: Linear::new(params, &format!("{name}.down"), hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

/// Gathers rows of a matrix: `[n × d] → [rows.len() × d]`.
pub fn gather_rows(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var> {
    let d = tape.value(x).cols();
    let idx: Vec<usize> = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
    let flat = tape.pick(x, &idx)?;
    tape.reshape(flat, vec![rows.len(), d])
}

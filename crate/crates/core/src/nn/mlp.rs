//! Fully connected networks with a shared hidden activation and linear output.

use serde::{Deserialize, Serialize};

use super::params::{join, Binder, Parameterized};
use crate::adcore::{Array, Rng, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn apply_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
        }
    }
}

/// Uniform Glorot-style initialization in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.uniform_range(-limit, limit)).collect()
}

/// Multilayer perceptron. `sizes = [in, h1, ..., out]`; every hidden layer
/// uses the same activation and the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    weights: Vec<Array>, // layer i: [sizes[i+1], sizes[i]]
    biases: Vec<Array>,  // layer i: [sizes[i+1]]
}

/// Tape handles for one bound [`Mlp`].
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    pub fn new(sizes: &[usize], hidden: Activation, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::validation(format!(
                "mlp needs at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::validation(format!("mlp layer sizes must be positive: {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let data = glorot_uniform(rng, fan_in, fan_out, fan_in * fan_out);
            weights.push(Array::matrix(fan_out, fan_in, data)?);
            biases.push(Array::vector(vec![0.0; fan_out]));
        }
        Ok(Mlp { sizes: sizes.to_vec(), hidden, weights, biases })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().expect("validated: at least two sizes")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::validation(format!(
                "mlp input has {} entries, expected {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut cur = x.to_vec();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let rows = w.shape()[0];
            let cols = w.shape()[1];
            let mut next = b.data().to_vec();
            for r in 0..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += w.data()[r * cols + c] * cur[c];
                }
                next[r] += acc;
            }
            if i < last {
                for v in &mut next {
                    *v = self.hidden.apply(*v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> MlpVars {
        let mut vars = MlpVars { weights: Vec::new(), biases: Vec::new() };
        for (i, (w, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            vars.weights.push(b.leaf(prefix, &format!("w{i}"), w));
            vars.biases.push(b.leaf(prefix, &format!("b{i}"), bias));
        }
        vars
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let mut cur = x;
        let last = vars.weights.len() - 1;
        for (i, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            let wx = tape.matmul(w, cur)?;
            cur = tape.add(wx, b)?;
            if i < last {
                cur = self.hidden.apply_tape(tape, cur);
            }
        }
        Ok(cur)
    }
}

impl Parameterized for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            f(&join(prefix, &format!("w{i}")), w);
            f(&join(prefix, &format!("b{i}")), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        for (i, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            f(&join(prefix, &format!("w{i}")), w);
            f(&join(prefix, &format!("b{i}")), b);
        }
    }
}

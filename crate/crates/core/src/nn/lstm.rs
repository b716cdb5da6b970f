//! Stacked LSTM cells evaluated on the tape.
//!
//! Gate layout follows the common convention: the fused gate vector holds
//! input, forget, cell-candidate, and output blocks in that order, each of
//! width `hidden`. Recurrences only ever run under training or inference
//! graphs, so there is no plain (tapeless) evaluation path.

use super::params::{join, Binder, Parameterized};
use crate::adcore::{Array, Rng, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LstmLayer {
    input: usize,
    hidden: usize,
    w_ih: Array, // [4H, input]
    w_hh: Array, // [4H, H]
    b_ih: Array, // [4H]
    b_hh: Array, // [4H]
}

pub struct LstmLayerVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl LstmLayer {
    fn new(input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::validation("lstm layer sizes must be positive"));
        }
        // Uniform in ±1/sqrt(hidden) for all weights and biases.
        let limit = 1.0 / (hidden as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
        Ok(LstmLayer {
            input,
            hidden,
            w_ih: Array::matrix(4 * hidden, input, draw(4 * hidden * input))?,
            w_hh: Array::matrix(4 * hidden, hidden, draw(4 * hidden * hidden))?,
            b_ih: Array::vector(draw(4 * hidden)),
            b_hh: Array::vector(draw(4 * hidden)),
        })
    }

    fn bind(&self, b: &mut Binder, prefix: &str) -> LstmLayerVars {
        LstmLayerVars {
            w_ih: b.leaf(prefix, "w_ih", &self.w_ih),
            w_hh: b.leaf(prefix, "w_hh", &self.w_hh),
            b_ih: b.leaf(prefix, "b_ih", &self.b_ih),
            b_hh: b.leaf(prefix, "b_hh", &self.b_hh),
        }
    }

    /// One cell update: returns (h', c').
    fn step_tape(
        &self,
        tape: &mut Tape,
        vars: &LstmLayerVars,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hdim = self.hidden;
        let wx = tape.matmul(vars.w_ih, x)?;
        let wh = tape.matmul(vars.w_hh, h)?;
        let s1 = tape.add(wx, vars.b_ih)?;
        let s2 = tape.add(wh, vars.b_hh)?;
        let gates = tape.add(s1, s2)?; // [4H]

        let gi = tape.slice(gates, 0, hdim)?;
        let gf = tape.slice(gates, hdim, 2 * hdim)?;
        let gg = tape.slice(gates, 2 * hdim, 3 * hdim)?;
        let go = tape.slice(gates, 3 * hdim, 4 * hdim)?;

        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);

        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

impl Parameterized for LstmLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        f(&join(prefix, "w_ih"), &self.w_ih);
        f(&join(prefix, "w_hh"), &self.w_hh);
        f(&join(prefix, "b_ih"), &self.b_ih);
        f(&join(prefix, "b_hh"), &self.b_hh);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "b_ih"), &mut self.b_ih);
        f(&join(prefix, "b_hh"), &mut self.b_hh);
    }
}

/// A stack of LSTM layers; the output of layer l feeds layer l+1.
#[derive(Debug, Clone)]
pub struct LstmStack {
    layers: Vec<LstmLayer>,
}

pub struct LstmStackVars {
    pub layers: Vec<LstmLayerVars>,
}

/// Per-layer (h, c) recurrent state on the tape.
pub type LstmState = Vec<(Var, Var)>;

impl LstmStack {
    pub fn new(input: usize, hidden: usize, n_layers: usize, rng: &mut Rng) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::validation("lstm stack needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let d_in = if l == 0 { input } else { hidden };
            layers.push(LstmLayer::new(d_in, hidden, rng)?);
        }
        Ok(LstmStack { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> LstmStackVars {
        LstmStackVars {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.bind(b, &join(prefix, &format!("l{l}"))))
                .collect(),
        }
    }

    /// All-zero initial (h, c) for every layer, as constants on the tape.
    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        self.layers
            .iter()
            .map(|layer| {
                let h = tape.constant(Array::vector(vec![0.0; layer.hidden]));
                let c = tape.constant(Array::vector(vec![0.0; layer.hidden]));
                (h, c)
            })
            .collect()
    }

    /// Advance the whole stack one step; `state` is updated in place and the
    /// top layer's new hidden vector is returned.
    pub fn step_tape(
        &self,
        tape: &mut Tape,
        vars: &LstmStackVars,
        x: Var,
        state: &mut LstmState,
    ) -> Result<Var> {
        if state.len() != self.layers.len() {
            return Err(Error::validation(format!(
                "lstm state has {} layers, stack has {}",
                state.len(),
                self.layers.len()
            )));
        }
        let mut layer_input = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let (h, c) = state[l];
            let (h2, c2) = layer.step_tape(tape, &vars.layers[l], layer_input, h, c)?;
            state[l] = (h2, c2);
            layer_input = h2;
        }
        Ok(layer_input)
    }
}

impl Parameterized for LstmStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("l{l}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("l{l}")), f);
        }
    }
}

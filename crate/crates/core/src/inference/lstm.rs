//! Bidirectional-LSTM posterior networks with auxiliary initialization.
//!
//! Per sequence the machinery runs in three stages, all on the tape:
//! 1. every (imputed) observation is passed through a shared encoder;
//! 2. auxiliary LSTMs digest a leading segment (forward) and a trailing
//!    segment (backward), producing the initial state estimate `z0` and the
//!    initial recurrent states of both main LSTMs;
//! 3. the forward recurrence consumes the encoding of the previous
//!    observation, the backward recurrence consumes the forward hidden state
//!    concatenated with the current encoding, and a decoder maps
//!    `(prior mean, h_fwd, h_bwd)` to the posterior of each step.
//!
//! The decoder emits a mean only (deterministic variant) or a mean plus a raw
//! variance passed through the shared positive transform (variational).

use serde::{Deserialize, Serialize};

use crate::adcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, Binder, LstmStack, LstmStackVars, LstmState, Mlp, MlpVars, Parameterized};
use crate::observation::ObservationSeries;
use crate::prior::variance_transform_tape;
use crate::adcore::Rng;

/// Both main and auxiliary recurrences are two-layer stacks.
pub const LSTM_LAYERS: usize = 2;

/// Architecture description for one inference network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmInferenceConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub hidden: usize,
    /// Full encoder size list, `[d_x, ..., enc_out]`.
    pub enc_sizes: Vec<usize>,
    pub enc_activation: Activation,
    /// Hidden layers of the decoder (input and output sizes are derived).
    pub dec_hidden: Vec<usize>,
    pub dec_activation: Activation,
    /// Variational networks carry a variance head; deterministic ones don't.
    pub variational: bool,
    /// Leading/trailing observation count consumed by the auxiliary nets.
    pub seg_len: usize,
}

impl LstmInferenceConfig {
    /// Three-dimensional chaotic benchmark preset: hidden 9, encoder
    /// [3,7,3] ReLU, decoder [21,7,6] (variational) or [21,7,3].
    pub fn l63(variational: bool) -> Self {
        LstmInferenceConfig {
            d_x: 3,
            d_z: 3,
            hidden: 9,
            enc_sizes: vec![3, 7, 3],
            enc_activation: Activation::Relu,
            dec_hidden: vec![7],
            dec_activation: Activation::Relu,
            variational,
            seg_len: 10,
        }
    }

    /// Forty-dimensional benchmark preset: hidden 80, encoder [40,80,40],
    /// decoder [200,80,40].
    pub fn l96() -> Self {
        LstmInferenceConfig {
            d_x: 40,
            d_z: 40,
            hidden: 80,
            enc_sizes: vec![40, 80, 40],
            enc_activation: Activation::Relu,
            dec_hidden: vec![80],
            dec_activation: Activation::Relu,
            variational: false,
            seg_len: 10,
        }
    }

    /// High-dimensional projected observations of a three-dimensional state:
    /// sigmoid encoder [128,64,32,3]; the state-space decoder stays small.
    pub fn l63_legendre() -> Self {
        LstmInferenceConfig {
            d_x: 128,
            d_z: 3,
            hidden: 9,
            enc_sizes: vec![128, 64, 32, 3],
            enc_activation: Activation::Sigmoid,
            dec_hidden: vec![7],
            dec_activation: Activation::Relu,
            variational: false,
            seg_len: 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.enc_sizes.len() < 2 {
            return Err(Error::validation("encoder needs at least input and output sizes"));
        }
        if self.enc_sizes[0] != self.d_x {
            return Err(Error::validation(format!(
                "encoder consumes {}-vectors but observations have dimension {}",
                self.enc_sizes[0], self.d_x
            )));
        }
        if self.d_z == 0 || self.hidden == 0 || self.seg_len == 0 {
            return Err(Error::validation(
                "state, hidden, and segment sizes must be positive",
            ));
        }
        Ok(())
    }

    fn enc_out(&self) -> usize {
        *self.enc_sizes.last().expect("validated: nonempty")
    }

    fn dec_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.d_z + 2 * self.hidden];
        sizes.extend_from_slice(&self.dec_hidden);
        sizes.push(if self.variational { 2 * self.d_z } else { self.d_z });
        sizes
    }
}

/// The posterior networks of one model configuration.
#[derive(Debug, Clone)]
pub struct LstmInference {
    cfg: LstmInferenceConfig,
    enc: Mlp,
    fwd: LstmStack,
    bwd: LstmStack,
    dec: Mlp,
    fwd_aux: LstmStack,
    bwd_aux: LstmStack,
    z0_head: Mlp,
}

pub struct LstmInferenceVars {
    pub enc: MlpVars,
    pub fwd: LstmStackVars,
    pub bwd: LstmStackVars,
    pub dec: MlpVars,
    pub fwd_aux: LstmStackVars,
    pub bwd_aux: LstmStackVars,
    pub z0_head: MlpVars,
}

/// Everything the sequential posterior loop needs: the initial state estimate
/// and both hidden-state tracks. `h_fwd[i]` and `h_bwd[i]` belong to time
/// step `i + 1`; step 0 is covered by `z0`.
pub struct PosteriorFeatures {
    pub z0: Var,
    pub h_fwd: Vec<Var>,
    pub h_bwd: Vec<Var>,
}

/// Per-step posterior: a Gaussian for variational networks, a point estimate
/// for deterministic ones.
pub enum PosteriorStep {
    Gaussian { mean: Var, var: Var },
    Point { mean: Var },
}

impl PosteriorStep {
    pub fn mean(&self) -> Var {
        match self {
            PosteriorStep::Gaussian { mean, .. } | PosteriorStep::Point { mean } => *mean,
        }
    }
}

impl LstmInference {
    pub fn new(cfg: LstmInferenceConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let enc = Mlp::new(&cfg.enc_sizes, cfg.enc_activation, rng)?;
        let enc_out = cfg.enc_out();
        let fwd = LstmStack::new(enc_out, cfg.hidden, LSTM_LAYERS, rng)?;
        let bwd = LstmStack::new(cfg.hidden + enc_out, cfg.hidden, LSTM_LAYERS, rng)?;
        let dec = Mlp::new(&cfg.dec_sizes(), cfg.dec_activation, rng)?;
        let fwd_aux = LstmStack::new(enc_out, cfg.hidden, LSTM_LAYERS, rng)?;
        let bwd_aux = LstmStack::new(enc_out, cfg.hidden, LSTM_LAYERS, rng)?;
        let z0_head = Mlp::new(&[cfg.hidden, cfg.d_z], Activation::Relu, rng)?;
        Ok(LstmInference { cfg, enc, fwd, bwd, dec, fwd_aux, bwd_aux, z0_head })
    }

    pub fn config(&self) -> &LstmInferenceConfig {
        &self.cfg
    }

    pub fn is_variational(&self) -> bool {
        self.cfg.variational
    }

    pub fn d_z(&self) -> usize {
        self.cfg.d_z
    }

    pub fn seg_len(&self) -> usize {
        self.cfg.seg_len
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> LstmInferenceVars {
        LstmInferenceVars {
            enc: self.enc.bind(b, &join(prefix, "enc")),
            fwd: self.fwd.bind(b, &join(prefix, "fwd")),
            bwd: self.bwd.bind(b, &join(prefix, "bwd")),
            dec: self.dec.bind(b, &join(prefix, "dec")),
            fwd_aux: self.fwd_aux.bind(b, &join(prefix, "fwd_aux")),
            bwd_aux: self.bwd_aux.bind(b, &join(prefix, "bwd_aux")),
            z0_head: self.z0_head.bind(b, &join(prefix, "z0_head")),
        }
    }

    /// Impute missing entries, then encode every observation.
    fn encode_series(
        &self,
        tape: &mut Tape,
        vars: &LstmInferenceVars,
        obs: &ObservationSeries,
    ) -> Result<Vec<Var>> {
        if obs.dim() != self.cfg.d_x {
            return Err(Error::validation(format!(
                "observations have dimension {}, network expects {}",
                obs.dim(),
                self.cfg.d_x
            )));
        }
        let imputed = obs.imputed_values();
        imputed
            .into_iter()
            .map(|row| {
                let x = tape.constant(Array::vector(row));
                self.enc.forward_tape(tape, &vars.enc, x)
            })
            .collect()
    }

    /// Run the auxiliary nets and both recurrences over a whole series.
    pub fn posterior_features(
        &self,
        tape: &mut Tape,
        vars: &LstmInferenceVars,
        obs: &ObservationSeries,
    ) -> Result<PosteriorFeatures> {
        let len = obs.len();
        let seg = self.cfg.seg_len;
        if len < 2 * seg || len < 2 {
            return Err(Error::validation(format!(
                "series of length {len} is too short for two segments of {seg}"
            )));
        }
        let encoded = self.encode_series(tape, vars, obs)?;

        // leading segment → z0 and the forward LSTM's initial state
        let mut fwd_state: LstmState = self.fwd_aux.zero_state(tape);
        let mut top = encoded[0];
        for &e in encoded.iter().take(seg) {
            top = self.fwd_aux.step_tape(tape, &vars.fwd_aux, e, &mut fwd_state)?;
        }
        let z0 = self.z0_head.forward_tape(tape, &vars.z0_head, top)?;

        // trailing segment, reversed → the backward LSTM's initial state
        let mut bwd_state: LstmState = self.bwd_aux.zero_state(tape);
        for &e in encoded.iter().skip(len - seg).rev() {
            self.bwd_aux.step_tape(tape, &vars.bwd_aux, e, &mut bwd_state)?;
        }

        // forward track: step k sees the encoding of observation k−1
        let mut h_fwd = Vec::with_capacity(len - 1);
        for &e in encoded.iter().take(len - 1) {
            let h = self.fwd.step_tape(tape, &vars.fwd, e, &mut fwd_state)?;
            h_fwd.push(h);
        }

        // backward track: step k sees (h_fwd_k, encoding of observation k)
        let mut h_bwd_rev = Vec::with_capacity(len - 1);
        for k in (1..len).rev() {
            let input = tape.concat(&[h_fwd[k - 1], encoded[k]])?;
            let h = self.bwd.step_tape(tape, &vars.bwd, input, &mut bwd_state)?;
            h_bwd_rev.push(h);
        }
        h_bwd_rev.reverse();

        Ok(PosteriorFeatures { z0, h_fwd, h_bwd: h_bwd_rev })
    }

    /// Decode one step's posterior from the prior mean and hidden states.
    pub fn decode(
        &self,
        tape: &mut Tape,
        vars: &LstmInferenceVars,
        prior_mean: Var,
        h_fwd: Var,
        h_bwd: Var,
    ) -> Result<PosteriorStep> {
        let input = tape.concat(&[prior_mean, h_fwd, h_bwd])?;
        let out = self.dec.forward_tape(tape, &vars.dec, input)?;
        let d_z = self.cfg.d_z;
        if self.cfg.variational {
            let mean = tape.slice(out, 0, d_z)?;
            let raw = tape.slice(out, d_z, 2 * d_z)?;
            let var = variance_transform_tape(tape, raw, d_z)?;
            Ok(PosteriorStep::Gaussian { mean, var })
        } else {
            Ok(PosteriorStep::Point { mean: out })
        }
    }
}

impl Parameterized for LstmInference {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        self.enc.visit(&join(prefix, "enc"), f);
        self.fwd.visit(&join(prefix, "fwd"), f);
        self.bwd.visit(&join(prefix, "bwd"), f);
        self.dec.visit(&join(prefix, "dec"), f);
        self.fwd_aux.visit(&join(prefix, "fwd_aux"), f);
        self.bwd_aux.visit(&join(prefix, "bwd_aux"), f);
        self.z0_head.visit(&join(prefix, "z0_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        self.enc.visit_mut(&join(prefix, "enc"), f);
        self.fwd.visit_mut(&join(prefix, "fwd"), f);
        self.bwd.visit_mut(&join(prefix, "bwd"), f);
        self.dec.visit_mut(&join(prefix, "dec"), f);
        self.fwd_aux.visit_mut(&join(prefix, "fwd_aux"), f);
        self.bwd_aux.visit_mut(&join(prefix, "bwd_aux"), f);
        self.z0_head.visit_mut(&join(prefix, "z0_head"), f);
    }
}

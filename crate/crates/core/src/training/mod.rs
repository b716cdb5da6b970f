//! Objectives and optimization drivers.
//!
//! Three losses over a whole series share the same horizon schedule: step `k`
//! is predicted one step ahead from `z_{k−1}` while `k < n`, and `n` steps
//! ahead from `z_{k−n}` once `k ≥ n`.
//!
//! * [`loss_determ`] — weighted squared observation error plus squared
//!   dynamical residuals (constant-covariance limit, lower is better);
//! * [`loss_map`] — negated joint log-density at the posterior means, with a
//!   flat improper density on the initial state;
//! * [`elbo_pass`] — a single-sample reparameterized estimate of the negated
//!   evidence lower bound, sampling ancestrally so that later prior means are
//!   functions of earlier samples.
//!
//! Two drivers optimize them: [`train_random_nstep`] draws a fresh horizon
//! `n ~ U{1..n_step_max}` per gradient step and updates generative and
//! inference parameters jointly; [`train_em_enks`] alternates a smoother pass
//! (posterior ensemble means) with a block of gradient steps on the
//! generative parameters only.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adcore::{sample_gaussian, Array, Rng, Tape, Var};
use crate::error::{Error, Result};
use crate::inference::{
    enks_smooth, EnksConfig, LstmInference, LstmInferenceVars, PosteriorStep,
};
use crate::nn::{
    apply_updates, clip_global_norm, join, named_gradients, Adam, Binder, Parameterized,
};
use crate::observation::ObservationSeries;
use crate::prior::{
    emission_logpdf, flow_n_tape, transition_logpdf, GenerativeModel, GenerativeVars,
};

const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

/// Retries of one gradient step (with learning-rate halving) before failing.
const MAX_RETRIES: usize = 3;

/// Gradient steps per smoother cycle in the alternated driver.
pub const EM_M_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Elbo,
    Map,
    Determ,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Elbo => "elbo",
            Objective::Map => "map",
            Objective::Determ => "determ",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceKind {
    Enks,
    Lstm,
}

impl InferenceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InferenceKind::Enks => "enks",
            InferenceKind::Lstm => "lstm",
        }
    }
}

fn default_n_step_max() -> usize {
    4
}
fn default_lambda() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_clip_norm() -> f64 {
    10.0
}
fn default_batch_size() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub inference: InferenceKind,
    #[serde(default = "default_n_step_max")]
    pub n_step_max: usize,
    /// Weight of the observation term in the deterministic loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    pub epochs: usize,
    /// Sequences averaged into one gradient step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_step_max < 1 {
            return Err(Error::validation("n_step_max must be at least 1"));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::validation("epochs and batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::validation("gradient clip norm must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::validation("observation weight must be non-negative"));
        }
        let pair_ok = matches!(
            (self.objective, self.inference),
            (Objective::Determ, InferenceKind::Enks)
                | (Objective::Determ, InferenceKind::Lstm)
                | (Objective::Map, InferenceKind::Lstm)
                | (Objective::Elbo, InferenceKind::Lstm)
        );
        if !pair_ok {
            return Err(Error::validation(format!(
                "objective {} cannot be paired with {} inference",
                self.objective.as_str(),
                self.inference.as_str()
            )));
        }
        Ok(())
    }
}

/// A generative model and its amortized inference networks, trained jointly.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub gen: GenerativeModel,
    pub inf: LstmInference,
}

impl JointModel {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.inf.d_z() != self.gen.d_z() {
            return Err(Error::validation(format!(
                "inference networks produce {}-dimensional states, model expects {}",
                self.inf.d_z(),
                self.gen.d_z()
            )));
        }
        if self.inf.config().d_x != self.gen.d_x() {
            return Err(Error::validation(format!(
                "inference networks read {}-dimensional observations, model emits {}",
                self.inf.config().d_x,
                self.gen.d_x()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, b: &mut Binder) -> (GenerativeVars, LstmInferenceVars) {
        (self.gen.bind(b, "gen"), self.inf.bind(b, "inf"))
    }
}

impl Parameterized for JointModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        self.gen.visit(&join(prefix, "gen"), f);
        self.inf.visit(&join(prefix, "inf"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        self.gen.visit_mut(&join(prefix, "gen"), f);
        self.inf.visit_mut(&join(prefix, "inf"), f);
    }
}

/// Horizon of the prior for step `k`: one step until the `n`-step window has
/// enough history, `n` steps afterwards.
fn schedule_lag(k: usize, n: usize) -> usize {
    if k < n {
        1
    } else {
        n
    }
}

/// log N(x; mean, diag var) on the tape.
fn gaussian_logpdf(tape: &mut Tape, x: Var, mean: Var, var: Var) -> Result<Var> {
    let d = tape.value(x).len();
    let diff = tape.sub(x, mean)?;
    let sq = tape.square(diff);
    let ratio = tape.div(sq, var)?;
    let ln_var = tape.log(var)?;
    let terms = tape.add(ratio, ln_var)?;
    let s = tape.sum(terms);
    let c = tape.constant_scalar(d as f64 * LN_2PI);
    let tot = tape.add(s, c)?;
    Ok(tape.scalar_mul(-0.5, tot))
}

/// ‖(H(z) − x) ⊙ mask‖²: squared error over observed components only.
/// The mask enters as a constant 0/1 gate, so masked entries contribute
/// exactly zero to the value and to every gradient.
fn masked_sq_err(
    tape: &mut Tape,
    model: &GenerativeModel,
    vars: &GenerativeVars,
    z: Var,
    x: &[f64],
    mask: &[bool],
) -> Result<Var> {
    let hx = model.emission.observe_tape(tape, &vars.emission, z)?;
    let x_const = tape.constant(Array::vector(x.to_vec()));
    let diff = tape.sub(hx, x_const)?;
    let gate =
        tape.constant(Array::vector(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()));
    let gated = tape.mul(diff, gate)?;
    let sq = tape.square(gated);
    Ok(tape.sum(sq))
}

fn check_series(z_states: &[Var], obs: &ObservationSeries, n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::validation("prediction horizon must be at least 1"));
    }
    if z_states.len() != obs.len() {
        return Err(Error::validation(format!(
            "{} posterior states for {} observations",
            z_states.len(),
            obs.len()
        )));
    }
    if obs.len() < 2 {
        return Err(Error::validation("a series needs at least two steps to train on"));
    }
    Ok(())
}

/// Constant-covariance objective: λ·Σ_k observation error + Σ_k dynamical
/// residual under the horizon schedule. Lower is better; zero iff the states
/// reproduce the observations and flow exactly.
pub fn loss_determ(
    tape: &mut Tape,
    model: &GenerativeModel,
    vars: &GenerativeVars,
    z_states: &[Var],
    obs: &ObservationSeries,
    n: usize,
    lambda: f64,
) -> Result<Var> {
    check_series(z_states, obs, n)?;
    let mut obs_term = tape.constant_scalar(0.0);
    for (k, z) in z_states.iter().enumerate() {
        let e = masked_sq_err(tape, model, vars, *z, &obs.values[k], &obs.mask[k])?;
        obs_term = tape.add(obs_term, e)?;
    }
    let mut dyn_term = tape.constant_scalar(0.0);
    for k in 1..z_states.len() {
        let lag = schedule_lag(k, n);
        let pred = flow_n_tape(tape, &model.binn, &vars.binn, z_states[k - lag], lag, model.delta)?;
        let diff = tape.sub(z_states[k], pred)?;
        let sq = tape.square(diff);
        let s = tape.sum(sq);
        dyn_term = tape.add(dyn_term, s)?;
    }
    let weighted = tape.scalar_mul(lambda, obs_term);
    tape.add(weighted, dyn_term)
}

/// Negated joint log-density at the posterior means: emission terms at every
/// step plus transition terms under the horizon schedule. The initial state
/// carries an improper flat density and contributes nothing.
pub fn loss_map(
    tape: &mut Tape,
    model: &GenerativeModel,
    vars: &GenerativeVars,
    z_states: &[Var],
    obs: &ObservationSeries,
    n: usize,
) -> Result<Var> {
    check_series(z_states, obs, n)?;
    let varnet = model
        .varnet
        .as_ref()
        .ok_or_else(|| Error::validation("this objective needs a transition covariance network"))?;
    let varnet_vars = vars
        .varnet
        .as_ref()
        .ok_or_else(|| Error::validation("transition covariance network is unbound"))?;
    let mut acc = tape.constant_scalar(0.0);
    for (k, z) in z_states.iter().enumerate() {
        let e = emission_logpdf(tape, &model.emission, &vars.emission, *z, &obs.values[k], &obs.mask[k])?;
        acc = tape.add(acc, e)?;
    }
    for k in 1..z_states.len() {
        let lag = schedule_lag(k, n);
        let t = transition_logpdf(
            tape,
            &model.binn,
            &vars.binn,
            varnet,
            varnet_vars,
            z_states[k - lag],
            z_states[k],
            lag,
            model.delta,
        )?;
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scalar_mul(-1.0, acc))
}

/// How the initial state enters the variational estimate.
pub enum ElboInit {
    /// A point estimate (amortized initialization); no density terms.
    Point(Var),
    /// Draw z₀ ~ N(q_mean, q_var) and score log p₀(z₀) − log q₀(z₀).
    Random { q_mean: Var, q_var: Var, p_mean: Var, p_var: Var },
}

/// Single-sample reparameterized estimate of the negated evidence lower
/// bound. `q_step(tape, k, prior_mean)` must return the posterior mean and
/// variance of step `k`; sampling is ancestral, so the prior mean handed to
/// `q_step` is computed from earlier *samples* under the horizon schedule.
#[allow(clippy::too_many_arguments)]
pub fn elbo_pass<Q>(
    tape: &mut Tape,
    model: &GenerativeModel,
    vars: &GenerativeVars,
    obs: &ObservationSeries,
    n: usize,
    init: ElboInit,
    q_step: &mut Q,
    rng: &mut Rng,
) -> Result<Var>
where
    Q: FnMut(&mut Tape, usize, Var) -> Result<(Var, Var)>,
{
    if obs.len() < 2 {
        return Err(Error::validation("a series needs at least two steps to train on"));
    }
    let varnet = model
        .varnet
        .as_ref()
        .ok_or_else(|| Error::validation("this objective needs a transition covariance network"))?;
    let varnet_vars = vars
        .varnet
        .as_ref()
        .ok_or_else(|| Error::validation("transition covariance network is unbound"))?;

    let mut acc = tape.constant_scalar(0.0);
    let z0 = match init {
        ElboInit::Point(z) => z,
        ElboInit::Random { q_mean, q_var, p_mean, p_var } => {
            let z = sample_gaussian(tape, rng, q_mean, q_var)?;
            let lp = gaussian_logpdf(tape, z, p_mean, p_var)?;
            let lq = gaussian_logpdf(tape, z, q_mean, q_var)?;
            acc = tape.add(acc, lp)?;
            acc = tape.sub(acc, lq)?;
            z
        }
    };
    let e0 = emission_logpdf(tape, &model.emission, &vars.emission, z0, &obs.values[0], &obs.mask[0])?;
    acc = tape.add(acc, e0)?;

    let mut samples = Vec::with_capacity(obs.len());
    samples.push(z0);
    for k in 1..obs.len() {
        let lag = schedule_lag(k, n);
        let base = samples[k - lag];
        let prior_mean = flow_n_tape(tape, &model.binn, &vars.binn, base, lag, model.delta)?;
        let (q_mean, q_var) = q_step(tape, k, prior_mean)?;
        let z = sample_gaussian(tape, rng, q_mean, q_var)?;
        let lt = transition_logpdf(
            tape,
            &model.binn,
            &vars.binn,
            varnet,
            varnet_vars,
            base,
            z,
            lag,
            model.delta,
        )?;
        let le = emission_logpdf(tape, &model.emission, &vars.emission, z, &obs.values[k], &obs.mask[k])?;
        let lq = gaussian_logpdf(tape, z, q_mean, q_var)?;
        acc = tape.add(acc, lt)?;
        acc = tape.add(acc, le)?;
        acc = tape.sub(acc, lq)?;
        samples.push(z);
    }
    Ok(tape.scalar_mul(-1.0, acc))
}

/// Run the recurrent posterior over a series and return the mean state at
/// every step. Each decode receives the prior mean propagated from earlier
/// posterior means under the horizon schedule.
pub fn lstm_posterior_means(
    tape: &mut Tape,
    model: &GenerativeModel,
    gvars: &GenerativeVars,
    inf: &LstmInference,
    ivars: &LstmInferenceVars,
    obs: &ObservationSeries,
    n: usize,
) -> Result<Vec<Var>> {
    if n < 1 {
        return Err(Error::validation("prediction horizon must be at least 1"));
    }
    let feats = inf.posterior_features(tape, ivars, obs)?;
    let mut states = Vec::with_capacity(obs.len());
    states.push(feats.z0);
    for k in 1..obs.len() {
        let lag = schedule_lag(k, n);
        let prior_mean =
            flow_n_tape(tape, &model.binn, &gvars.binn, states[k - lag], lag, model.delta)?;
        let step = inf.decode(tape, ivars, prior_mean, feats.h_fwd[k - 1], feats.h_bwd[k - 1])?;
        states.push(step.mean());
    }
    Ok(states)
}

/// Variational loss with the recurrent posterior networks supplying q.
#[allow(clippy::too_many_arguments)]
pub fn loss_elbo_lstm(
    tape: &mut Tape,
    model: &GenerativeModel,
    gvars: &GenerativeVars,
    inf: &LstmInference,
    ivars: &LstmInferenceVars,
    obs: &ObservationSeries,
    n: usize,
    rng: &mut Rng,
) -> Result<Var> {
    if !inf.is_variational() {
        return Err(Error::validation(
            "the variational objective needs a posterior with a variance head",
        ));
    }
    let feats = inf.posterior_features(tape, ivars, obs)?;
    let mut q_step = |tape: &mut Tape, k: usize, prior_mean: Var| {
        match inf.decode(tape, ivars, prior_mean, feats.h_fwd[k - 1], feats.h_bwd[k - 1])? {
            PosteriorStep::Gaussian { mean, var } => Ok((mean, var)),
            PosteriorStep::Point { .. } => {
                Err(Error::validation("posterior decode produced no variance"))
            }
        }
    };
    elbo_pass(tape, model, gvars, obs, n, ElboInit::Point(feats.z0), &mut q_step, rng)
}

/// One recorded gradient step.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub epoch: usize,
    /// Horizon drawn for this step.
    pub n: usize,
    pub loss: f64,
    /// Seconds since training started.
    pub wall_secs: f64,
}

/// Render a trace as CSV (header + one row per step).
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,n,loss,wall_secs\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.n, r.loss, r.wall_secs));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub final_loss: f64,
    /// Learning rate after any retry halvings.
    pub final_lr: f64,
}

fn grads_are_finite(named: &[(String, Array)]) -> bool {
    named.iter().all(|(_, g)| g.data().iter().all(|v| v.is_finite()))
}

fn optimize_step(
    opt: &mut Adam,
    model: &mut dyn Parameterized,
    mut named: Vec<(String, Array)>,
    clip: f64,
) -> Result<()> {
    clip_global_norm(&mut named, clip);
    let updates: BTreeMap<String, Vec<f64>> = opt.deltas(&named)?;
    apply_updates(model, &updates)
}

fn training_failure(epoch: usize, detail: &str, trace: &[TraceRow]) -> Error {
    let tail: Vec<String> = trace
        .iter()
        .rev()
        .take(3)
        .map(|r| format!("(epoch {}, n {}, loss {})", r.epoch, r.n, r.loss))
        .collect();
    Error::computation(format!(
        "training failed at epoch {epoch} after {MAX_RETRIES} learning-rate halvings: \
         {detail}; most recent steps: [{}]",
        tail.join(", ")
    ))
}

/// Loss and named gradients for one batch under the joint (networks-only)
/// configuration.
fn lstm_batch_eval(
    model: &JointModel,
    config: &TrainConfig,
    batch: &[&ObservationSeries],
    n: usize,
    rng: &mut Rng,
) -> Result<(f64, Vec<(String, Array)>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let (gvars, ivars) = model.bind(&mut binder);
    let entries = binder.into_entries();
    let mut total = tape.constant_scalar(0.0);
    for obs in batch {
        let l = match config.objective {
            Objective::Determ => {
                let z = lstm_posterior_means(&mut tape, &model.gen, &gvars, &model.inf, &ivars, obs, n)?;
                loss_determ(&mut tape, &model.gen, &gvars, &z, obs, n, config.lambda)?
            }
            Objective::Map => {
                let z = lstm_posterior_means(&mut tape, &model.gen, &gvars, &model.inf, &ivars, obs, n)?;
                loss_map(&mut tape, &model.gen, &gvars, &z, obs, n)?
            }
            Objective::Elbo => {
                loss_elbo_lstm(&mut tape, &model.gen, &gvars, &model.inf, &ivars, obs, n, rng)?
            }
        };
        total = tape.add(total, l)?;
    }
    let loss = tape.scalar_mul(1.0 / batch.len() as f64, total);
    let value = tape.value(loss).as_scalar()?;
    if !value.is_finite() {
        // no point building gradients of a non-finite scalar
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, named_gradients(&entries, &grads)))
}

/// Joint gradient training with a horizon redrawn uniformly from
/// `[1, n_step_max]` at every step. Sequences are visited in a freshly
/// shuffled order each epoch, `batch_size` at a time. A non-finite loss (or
/// a failed evaluation) halves the learning rate and retries with a fresh
/// horizon draw, up to [`MAX_RETRIES`] times per step; the halving persists.
pub fn train_random_nstep(
    config: &TrainConfig,
    data: &[ObservationSeries],
    model: &mut JointModel,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.inference != InferenceKind::Lstm {
        return Err(Error::validation(
            "the joint gradient driver trains network inference; use the smoother driver instead",
        ));
    }
    model.validate()?;
    if config.objective == Objective::Elbo && !model.inf.is_variational() {
        return Err(Error::validation(
            "the variational objective needs a posterior with a variance head",
        ));
    }
    if data.is_empty() {
        return Err(Error::validation("training needs at least one sequence"));
    }

    let mut rng = Rng::new(config.seed);
    let mut opt = Adam::new(config.lr);
    let started = Instant::now();
    let mut trace: Vec<TraceRow> = Vec::new();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ObservationSeries> = chunk.iter().map(|&i| &data[i]).collect();
            let mut attempts = 0usize;
            loop {
                let n = rng.uniform_int(1, config.n_step_max as u64) as usize;
                match lstm_batch_eval(model, config, &batch, n, &mut rng) {
                    Ok((loss, named)) if loss.is_finite() && grads_are_finite(&named) => {
                        optimize_step(&mut opt, model, named, config.clip_norm)?;
                        trace.push(TraceRow {
                            epoch,
                            n,
                            loss,
                            wall_secs: started.elapsed().as_secs_f64(),
                        });
                        break;
                    }
                    outcome => {
                        let detail = match outcome {
                            Ok((loss, _)) => format!("non-finite loss {loss}"),
                            Err(e) => format!("loss evaluation failed: {e}"),
                        };
                        attempts += 1;
                        if attempts > MAX_RETRIES {
                            return Err(training_failure(epoch, &detail, &trace));
                        }
                        let halved = opt.lr() / 2.0;
                        log::warn!("epoch {epoch}: {detail}; halving learning rate to {halved}");
                        opt.set_lr(halved);
                    }
                }
            }
        }
    }

    let final_loss = trace.last().map_or(f64::NAN, |r| r.loss);
    Ok(TrainOutcome { trace, final_loss, final_lr: opt.lr() })
}

/// Refill-and-shuffle batch source for the smoother driver's gradient steps.
fn next_batch(pool: &mut Vec<usize>, len: usize, take: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(take);
    while out.len() < take {
        if pool.is_empty() {
            let mut idx: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut idx);
            *pool = idx;
        }
        out.push(pool.pop().expect("pool was just refilled"));
    }
    out
}

fn em_batch_eval(
    model: &GenerativeModel,
    config: &TrainConfig,
    batch: &[usize],
    means: &[Vec<Vec<f64>>],
    data: &[ObservationSeries],
    n: usize,
) -> Result<(f64, Vec<(String, Array)>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let vars = model.bind(&mut binder, "");
    let entries = binder.into_entries();
    let mut total = tape.constant_scalar(0.0);
    for &idx in batch {
        let z_states: Vec<Var> = means[idx]
            .iter()
            .map(|m| tape.constant(Array::vector(m.clone())))
            .collect();
        let l = loss_determ(&mut tape, model, &vars, &z_states, &data[idx], n, config.lambda)?;
        total = tape.add(total, l)?;
    }
    let loss = tape.scalar_mul(1.0 / batch.len() as f64, total);
    let value = tape.value(loss).as_scalar()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, named_gradients(&entries, &grads)))
}

/// Alternated training for smoother-based inference: each cycle runs the
/// ensemble smoother over every sequence (posterior ensemble means become
/// fixed targets), then takes [`EM_M_STEPS`] gradient steps on the generative
/// parameters. Retry semantics match the joint driver.
pub fn train_em_enks(
    config: &TrainConfig,
    data: &[ObservationSeries],
    model: &mut GenerativeModel,
    enks: &EnksConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.inference != InferenceKind::Enks {
        return Err(Error::validation(
            "the alternated driver needs smoother inference; use the joint driver instead",
        ));
    }
    model.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training needs at least one sequence"));
    }

    let mut rng = Rng::new(config.seed);
    let mut opt = Adam::new(config.lr);
    let started = Instant::now();
    let mut trace: Vec<TraceRow> = Vec::new();

    for cycle in 0..config.epochs {
        // E-step: posterior ensemble means under the current model.
        let mut means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(data.len());
        for obs in data {
            let ens = enks_smooth(&model.binn, model.delta, enks, &model.emission, obs, &mut rng)?;
            means.push(ens.iter().map(|e| e.mean()).collect());
        }
        // M-step: gradient steps with the means held fixed.
        let mut pool: Vec<usize> = Vec::new();
        for _ in 0..EM_M_STEPS {
            let batch = next_batch(&mut pool, data.len(), config.batch_size, &mut rng);
            let mut attempts = 0usize;
            loop {
                let n = rng.uniform_int(1, config.n_step_max as u64) as usize;
                match em_batch_eval(model, config, &batch, &means, data, n) {
                    Ok((loss, named)) if loss.is_finite() && grads_are_finite(&named) => {
                        optimize_step(&mut opt, model, named, config.clip_norm)?;
                        trace.push(TraceRow {
                            epoch: cycle,
                            n,
                            loss,
                            wall_secs: started.elapsed().as_secs_f64(),
                        });
                        break;
                    }
                    outcome => {
                        let detail = match outcome {
                            Ok((loss, _)) => format!("non-finite loss {loss}"),
                            Err(e) => format!("loss evaluation failed: {e}"),
                        };
                        attempts += 1;
                        if attempts > MAX_RETRIES {
                            return Err(training_failure(cycle, &detail, &trace));
                        }
                        let halved = opt.lr() / 2.0;
                        log::warn!("cycle {cycle}: {detail}; halving learning rate to {halved}");
                        opt.set_lr(halved);
                    }
                }
            }
        }
    }

    let final_loss = trace.last().map_or(f64::NAN, |r| r.loss);
    Ok(TrainOutcome { trace, final_loss, final_lr: opt.lr() })
}

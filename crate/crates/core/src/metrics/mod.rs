//! Evaluation of learnt dynamics: short-term forecast error, state
//! reconstruction error, the synchronization horizon π₀.₅, and the first
//! Lyapunov exponent by two-trajectory renormalization.
//!
//! All RMS errors average over time steps *and* state components, so values
//! are comparable across systems of different dimension. Every function here
//! is a pure function of its inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::ObservationSeries;

/// One model step: maps a state to the state one sample interval later.
pub type Flow<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a;

fn check_same_shape(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "{what}: {} steps vs {} steps",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::validation(format!("{what}: empty sequences")));
    }
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::validation(format!(
                "{what}: {}-dimensional state vs {}-dimensional state",
                x.len(),
                y.len()
            )));
        }
    }
    Ok(())
}

/// RMS error of an `n`-step forecast: the root of the mean squared error
/// over steps 1..=n and over state components.
pub fn forecast_rmse(pred: &[Vec<f64>], truth: &[Vec<f64>], n: usize) -> Result<f64> {
    check_same_shape(pred, truth, "forecast")?;
    if n < 1 || pred.len() < n + 1 {
        return Err(Error::validation(format!(
            "forecast horizon {n} needs at least {} steps, got {}",
            n + 1,
            pred.len()
        )));
    }
    let d = pred[0].len();
    let mut sum = 0.0;
    for k in 1..=n {
        for j in 0..d {
            let e = pred[k][j] - truth[k][j];
            sum += e * e;
        }
    }
    Ok((sum / (n * d) as f64).sqrt())
}

/// RMS error between reconstructed states and the truth over every step.
pub fn reconstruction_rmse(zstar: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_same_shape(zstar, truth, "reconstruction")?;
    let d = zstar[0].len();
    let mut sum = 0.0;
    for (zs, zt) in zstar.iter().zip(truth) {
        for j in 0..d {
            let e = zs[j] - zt[j];
            sum += e * e;
        }
    }
    Ok((sum / (zstar.len() * d) as f64).sqrt())
}

/// First time, in Lyapunov units (k·δ·λ₁), at which the instantaneous
/// per-step RMS error exceeds half the system's standard deviation. Returns
/// the horizon cap `len·δ·λ₁` when the threshold is never reached.
pub fn pi_half(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    system_std: f64,
    lambda1_true: f64,
    delta: f64,
) -> Result<f64> {
    check_same_shape(pred, truth, "synchronization horizon")?;
    if !(lambda1_true > 0.0) || !(system_std > 0.0) || !(delta > 0.0) {
        return Err(Error::validation(
            "synchronization horizon needs positive std, Lyapunov exponent, and step size",
        ));
    }
    let d = pred[0].len();
    let threshold = 0.5 * system_std;
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        let mut sum = 0.0;
        for j in 0..d {
            let e = p[j] - t[j];
            sum += e * e;
        }
        let err = (sum / d as f64).sqrt();
        if !err.is_finite() || err > threshold {
            return Ok(k as f64 * delta * lambda1_true);
        }
    }
    Ok(pred.len() as f64 * delta * lambda1_true)
}

/// First Lyapunov exponent by two-trajectory renormalization: a companion
/// trajectory is kept at distance ε₀ from the fiducial one, and the mean
/// exponential growth rate of their separation is accumulated every step.
pub fn lyapunov1(flow: &Flow, z0: &[f64], n_steps: usize, delta: f64, eps0: f64) -> Result<f64> {
    if n_steps < 1000 {
        return Err(Error::validation(
            "Lyapunov estimation needs at least 1000 steps to average over",
        ));
    }
    if !(eps0 > 0.0) || !(delta > 0.0) {
        return Err(Error::validation(
            "Lyapunov estimation needs a positive separation and step size",
        ));
    }
    let d = z0.len();
    let mut fid = z0.to_vec();
    let mut comp = z0.to_vec();
    comp[0] += eps0;
    let mut acc = 0.0;
    for step in 0..n_steps {
        fid = flow(&fid)?;
        comp = flow(&comp)?;
        if fid.iter().any(|v| !v.is_finite()) {
            return Err(Error::computation(format!(
                "fiducial trajectory diverged at step {step}"
            )));
        }
        let mut dist_sq = 0.0;
        for j in 0..d {
            let e = comp[j] - fid[j];
            dist_sq += e * e;
        }
        let dist = dist_sq.sqrt();
        if !(dist > 0.0) || !dist.is_finite() {
            return Err(Error::computation(format!(
                "trajectory separation collapsed or diverged at step {step}"
            )));
        }
        acc += (dist / eps0).ln();
        let scale = eps0 / dist;
        for j in 0..d {
            comp[j] = fid[j] + (comp[j] - fid[j]) * scale;
        }
    }
    Ok(acc / (n_steps as f64 * delta))
}

/// Iterate the flow from `z0`, returning `steps + 1` states including `z0`.
pub fn rollout(flow: &Flow, z0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(z0.to_vec());
    for _ in 0..steps {
        let next = flow(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// A held-out sequence: the true states and what the model observed of them.
#[derive(Debug, Clone)]
pub struct TestSequence {
    pub truth: Vec<Vec<f64>>,
    pub obs: ObservationSeries,
}

/// RMS of the per-component standard deviations of the true states, pooled
/// over every sequence — the scale π₀.₅ measures divergence against.
pub fn pooled_component_std(test: &[TestSequence]) -> Result<f64> {
    let d = test
        .first()
        .and_then(|s| s.truth.first())
        .map(|z| z.len())
        .ok_or_else(|| Error::validation("cannot take the spread of an empty test set"))?;
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    for seq in test {
        for z in &seq.truth {
            for j in 0..d {
                mean[j] += z[j];
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for seq in test {
        for z in &seq.truth {
            for j in 0..d {
                let e = z[j] - mean[j];
                var[j] += e * e;
            }
        }
    }
    let mean_var = var.iter().map(|v| v / count as f64).sum::<f64>() / d as f64;
    Ok(mean_var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population spread over the test sequences (zero for a single one).
    pub std: f64,
}

fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Aggregate { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Forecast RMSE keyed by horizon n.
    pub e_n: BTreeMap<usize, Aggregate>,
    pub rec: Aggregate,
    pub pi_half: Aggregate,
    pub lambda1: Aggregate,
    /// Reference exponent used for the Lyapunov-unit conversion.
    pub lambda1_true: f64,
}

impl MetricReport {
    pub fn csv_header(&self) -> String {
        let mut cols = Vec::new();
        for n in self.e_n.keys() {
            cols.push(format!("e{n}_mean"));
            cols.push(format!("e{n}_std"));
        }
        for name in ["rec", "pi_half", "lambda1"] {
            cols.push(format!("{name}_mean"));
            cols.push(format!("{name}_std"));
        }
        cols.push("lambda1_true".to_string());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = Vec::new();
        for agg in self.e_n.values() {
            cols.push(format!("{}", agg.mean));
            cols.push(format!("{}", agg.std));
        }
        for agg in [&self.rec, &self.pi_half, &self.lambda1] {
            cols.push(format!("{}", agg.mean));
            cols.push(format!("{}", agg.std));
        }
        cols.push(format!("{}", self.lambda1_true));
        cols.join(",")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Forecast horizons to report e_n at.
    pub horizons: Vec<usize>,
    /// Scale of the true system for the π₀.₅ threshold.
    pub system_std: f64,
    pub lambda1_true: f64,
    /// Length of each Lyapunov estimation run.
    pub lyap_steps: usize,
    /// Initial separation for the Lyapunov runs.
    pub lyap_eps: f64,
    /// How many test-sequence starts to launch Lyapunov runs from.
    pub lyap_runs: usize,
    /// Start forecasts from the true initial state rather than the
    /// reconstructed one.
    pub start_from_truth: bool,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.iter().any(|&n| n < 1) {
            return Err(Error::validation("forecast horizons must be at least 1"));
        }
        if !(self.system_std > 0.0) || !(self.lambda1_true > 0.0) {
            return Err(Error::validation(
                "evaluation needs a positive system std and Lyapunov reference",
            ));
        }
        if self.lyap_runs < 1 {
            return Err(Error::validation("at least one Lyapunov run is needed"));
        }
        Ok(())
    }
}

/// Evaluate a trained model on held-out sequences. `flow` advances a state
/// by one sample interval; `reconstruct` maps observations to posterior mean
/// states. Per-sequence metrics are aggregated as mean ± spread.
pub fn evaluate(
    flow: &Flow,
    reconstruct: &mut dyn FnMut(&ObservationSeries) -> Result<Vec<Vec<f64>>>,
    test: &[TestSequence],
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    if test.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty test set"));
    }
    let delta = test[0].obs.delta;
    for seq in test {
        if seq.truth.len() != seq.obs.len() {
            return Err(Error::validation(format!(
                "test sequence has {} true states but {} observations",
                seq.truth.len(),
                seq.obs.len()
            )));
        }
        if seq.obs.delta != delta {
            return Err(Error::validation("test sequences disagree on the sample interval"));
        }
    }

    let mut per_horizon: BTreeMap<usize, Vec<f64>> =
        config.horizons.iter().map(|&n| (n, Vec::new())).collect();
    let mut recs = Vec::with_capacity(test.len());
    let mut pis = Vec::with_capacity(test.len());
    for seq in test {
        let zstar = reconstruct(&seq.obs)?;
        check_same_shape(&zstar, &seq.truth, "reconstruction")?;
        recs.push(reconstruction_rmse(&zstar, &seq.truth)?);

        let start = if config.start_from_truth { &seq.truth[0] } else { &zstar[0] };
        let pred = rollout(flow, start, seq.truth.len() - 1)?;
        for (&n, values) in per_horizon.iter_mut() {
            values.push(forecast_rmse(&pred, &seq.truth, n)?);
        }
        pis.push(pi_half(
            &pred,
            &seq.truth,
            config.system_std,
            config.lambda1_true,
            delta,
        )?);
    }

    let mut lyaps = Vec::new();
    for seq in test.iter().take(config.lyap_runs) {
        lyaps.push(lyapunov1(flow, &seq.truth[0], config.lyap_steps, delta, config.lyap_eps)?);
    }

    Ok(MetricReport {
        e_n: per_horizon.into_iter().map(|(n, v)| (n, aggregate(&v))).collect(),
        rec: aggregate(&recs),
        pi_half: aggregate(&pis),
        lambda1: aggregate(&lyaps),
        lambda1_true: config.lambda1_true,
    })
}

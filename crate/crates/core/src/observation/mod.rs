//! Observation synthesis: operators, noise, missing-data masks, and dataset
//! files.
//!
//! Observations are built from true states in three stages: an observation
//! operator maps states to observation space (identity, or a Legendre-mode
//! projection), additive Gaussian noise is scaled relative to the system's
//! long-run spread, and a Bernoulli mask hides a fraction of the scalar
//! entries. Masked entries are stored as a neutral sentinel value (0.0) and
//! carry a `false` mask bit; downstream code must consult the mask — no
//! likelihood, loss, or gradient may depend on sentinel contents, and the
//! test suites verify this by rewriting sentinels and requiring bitwise
//! unchanged results.

mod dataset_io;
mod legendre;

pub use dataset_io::{load_dataset, save_dataset};
pub use legendre::{legendre_observe, legendre_reference_std, LegendreOperator};

use crate::adcore::Rng;
use crate::error::{Error, Result};
use crate::systems::{reference_stats, StateSequence, SystemTag};

/// Value stored in masked (unobserved) entries.
pub const MASK_SENTINEL: f64 = 0.0;

/// Which operator produced an observation series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OperatorTag {
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "legendre")]
    Legendre,
}

impl OperatorTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            OperatorTag::Identity => "identity",
            OperatorTag::Legendre => "legendre",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(OperatorTag::Identity),
            "legendre" => Ok(OperatorTag::Legendre),
            other => Err(Error::validation(format!("unknown operator tag {other:?}"))),
        }
    }
}

/// A noisy, possibly partially observed series aligned with a state
/// trajectory: `values[k][j]` is observation component `j` at step `k`,
/// valid only where `mask[k][j]` is true.
#[derive(Clone, Debug)]
pub struct ObservationSeries {
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub delta: f64,
    /// Noise-to-signal ratio the series was generated with.
    pub r: f64,
    pub operator: OperatorTag,
}

impl ObservationSeries {
    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Observation dimension.
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// Fraction of scalar entries observed.
    pub fn observed_fraction(&self) -> f64 {
        let total: usize = self.mask.iter().map(|m| m.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let on: usize = self.mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        on as f64 / total as f64
    }

    /// Values with every missing entry replaced by the most recent observed
    /// value of the same component (0.0 before the first observation).
    /// This is the canonical encoder-input imputation rule.
    pub fn imputed_values(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut last = vec![0.0; d];
        let mut out = Vec::with_capacity(self.len());
        for (vals, mask) in self.values.iter().zip(&self.mask) {
            for j in 0..d {
                if mask[j] {
                    last[j] = vals[j];
                }
            }
            out.push(last.clone());
        }
        out
    }

    /// Copy with every masked entry set to `sentinel`. Observed entries are
    /// untouched. Exists so tests can verify that sentinel contents never
    /// leak into any computation.
    pub fn with_sentinel(&self, sentinel: f64) -> ObservationSeries {
        let mut c = self.clone();
        for (vals, mask) in c.values.iter_mut().zip(&c.mask) {
            for (v, &m) in vals.iter_mut().zip(mask) {
                if !m {
                    *v = sentinel;
                }
            }
        }
        c
    }
}

/// Add zero-mean Gaussian noise to every component of a state trajectory.
///
/// The per-component noise standard deviation is `r` times that component's
/// long-run standard deviation from the system's cached reference run.
/// Returns the noisy values together with the noise standard deviations
/// actually used (so the true observation covariance is known exactly).
pub fn add_noise(
    seq: &StateSequence,
    r: f64,
    rng: &mut Rng,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if r < 0.0 {
        return Err(Error::validation(format!("add_noise: negative noise ratio {r}")));
    }
    let stats = reference_stats(seq.tag);
    let std: Vec<f64> = stats.std.iter().map(|s| r * s).collect();
    let values = noisy_copies(&seq.states, &std, rng);
    Ok((values, std))
}

fn noisy_copies(clean: &[Vec<f64>], std: &[f64], rng: &mut Rng) -> Vec<Vec<f64>> {
    clean
        .iter()
        .map(|row| {
            row.iter()
                .zip(std)
                .map(|(&v, &s)| if s > 0.0 { v + s * rng.normal() } else { v })
                .collect()
        })
        .collect()
}

/// Hide scalar entries independently with probability `missing_rate`.
///
/// The whole mask is redrawn (bounded retries) until every component is
/// observed at least once over the series, so downstream inference always
/// has at least one anchor per component. `missing_rate` must lie in [0, 1).
pub fn apply_mask(
    values: &[Vec<f64>],
    missing_rate: f64,
    rng: &mut Rng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::validation(format!(
            "apply_mask: missing rate must be in [0, 1), got {missing_rate}"
        )));
    }
    if values.is_empty() {
        return Err(Error::validation("apply_mask: empty series"));
    }
    let d = values[0].len();
    const MAX_RETRIES: usize = 1_000;
    for _ in 0..MAX_RETRIES {
        let mask: Vec<Vec<bool>> = values
            .iter()
            .map(|row| row.iter().map(|_| rng.uniform() >= missing_rate).collect())
            .collect();
        let every_component_seen =
            (0..d).all(|j| mask.iter().any(|m| m[j]));
        if every_component_seen {
            let masked: Vec<Vec<f64>> = values
                .iter()
                .zip(&mask)
                .map(|(row, m)| {
                    row.iter()
                        .zip(m)
                        .map(|(&v, &keep)| if keep { v } else { MASK_SENTINEL })
                        .collect()
                })
                .collect();
            return Ok((masked, mask));
        }
    }
    Err(Error::computation(format!(
        "apply_mask: could not produce a mask observing every component at rate {missing_rate}"
    )))
}

/// Build the full observation series for one state trajectory: apply the
/// operator, add scaled noise, then mask.
///
/// Returns the series and the per-component noise standard deviations used.
pub fn make_observations(
    seq: &StateSequence,
    operator: OperatorTag,
    r: f64,
    missing_rate: f64,
    rng: &mut Rng,
) -> Result<(ObservationSeries, Vec<f64>)> {
    if r < 0.0 {
        return Err(Error::validation(format!("make_observations: negative noise ratio {r}")));
    }
    let (clean, std): (Vec<Vec<f64>>, Vec<f64>) = match operator {
        OperatorTag::Identity => {
            let stats = reference_stats(seq.tag);
            (seq.states.clone(), stats.std.iter().map(|s| r * s).collect())
        }
        OperatorTag::Legendre => {
            let op = LegendreOperator::standard();
            let mapped: Vec<Vec<f64>> =
                seq.states.iter().map(|z| legendre_observe(z, &op)).collect::<Result<_>>()?;
            let ref_std = legendre_reference_std(seq.tag);
            (mapped, ref_std.iter().map(|s| r * s).collect())
        }
    };
    let noisy = noisy_copies(&clean, &std, rng);
    let (values, mask) = apply_mask(&noisy, missing_rate, rng)?;
    Ok((
        ObservationSeries { values, mask, delta: seq.delta, r, operator },
        std,
    ))
}

/// A collection of aligned truth/observation pairs plus the generation
/// metadata needed to reproduce or score it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub system: SystemTag,
    pub delta: f64,
    pub r: f64,
    pub missing_rate: f64,
    pub operator: OperatorTag,
    /// Seed the generating process was started from (provenance).
    pub seed: u64,
    /// Per-component observation-noise standard deviation (observation
    /// space); the true observation covariance is `diag(noise_std²)`.
    pub noise_std: Vec<f64>,
    pub truths: Vec<StateSequence>,
    pub observations: Vec<ObservationSeries>,
}

impl Dataset {
    pub fn n_sequences(&self) -> usize {
        self.truths.len()
    }

    /// True observation-noise variances (diagonal).
    pub fn noise_var(&self) -> Vec<f64> {
        self.noise_std.iter().map(|s| s * s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.truths.len() != self.observations.len() {
            return Err(Error::validation(format!(
                "dataset: {} truth sequences vs {} observation series",
                self.truths.len(),
                self.observations.len()
            )));
        }
        for (i, (t, o)) in self.truths.iter().zip(&self.observations).enumerate() {
            if t.len() != o.len() {
                return Err(Error::validation(format!(
                    "dataset: sequence {i} has {} states but {} observations",
                    t.len(),
                    o.len()
                )));
            }
        }
        Ok(())
    }
}

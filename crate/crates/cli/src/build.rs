//! Wiring from a resolved config to concrete models, smoother settings,
//! evaluation settings, and the normalized coordinate frame they train in.

use dynid::adcore::Rng;
use dynid::inference::{EnksConfig, LstmInference, LstmInferenceConfig};
use dynid::metrics::{pooled_component_std, EvalConfig, TestSequence};
use dynid::nn::{Activation, Mlp};
use dynid::observation::{
    legendre_observe, legendre_reference_std, LegendreOperator, ObservationSeries, OperatorTag,
    MASK_SENTINEL,
};
use dynid::prior::{Binn, EmissionModel, GenerativeModel, VarDynNet};
use dynid::systems::{reference_stats, SystemTag};
use dynid::training::JointModel;
use dynid::{Error, Result};

use crate::config::ResolvedConfig;

/// Observation covariances must stay positive even for noise-free data.
const R_DIAG_FLOOR: f64 = 1e-8;

/// Integration step of the learned dynamics: one observation interval.
/// RK4(f, δ) and RK4(c·f, δ/c) realize the identical map, so this is a pure
/// reparameterization — it scales the weights the optimizer must reach by
/// the sample interval, keeping them O(1).
pub const MODEL_STEP: f64 = 1.0;

pub fn state_dim(system: SystemTag) -> usize {
    match system {
        SystemTag::L96 => 40,
        _ => 3,
    }
}

/// Long-run largest Lyapunov exponent of the generating system, used as the
/// reference scale when scoring learned dynamics.
pub fn lambda1_true(system: SystemTag) -> f64 {
    match system {
        SystemTag::L96 => 1.67,
        _ => 0.91,
    }
}

/// Affine coordinate maps between physical and training coordinates.
///
/// States and observations are centered and scaled by cached long-run
/// reference statistics, so network inputs, initial ensembles, and the
/// weights gradient descent must reach all stay O(1) regardless of the
/// system's physical scale. The frame depends only on (system, operator) —
/// never on the data — so any command can rebuild it from the config alone.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub state_center: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub obs_center: Vec<f64>,
    pub obs_scale: Vec<f64>,
}

impl Normalizer {
    pub fn for_config(rc: &ResolvedConfig) -> Result<Self> {
        let stats = reference_stats(rc.system);
        let (obs_center, obs_scale) = match rc.operator {
            OperatorTag::Identity => (stats.mean.clone(), stats.std.clone()),
            OperatorTag::Legendre => {
                let op = LegendreOperator::standard();
                (legendre_observe(&stats.mean, &op)?, legendre_reference_std(rc.system).clone())
            }
        };
        if stats.std.iter().chain(&obs_scale).any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::computation("reference statistics carry a non-positive scale"));
        }
        Ok(Normalizer {
            state_center: stats.mean.clone(),
            state_scale: stats.std.clone(),
            obs_center,
            obs_scale,
        })
    }

    pub fn d_z(&self) -> usize {
        self.state_center.len()
    }

    pub fn normalize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.state_center.iter().zip(&self.state_scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    pub fn denormalize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.state_center.iter().zip(&self.state_scale))
            .map(|(v, (c, s))| c + s * v)
            .collect()
    }

    /// Copy of a series with observed entries mapped into the training
    /// frame; masked entries keep the sentinel.
    pub fn normalize_obs(&self, obs: &ObservationSeries) -> ObservationSeries {
        let values = obs
            .values
            .iter()
            .zip(&obs.mask)
            .map(|(row, mask)| {
                row.iter()
                    .zip(mask)
                    .zip(self.obs_center.iter().zip(&self.obs_scale))
                    .map(|((v, &seen), (c, s))| if seen { (v - c) / s } else { MASK_SENTINEL })
                    .collect()
            })
            .collect();
        ObservationSeries { values, mask: obs.mask.clone(), ..obs.clone() }
    }

    /// Observation-noise variances in the training frame: the noise ratio r
    /// is exactly the noise std over the signal scale per component.
    pub fn noise_var(&self, r: f64) -> Vec<f64> {
        vec![(r * r).max(R_DIAG_FLOOR); self.obs_center.len()]
    }
}

/// Projected-observation emission head: state in, observation vector out.
fn legendre_emission_sizes(d_z: usize, d_x: usize) -> Vec<usize> {
    vec![d_z, 32, 64, d_x]
}

fn emission(rc: &ResolvedConfig, norm: &Normalizer, rng: &mut Rng) -> Result<EmissionModel> {
    let d_z = state_dim(rc.system);
    let r_diag = norm.noise_var(rc.r);
    match rc.operator {
        OperatorTag::Identity => EmissionModel::identity(d_z, r_diag),
        OperatorTag::Legendre => {
            let mlp = Mlp::new(
                &legendre_emission_sizes(d_z, r_diag.len()),
                Activation::Sigmoid,
                rng,
            )?;
            EmissionModel::learned(mlp, r_diag)
        }
    }
}

/// Drift network (+ optional variance head) + emission, freshly initialized
/// in the normalized frame.
pub fn build_generative(
    rc: &ResolvedConfig,
    norm: &Normalizer,
    rng: &mut Rng,
) -> Result<GenerativeModel> {
    let d_z = state_dim(rc.system);
    let binn = match rc.system {
        SystemTag::L96 => Binn::circular(d_z, rng)?,
        _ => Binn::dense(d_z, rng)?,
    };
    let varnet = if rc.model.needs_varnet() { Some(VarDynNet::new(d_z, rng)?) } else { None };
    let emission = emission(rc, norm, rng)?;
    let model = GenerativeModel { binn, varnet, emission, delta: MODEL_STEP };
    model.validate()?;
    Ok(model)
}

fn lstm_config(rc: &ResolvedConfig) -> LstmInferenceConfig {
    let mut cfg = match (rc.system, rc.operator) {
        (_, OperatorTag::Legendre) => LstmInferenceConfig::l63_legendre(),
        (SystemTag::L96, _) => LstmInferenceConfig::l96(),
        _ => LstmInferenceConfig::l63(false),
    };
    cfg.variational = rc.model.variational();
    cfg
}

/// Generative and posterior sides together, ready for joint training.
pub fn build_joint(rc: &ResolvedConfig, norm: &Normalizer, rng: &mut Rng) -> Result<JointModel> {
    let gen = build_generative(rc, norm, rng)?;
    let inf = LstmInference::new(lstm_config(rc), rng)?;
    let model = JointModel { gen, inf };
    model.validate()?;
    Ok(model)
}

/// Smoother settings in the normalized frame: standard-normal initial
/// ensemble, model noise as a fraction of unit signal variance.
pub fn enks_config(rc: &ResolvedConfig) -> EnksConfig {
    let d_z = state_dim(rc.system);
    EnksConfig {
        n_ensemble: rc.n_ensemble,
        q_diag: vec![rc.q_scale; d_z],
        lag: rc.lag,
        init_mean: vec![0.0; d_z],
        init_var: vec![1.0; d_z],
    }
}

/// Evaluation settings derived from the config plus the test set itself.
pub fn eval_config(rc: &ResolvedConfig, test: &[TestSequence]) -> Result<EvalConfig> {
    Ok(EvalConfig {
        horizons: rc.horizons.clone(),
        system_std: pooled_component_std(test)?,
        lambda1_true: lambda1_true(rc.system),
        lyap_steps: rc.lyap_steps,
        lyap_eps: 1e-8,
        lyap_runs: rc.lyap_runs,
        start_from_truth: true,
    })
}

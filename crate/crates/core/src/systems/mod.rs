//! Reference chaotic systems, integrators, and trajectory synthesis.
//!
//! Three benchmark systems are provided: the Lorenz-63 ODE, the Lorenz-96
//! ODE (circular coupling, arbitrary dimension), and a stochastic Lorenz-63
//! variant whose second and third components share a single Brownian forcing.
//! Deterministic systems integrate with classical Runge–Kutta 4; the
//! stochastic system uses Euler–Maruyama.

mod reference;

pub use reference::{reference_stats, ReferenceStats};

use crate::adcore::Rng;
use crate::error::{Error, Result};

/// States whose magnitude exceeds this are treated as numerical divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Identifies which benchmark system generated a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SystemTag {
    #[serde(rename = "l63")]
    L63,
    #[serde(rename = "l96")]
    L96,
    #[serde(rename = "l63s")]
    L63s,
}

impl SystemTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SystemTag::L63 => "l63",
            SystemTag::L96 => "l96",
            SystemTag::L63s => "l63s",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l63" => Ok(SystemTag::L63),
            "l96" => Ok(SystemTag::L96),
            "l63s" => Ok(SystemTag::L63s),
            other => Err(Error::validation(format!("unknown system tag {other:?}"))),
        }
    }

    /// True when trajectories require a noise source.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, SystemTag::L63s)
    }
}

/// Lorenz-63 parameters. Defaults: sigma = 10, rho = 28, beta = 8/3, and a
/// native integration step of 0.01.
#[derive(Clone, Copy, Debug)]
pub struct L63Params {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for L63Params {
    fn default() -> Self {
        L63Params { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }
}

/// Lorenz-96 parameters. Defaults: 40 components with forcing 8 and a native
/// integration step of 0.05. At least four components are required for the
/// circular advection stencil to be well defined.
#[derive(Clone, Copy, Debug)]
pub struct L96Params {
    pub n_z: usize,
    pub forcing: f64,
}

impl Default for L96Params {
    fn default() -> Self {
        L96Params { n_z: 40, forcing: 8.0 }
    }
}

impl L96Params {
    pub fn validate(&self) -> Result<()> {
        if self.n_z < 4 {
            return Err(Error::validation(format!(
                "l96: need at least 4 components, got {}",
                self.n_z
            )));
        }
        Ok(())
    }
}

/// Stochastic Lorenz-63 parameters: the deterministic core plus linear
/// damping of strength `2/gamma` (doubled on the third component) and a
/// state-dependent diffusion `(0, (rho - z3)/sqrt(gamma), z2/sqrt(gamma))`
/// driven by one shared Brownian increment.
#[derive(Clone, Copy, Debug)]
pub struct L63sParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for L63sParams {
    fn default() -> Self {
        let l63 = L63Params::default();
        L63sParams { sigma: l63.sigma, rho: l63.rho, beta: l63.beta, gamma: 5.0 }
    }
}

/// A benchmark system together with its parameters.
#[derive(Clone, Copy, Debug)]
pub enum System {
    L63(L63Params),
    L96(L96Params),
    L63s(L63sParams),
}

impl System {
    /// System with default parameters for `tag`.
    pub fn from_tag(tag: SystemTag) -> Self {
        match tag {
            SystemTag::L63 => System::L63(L63Params::default()),
            SystemTag::L96 => System::L96(L96Params::default()),
            SystemTag::L63s => System::L63s(L63sParams::default()),
        }
    }

    pub fn tag(&self) -> SystemTag {
        match self {
            System::L63(_) => SystemTag::L63,
            System::L96(_) => SystemTag::L96,
            System::L63s(_) => SystemTag::L63s,
        }
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        match self {
            System::L63(_) | System::L63s(_) => 3,
            System::L96(p) => p.n_z,
        }
    }

    /// Conventional integration step for this system.
    pub fn native_delta(&self) -> f64 {
        match self {
            System::L63(_) | System::L63s(_) => 0.01,
            System::L96(_) => 0.05,
        }
    }
}

/// Lorenz-63 right-hand side:
/// `(sigma (z2 - z1), (rho - z3) z1 - z2, z1 z2 - beta z3)`.
pub fn l63_rhs(z: &[f64], p: &L63Params) -> Vec<f64> {
    debug_assert_eq!(z.len(), 3);
    vec![
        p.sigma * (z[1] - z[0]),
        (p.rho - z[2]) * z[0] - z[1],
        z[0] * z[1] - p.beta * z[2],
    ]
}

/// Lorenz-96 right-hand side with circular indexing:
/// `dz_i = (z_{i+1} - z_{i-2}) z_{i-1} - z_i + F`.
pub fn l96_rhs(z: &[f64], p: &L96Params) -> Vec<f64> {
    let n = z.len();
    debug_assert_eq!(n, p.n_z);
    debug_assert!(n >= 4);
    let mut out = vec![0.0; n];
    for i in 0..n {
        let ip1 = z[(i + 1) % n];
        let im1 = z[(i + n - 1) % n];
        let im2 = z[(i + n - 2) % n];
        out[i] = (ip1 - im2) * im1 - z[i] + p.forcing;
    }
    out
}

/// Drift of the stochastic Lorenz-63: the deterministic right-hand side
/// minus `(4/2gamma) z1, (4/2gamma) z2, (8/2gamma) z3`.
pub fn l63s_drift(z: &[f64], p: &L63sParams) -> Vec<f64> {
    let core = l63_rhs(z, &L63Params { sigma: p.sigma, rho: p.rho, beta: p.beta });
    vec![
        core[0] - 4.0 / (2.0 * p.gamma) * z[0],
        core[1] - 4.0 / (2.0 * p.gamma) * z[1],
        core[2] - 8.0 / (2.0 * p.gamma) * z[2],
    ]
}

/// Diffusion vector of the stochastic Lorenz-63 (all three components are
/// driven by one shared scalar Brownian increment).
pub fn l63s_diffusion(z: &[f64], p: &L63sParams) -> Vec<f64> {
    let s = p.gamma.sqrt();
    vec![0.0, (p.rho - z[2]) / s, z[1] / s]
}

/// One classical Runge–Kutta 4 step of `dz/dt = rhs(z)` with step `dt`.
///
/// Fails when any stage evaluates to a non-finite value, naming the stage.
pub fn rk4_step<F>(rhs: F, z: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let check = |stage: &str, v: &[f64]| -> Result<()> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::computation(format!("rk4: non-finite value at stage {stage}")))
        }
    };
    let k1 = rhs(z);
    check("k1", &k1)?;
    let mid1: Vec<f64> = z.iter().zip(&k1).map(|(&zi, &ki)| zi + 0.5 * dt * ki).collect();
    let k2 = rhs(&mid1);
    check("k2", &k2)?;
    let mid2: Vec<f64> = z.iter().zip(&k2).map(|(&zi, &ki)| zi + 0.5 * dt * ki).collect();
    let k3 = rhs(&mid2);
    check("k3", &k3)?;
    let end: Vec<f64> = z.iter().zip(&k3).map(|(&zi, &ki)| zi + dt * ki).collect();
    let k4 = rhs(&end);
    check("k4", &k4)?;
    Ok(z
        .iter()
        .enumerate()
        .map(|(i, &zi)| zi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// One Euler–Maruyama step of the stochastic Lorenz-63 with an explicit
/// standard-normal draw `xi`:
/// `z' = z + drift(z) dt + diffusion(z) sqrt(dt) xi`.
pub fn euler_maruyama_step_with_noise(p: &L63sParams, z: &[f64], dt: f64, xi: f64) -> Vec<f64> {
    let drift = l63s_drift(z, p);
    let diff = l63s_diffusion(z, p);
    let sq = dt.sqrt();
    z.iter()
        .enumerate()
        .map(|(i, &zi)| zi + drift[i] * dt + diff[i] * sq * xi)
        .collect()
}

/// One Euler–Maruyama step drawing the shared Brownian increment from `rng`.
pub fn euler_maruyama_step(p: &L63sParams, z: &[f64], dt: f64, rng: &mut Rng) -> Vec<f64> {
    let xi = rng.normal();
    euler_maruyama_step_with_noise(p, z, dt, xi)
}

/// A simulated trajectory: `states[k]` is the state after `k` steps of size
/// `delta`, so a trajectory of `n` states covers `n - 1` steps.
#[derive(Clone, Debug)]
pub struct StateSequence {
    pub states: Vec<Vec<f64>>,
    pub delta: f64,
    pub tag: SystemTag,
}

impl StateSequence {
    /// Number of stored states.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }
}

/// Integrate `system` for `n_steps` steps from `z0`, recording every state
/// (including `z0`, so the result holds `n_steps + 1` states).
///
/// A noise source must be supplied exactly when the system is stochastic.
/// Fails with the offending step index if the state leaves
/// [`DIVERGENCE_LIMIT`] or becomes non-finite.
pub fn simulate(
    system: &System,
    z0: &[f64],
    n_steps: usize,
    delta: f64,
    mut rng: Option<&mut Rng>,
) -> Result<StateSequence> {
    if z0.len() != system.dim() {
        return Err(Error::validation(format!(
            "simulate: initial state has dimension {} but {} expects {}",
            z0.len(),
            system.tag().as_str(),
            system.dim()
        )));
    }
    match (system.tag().is_stochastic(), rng.is_some()) {
        (true, false) => {
            return Err(Error::validation(
                "simulate: stochastic system requires a noise source",
            ))
        }
        (false, true) => {
            return Err(Error::validation(
                "simulate: deterministic system takes no noise source",
            ))
        }
        _ => {}
    }
    if let System::L96(p) = system {
        p.validate()?;
    }

    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z0.to_vec());
    let mut z = z0.to_vec();
    for step in 1..=n_steps {
        z = match system {
            System::L63(p) => rk4_step(|s| l63_rhs(s, p), &z, delta)
                .map_err(|e| Error::computation(format!("step {step}: {e}")))?,
            System::L96(p) => rk4_step(|s| l96_rhs(s, p), &z, delta)
                .map_err(|e| Error::computation(format!("step {step}: {e}")))?,
            System::L63s(p) => {
                euler_maruyama_step(p, &z, delta, rng.as_deref_mut().expect("checked above"))
            }
        };
        if z.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::computation(format!(
                "simulate: trajectory diverged at step {step}"
            )));
        }
        states.push(z.clone());
    }
    Ok(StateSequence { states, delta, tag: system.tag() })
}

/// Synthesize `n_sequences` independent trajectories of `seq_len` states.
///
/// Initial conditions are drawn uniformly from the attractor bounding box of
/// the system's reference run, then relaxed onto the attractor for `burn_in`
/// steps before recording begins. Each sequence consumes its own derived
/// noise stream, so the set is reproducible and order-independent.
pub fn make_dataset(
    system: &System,
    n_sequences: usize,
    seq_len: usize,
    delta: f64,
    burn_in: usize,
    rng: &mut Rng,
) -> Result<Vec<StateSequence>> {
    if seq_len == 0 {
        return Err(Error::validation("make_dataset: seq_len must be at least 1"));
    }
    if n_sequences == 0 {
        return Err(Error::validation("make_dataset: need at least one sequence"));
    }
    let stats = reference_stats(system.tag());
    let mut out = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut seq_rng = rng.split();
        let z0: Vec<f64> = stats
            .bbox_min
            .iter()
            .zip(&stats.bbox_max)
            .map(|(&lo, &hi)| seq_rng.uniform_range(lo, hi))
            .collect();
        let total_steps = burn_in + seq_len - 1;
        let noise = system.tag().is_stochastic();
        let full = simulate(
            system,
            &z0,
            total_steps,
            delta,
            if noise { Some(&mut seq_rng) } else { None },
        )?;
        let states = full.states[burn_in..].to_vec();
        debug_assert_eq!(states.len(), seq_len);
        out.push(StateSequence { states, delta, tag: system.tag() });
    }
    Ok(out)
}

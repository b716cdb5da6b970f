//! The generative side of the state-space model: bilinear drift networks,
//! their discrete flow, the learned diagonal transition covariance, Gaussian
//! transition/emission log-densities, and stochastic sequence generation.

mod binn;

pub use binn::{Binn, BinnMode, BinnVars, BINN_INIT_STD, STENCIL_RADIUS};

use crate::adcore::{Array, Rng, Tape, Var, RAW_VARIANCE_CLAMP, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, Binder, Mlp, MlpVars, Parameterized};
use crate::systems::{rk4_step, DIVERGENCE_LIMIT};

const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

/// Map a raw network output to a strictly positive variance on the tape:
/// clamp, exponentiate, add the floor. Shared by every variance head.
pub fn variance_transform_tape(tape: &mut Tape, raw: Var, d: usize) -> Result<Var> {
    let clamped = tape.clamp(raw, RAW_VARIANCE_CLAMP.0, RAW_VARIANCE_CLAMP.1)?;
    let expd = tape.exp(clamped);
    let floor = tape.constant(Array::vector(vec![VARIANCE_FLOOR; d]));
    tape.add(expd, floor)
}

/// `n` compositions of the one-step fourth-order Runge–Kutta map with step
/// `delta` applied to the network drift.
pub fn flow_n(net: &Binn, z: &[f64], n: usize, delta: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::validation("flow needs at least one step"));
    }
    if z.len() != net.dim() {
        return Err(Error::validation(format!(
            "flow input has {} components, network expects {}",
            z.len(),
            net.dim()
        )));
    }
    let mut cur = z.to_vec();
    for step in 0..n {
        cur = rk4_step(|s| net.drift_unchecked(s), &cur, delta)
            .map_err(|e| Error::computation(format!("flow step {step}: {e}")))?;
        if cur.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::computation(format!("flow diverged at step {step}")));
        }
    }
    Ok(cur)
}

/// Saturation bound on the stage inputs of the differentiable flow. Every
/// attractor the networks are fit on lives well inside ±64 (both in raw and
/// in centred/scaled coordinates), so on-data trajectories never touch the
/// bound and the map stays exactly Runge–Kutta. Runaway iterates mid-training
/// — a quadratic drift composed through the nested stages is degree 16 in the
/// state, so an off-attractor input can overflow within a couple of steps —
/// saturate instead of diverging: the loss stays finite and its magnitude
/// still steers the fit back toward the data.
pub const STATE_GUARD: f64 = 64.0;

/// One tape-recorded Runge–Kutta step of the network drift with saturated
/// stage inputs (see [`STATE_GUARD`]).
fn rk4_tape(tape: &mut Tape, net: &Binn, vars: &BinnVars, z: Var, delta: f64) -> Result<Var> {
    let z = tape.clamp(z, -STATE_GUARD, STATE_GUARD)?;
    let k1 = net.drift_tape(tape, vars, z)?;
    let h1 = tape.scalar_mul(delta / 2.0, k1);
    let z2 = tape.add(z, h1)?;
    let z2 = tape.clamp(z2, -STATE_GUARD, STATE_GUARD)?;
    let k2 = net.drift_tape(tape, vars, z2)?;
    let h2 = tape.scalar_mul(delta / 2.0, k2);
    let z3 = tape.add(z, h2)?;
    let z3 = tape.clamp(z3, -STATE_GUARD, STATE_GUARD)?;
    let k3 = net.drift_tape(tape, vars, z3)?;
    let h3 = tape.scalar_mul(delta, k3);
    let z4 = tape.add(z, h3)?;
    let z4 = tape.clamp(z4, -STATE_GUARD, STATE_GUARD)?;
    let k4 = net.drift_tape(tape, vars, z4)?;

    let k2x2 = tape.scalar_mul(2.0, k2);
    let k3x2 = tape.scalar_mul(2.0, k3);
    let s1 = tape.add(k1, k2x2)?;
    let s2 = tape.add(k3x2, k4)?;
    let s = tape.add(s1, s2)?;
    let inc = tape.scalar_mul(delta / 6.0, s);
    tape.add(z, inc)
}

/// Tape-recorded version of [`flow_n`]; gradients flow into both the state
/// and the network weights. Stage inputs saturate at [`STATE_GUARD`], so the
/// two agree exactly on states inside the bound and the tape version stays
/// finite (with usable gradients) on runaway states where the plain flow
/// would diverge.
pub fn flow_n_tape(
    tape: &mut Tape,
    net: &Binn,
    vars: &BinnVars,
    z: Var,
    n: usize,
    delta: f64,
) -> Result<Var> {
    if n == 0 {
        return Err(Error::validation("flow needs at least one step"));
    }
    let mut cur = z;
    for step in 0..n {
        cur = rk4_tape(tape, net, vars, cur, delta)?;
        let v = tape.value(cur);
        if !v.all_finite() || v.data().iter().any(|x| x.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::computation(format!("flow diverged at step {step}")));
        }
    }
    Ok(cur)
}

/// Diagonal transition covariance network: maps `concat(z_prev, z_pred)` to a
/// strictly positive variance per state component through a clamped
/// exponential with an additive floor.
#[derive(Debug, Clone)]
pub struct VarDynNet {
    mlp: Mlp,
    d_z: usize,
}

impl VarDynNet {
    pub fn new(d_z: usize, rng: &mut Rng) -> Result<Self> {
        if d_z == 0 {
            return Err(Error::validation("variance network dimension must be positive"));
        }
        let mlp = Mlp::new(&[2 * d_z, 4 * d_z, 4 * d_z, d_z], Activation::Tanh, rng)?;
        Ok(VarDynNet { mlp, d_z })
    }

    /// All weights zero, output bias set so the raw output is `raw`
    /// everywhere: variance is exp(clamp(raw)) + floor for every input.
    pub fn with_constant_raw(d_z: usize, raw: f64) -> Result<Self> {
        let mut rng = Rng::new(0);
        let mut net = Self::new(d_z, &mut rng)?;
        net.mlp.visit_mut("", &mut |name, a| {
            let fill = if name == "b2" { raw } else { 0.0 };
            a.data_mut().fill(fill);
        });
        Ok(net)
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    fn transform(raw: f64) -> f64 {
        raw.clamp(RAW_VARIANCE_CLAMP.0, RAW_VARIANCE_CLAMP.1).exp() + VARIANCE_FLOOR
    }

    pub fn variances(&self, z_prev: &[f64], z_pred: &[f64]) -> Result<Vec<f64>> {
        if z_prev.len() != self.d_z || z_pred.len() != self.d_z {
            return Err(Error::validation(format!(
                "variance network expects two {}-vectors, got {} and {}",
                self.d_z,
                z_prev.len(),
                z_pred.len()
            )));
        }
        let mut input = z_prev.to_vec();
        input.extend_from_slice(z_pred);
        let raw = self.mlp.forward(&input)?;
        Ok(raw.into_iter().map(Self::transform).collect())
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> MlpVars {
        self.mlp.bind(b, prefix)
    }

    pub fn variances_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        z_prev: Var,
        z_pred: Var,
    ) -> Result<Var> {
        let input = tape.concat(&[z_prev, z_pred])?;
        let raw = self.mlp.forward_tape(tape, vars, input)?;
        variance_transform_tape(tape, raw, self.d_z)
    }
}

impl Parameterized for VarDynNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        self.mlp.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        self.mlp.visit_mut(prefix, f);
    }
}

/// Observation operator plus fixed diagonal observation covariance.
#[derive(Debug, Clone)]
pub enum EmissionOperator {
    /// Observations live in state space: H = id.
    Identity { dim: usize },
    /// Learned nonlinear operator.
    Learned(Mlp),
}

#[derive(Debug, Clone)]
pub struct EmissionModel {
    operator: EmissionOperator,
    r_diag: Vec<f64>,
}

pub enum EmissionVars {
    Identity,
    Learned(MlpVars),
}

impl EmissionModel {
    pub fn identity(dim: usize, r_diag: Vec<f64>) -> Result<Self> {
        if r_diag.len() != dim {
            return Err(Error::validation(format!(
                "identity emission of dimension {dim} with {} covariance entries",
                r_diag.len()
            )));
        }
        Self::check_r(&r_diag)?;
        Ok(EmissionModel { operator: EmissionOperator::Identity { dim }, r_diag })
    }

    pub fn learned(mlp: Mlp, r_diag: Vec<f64>) -> Result<Self> {
        if r_diag.len() != mlp.out_dim() {
            return Err(Error::validation(format!(
                "emission output dimension {} with {} covariance entries",
                mlp.out_dim(),
                r_diag.len()
            )));
        }
        Self::check_r(&r_diag)?;
        Ok(EmissionModel { operator: EmissionOperator::Learned(mlp), r_diag })
    }

    fn check_r(r: &[f64]) -> Result<()> {
        if r.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::validation("observation covariance entries must be positive"));
        }
        Ok(())
    }

    pub fn d_z(&self) -> usize {
        match &self.operator {
            EmissionOperator::Identity { dim } => *dim,
            EmissionOperator::Learned(mlp) => mlp.in_dim(),
        }
    }

    pub fn d_x(&self) -> usize {
        self.r_diag.len()
    }

    pub fn r_diag(&self) -> &[f64] {
        &self.r_diag
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.operator, EmissionOperator::Identity { .. })
    }

    pub fn operator(&self) -> &EmissionOperator {
        &self.operator
    }

    /// Map a state into observation space.
    pub fn observe(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d_z() {
            return Err(Error::validation(format!(
                "emission input has {} components, expected {}",
                z.len(),
                self.d_z()
            )));
        }
        match &self.operator {
            EmissionOperator::Identity { .. } => Ok(z.to_vec()),
            EmissionOperator::Learned(mlp) => mlp.forward(z),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> EmissionVars {
        match &self.operator {
            EmissionOperator::Identity { .. } => EmissionVars::Identity,
            EmissionOperator::Learned(mlp) => EmissionVars::Learned(mlp.bind(b, prefix)),
        }
    }

    pub fn observe_tape(&self, tape: &mut Tape, vars: &EmissionVars, z: Var) -> Result<Var> {
        match (&self.operator, vars) {
            (EmissionOperator::Identity { .. }, EmissionVars::Identity) => Ok(z),
            (EmissionOperator::Learned(mlp), EmissionVars::Learned(mv)) => {
                mlp.forward_tape(tape, mv, z)
            }
            _ => Err(Error::validation("emission operator and bound variables disagree")),
        }
    }
}

impl Parameterized for EmissionModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        if let EmissionOperator::Learned(mlp) = &self.operator {
            mlp.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        if let EmissionOperator::Learned(mlp) = &mut self.operator {
            mlp.visit_mut(prefix, f);
        }
    }
}

/// log N(z_next; F^n(z_prev), diag(d)) with d from the variance network
/// evaluated at (z_prev, F^n(z_prev)).
#[allow(clippy::too_many_arguments)]
pub fn transition_logpdf(
    tape: &mut Tape,
    net: &Binn,
    net_vars: &BinnVars,
    varnet: &VarDynNet,
    varnet_vars: &MlpVars,
    z_prev: Var,
    z_next: Var,
    n: usize,
    delta: f64,
) -> Result<Var> {
    let d_z = net.dim();
    let mean = flow_n_tape(tape, net, net_vars, z_prev, n, delta)?;
    let var = varnet.variances_tape(tape, varnet_vars, z_prev, mean)?;
    let diff = tape.sub(z_next, mean)?;
    let sq = tape.square(diff);
    let ratio = tape.div(sq, var)?;
    let ln_var = tape.log(var)?;
    let terms = tape.add(ratio, ln_var)?;
    let s = tape.sum(terms);
    let c = tape.constant_scalar(d_z as f64 * LN_2PI);
    let tot = tape.add(s, c)?;
    Ok(tape.scalar_mul(-0.5, tot))
}

/// Σ over observed components of log N(x_j; H(z)_j, R_jj). Masked components
/// contribute exactly zero, to the value and to every gradient.
pub fn emission_logpdf(
    tape: &mut Tape,
    em: &EmissionModel,
    em_vars: &EmissionVars,
    z: Var,
    x: &[f64],
    mask: &[bool],
) -> Result<Var> {
    let d_x = em.d_x();
    if x.len() != d_x || mask.len() != d_x {
        return Err(Error::validation(format!(
            "emission density: observation {} / mask {} entries, operator emits {d_x}",
            x.len(),
            mask.len()
        )));
    }
    let hx = em.observe_tape(tape, em_vars, z)?;
    let x_const = tape.constant(Array::vector(x.to_vec()));
    let diff = tape.sub(x_const, hx)?;
    let gate =
        tape.constant(Array::vector(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()));
    let gated = tape.mul(diff, gate)?;
    let sq = tape.square(gated);
    let r_inv =
        tape.constant(Array::vector(em.r_diag().iter().map(|r| 1.0 / r).collect()));
    let weighted = tape.mul(sq, r_inv)?;
    let s = tape.sum(weighted);
    let log_norm: f64 = em
        .r_diag()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(r, _)| LN_2PI + r.ln())
        .sum();
    let c = tape.constant_scalar(log_norm);
    let tot = tape.add(s, c)?;
    Ok(tape.scalar_mul(-0.5, tot))
}

/// Roll out a stochastic sequence: repeatedly μ = F¹(z), d = variances(z, μ),
/// z ~ N(μ, diag d). Returns `n_steps + 1` states including `z0`.
pub fn generate_stochastic(
    net: &Binn,
    varnet: &VarDynNet,
    z0: &[f64],
    n_steps: usize,
    delta: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    if n_steps == 0 {
        return Err(Error::validation("stochastic generation needs at least one step"));
    }
    if z0.len() != net.dim() || varnet.d_z() != net.dim() {
        return Err(Error::validation(
            "stochastic generation: state, drift, and variance dimensions disagree",
        ));
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z0.to_vec());
    let mut cur = z0.to_vec();
    for step in 0..n_steps {
        let mu = flow_n(net, &cur, 1, delta)?;
        let d = varnet.variances(&cur, &mu)?;
        cur = mu
            .iter()
            .zip(&d)
            .map(|(&m, &v)| m + v.sqrt() * rng.normal())
            .collect();
        if cur.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::computation(format!(
                "stochastic generation diverged at step {step}"
            )));
        }
        states.push(cur.clone());
    }
    Ok(states)
}

/// The full generative model: drift network, optional transition covariance
/// network, emission model, and the integration step.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub binn: Binn,
    pub varnet: Option<VarDynNet>,
    pub emission: EmissionModel,
    pub delta: f64,
}

pub struct GenerativeVars {
    pub binn: BinnVars,
    pub varnet: Option<MlpVars>,
    pub emission: EmissionVars,
}

impl GenerativeModel {
    pub fn d_z(&self) -> usize {
        self.binn.dim()
    }

    pub fn d_x(&self) -> usize {
        self.emission.d_x()
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta <= 0.0 || !self.delta.is_finite() {
            return Err(Error::validation("integration step must be positive"));
        }
        if self.emission.d_z() != self.binn.dim() {
            return Err(Error::validation(format!(
                "emission expects {}-dimensional states, drift network has {}",
                self.emission.d_z(),
                self.binn.dim()
            )));
        }
        if let Some(vn) = &self.varnet {
            if vn.d_z() != self.binn.dim() {
                return Err(Error::validation(format!(
                    "variance network dimension {} does not match drift network {}",
                    vn.d_z(),
                    self.binn.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> GenerativeVars {
        GenerativeVars {
            binn: self.binn.bind(b, &join(prefix, "binn")),
            varnet: self.varnet.as_ref().map(|vn| vn.bind(b, &join(prefix, "varnet"))),
            emission: self.emission.bind(b, &join(prefix, "emission")),
        }
    }
}

impl Parameterized for GenerativeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        self.binn.visit(&join(prefix, "binn"), f);
        if let Some(vn) = &self.varnet {
            vn.visit(&join(prefix, "varnet"), f);
        }
        self.emission.visit(&join(prefix, "emission"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        self.binn.visit_mut(&join(prefix, "binn"), f);
        if let Some(vn) = &mut self.varnet {
            vn.visit_mut(&join(prefix, "varnet"), f);
        }
        self.emission.visit_mut(&join(prefix, "emission"), f);
    }
}

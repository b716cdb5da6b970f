//! Stochastic (perturbed-observation) ensemble Kalman smoother.
//!
//! Sequential formulation: members are propagated by the one-step flow plus
//! model noise; each analysis solves the innovation system once and applies
//! the resulting increments to the current step and, through cross-time
//! ensemble covariances, to every step inside the smoothing lag window.

use crate::adcore::Rng;
use crate::error::{Error, Result};
use crate::observation::ObservationSeries;
use crate::prior::{flow_n, Binn, EmissionModel};

/// Diagonal jitter added when an innovation covariance fails to factor.
pub const INNOVATION_JITTER: f64 = 1e-8;

/// One time step's collection of equally weighted state hypotheses.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Vec<f64>>, // [n_ensemble][d_z]
}

impl Ensemble {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members.first().map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.members.len() as f64;
        let d = self.dim();
        let mut out = vec![0.0; d];
        for m in &self.members {
            for (o, v) in out.iter_mut().zip(m) {
                *o += v / n;
            }
        }
        out
    }

    /// Per-component sample variance (divisor n−1).
    pub fn variance(&self) -> Vec<f64> {
        let n = self.members.len();
        let mean = self.mean();
        let mut out = vec![0.0; self.dim()];
        for m in &self.members {
            for ((o, v), mu) in out.iter_mut().zip(m).zip(&mean) {
                *o += (v - mu) * (v - mu);
            }
        }
        for o in &mut out {
            *o /= (n - 1) as f64;
        }
        out
    }
}

/// Smoother configuration. The initial ensemble is drawn from a diagonal
/// Gaussian with the given mean and variance.
#[derive(Debug, Clone)]
pub struct EnksConfig {
    pub n_ensemble: usize,
    /// Diagonal model-noise covariance added to every forecast.
    pub q_diag: Vec<f64>,
    /// Smoothing window: increments from the analysis at step k reach back to
    /// step k − lag. `None` smooths over the whole past.
    pub lag: Option<usize>,
    pub init_mean: Vec<f64>,
    pub init_var: Vec<f64>,
}

impl EnksConfig {
    fn validate(&self, d_z: usize) -> Result<()> {
        if self.n_ensemble < 2 {
            return Err(Error::validation(format!(
                "ensemble needs at least 2 members, got {}",
                self.n_ensemble
            )));
        }
        if self.q_diag.len() != d_z || self.init_mean.len() != d_z || self.init_var.len() != d_z {
            return Err(Error::validation(format!(
                "smoother configured for dimension {}/{}/{}, model has {d_z}",
                self.q_diag.len(),
                self.init_mean.len(),
                self.init_var.len()
            )));
        }
        if self.q_diag.iter().chain(&self.init_var).any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::validation("noise variances must be non-negative"));
        }
        Ok(())
    }
}

/// In-place Cholesky factorization (lower triangle) of a symmetric
/// positive-definite matrix stored row-major.
fn cholesky(a: &mut [f64], m: usize) -> Result<()> {
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::computation(format!(
                        "cholesky: non-positive pivot at row {i}"
                    )));
                }
                a[i * m + i] = s.sqrt();
            } else {
                a[i * m + j] = s / a[j * m + j];
            }
        }
        for j in (i + 1)..m {
            a[i * m + j] = 0.0;
        }
    }
    Ok(())
}

/// Solve L Lᵀ x = b given the lower factor.
fn chol_solve(l: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * m + k] * y[k];
        }
        y[i] = s / l[i * m + i];
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = y[i];
        for k in (i + 1)..m {
            s -= l[k * m + i] * x[k];
        }
        x[i] = s / l[i * m + i];
    }
    x
}

/// Factor `a`, falling back to a jittered diagonal when it is numerically
/// singular.
fn factor_with_jitter(mut a: Vec<f64>, m: usize) -> Result<Vec<f64>> {
    let plain = a.clone();
    match cholesky(&mut a, m) {
        Ok(()) => Ok(a),
        Err(_) => {
            log::warn!(
                "innovation covariance singular; retrying with {INNOVATION_JITTER} jitter"
            );
            let mut jittered = plain;
            for i in 0..m {
                jittered[i * m + i] += INNOVATION_JITTER;
            }
            cholesky(&mut jittered, m)?;
            Ok(jittered)
        }
    }
}

/// Smoother over an arbitrary one-step state map. See [`enks_smooth`] for the
/// drift-network entry point.
pub fn enks_smooth_flow<F>(
    step: F,
    config: &EnksConfig,
    em: &EmissionModel,
    obs: &ObservationSeries,
    rng: &mut Rng,
) -> Result<Vec<Ensemble>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d_z = em.d_z();
    config.validate(d_z)?;
    if obs.is_empty() {
        return Err(Error::validation("smoother needs a nonempty observation series"));
    }
    if obs.dim() != em.d_x() {
        return Err(Error::validation(format!(
            "observations have dimension {}, emission emits {}",
            obs.dim(),
            em.d_x()
        )));
    }
    let n_e = config.n_ensemble;
    let len = obs.len();
    let lag = config.lag.unwrap_or(len);

    // initial ensemble
    let mut ens: Vec<Vec<Vec<f64>>> = Vec::with_capacity(len);
    let first: Vec<Vec<f64>> = (0..n_e)
        .map(|_| {
            config
                .init_mean
                .iter()
                .zip(&config.init_var)
                .map(|(m, v)| m + v.sqrt() * rng.normal())
                .collect()
        })
        .collect();
    ens.push(first);

    analyze(&mut ens, 0, lag, em, obs, rng)?;

    for k in 1..len {
        // forecast: one-step flow plus model noise
        let mut forecast = Vec::with_capacity(n_e);
        for member in &ens[k - 1] {
            let mut next = step(member)
                .map_err(|e| Error::computation(format!("forecast at step {k}: {e}")))?;
            for (x, q) in next.iter_mut().zip(&config.q_diag) {
                *x += q.sqrt() * rng.normal();
            }
            forecast.push(next);
        }
        ens.push(forecast);
        analyze(&mut ens, k, lag, em, obs, rng)?;
    }

    Ok(ens.into_iter().map(|members| Ensemble { members }).collect())
}

/// Perturbed-observation analysis at step `k`, with increments propagated
/// back through the lag window via cross-time ensemble covariances.
fn analyze(
    ens: &mut [Vec<Vec<f64>>],
    k: usize,
    lag: usize,
    em: &EmissionModel,
    obs: &ObservationSeries,
    rng: &mut Rng,
) -> Result<()> {
    let observed: Vec<usize> =
        (0..obs.dim()).filter(|&j| obs.mask[k][j]).collect();
    if observed.is_empty() {
        return Ok(());
    }
    let m = observed.len();
    let n_e = ens[k].len();
    let scale = 1.0 / (n_e - 1) as f64;

    // predicted observations, restricted to observed components
    let mut y_pred = Vec::with_capacity(n_e);
    for member in &ens[k] {
        let full = em.observe(member)?;
        y_pred.push(observed.iter().map(|&j| full[j]).collect::<Vec<f64>>());
    }
    let mut y_mean = vec![0.0; m];
    for y in &y_pred {
        for (s, v) in y_mean.iter_mut().zip(y) {
            *s += v / n_e as f64;
        }
    }
    let y_anom: Vec<Vec<f64>> = y_pred
        .iter()
        .map(|y| y.iter().zip(&y_mean).map(|(v, mu)| v - mu).collect())
        .collect();

    // innovation covariance S = Y Yᵀ/(n−1) + R
    let mut s = vec![0.0; m * m];
    for y in &y_anom {
        for a in 0..m {
            for b in 0..m {
                s[a * m + b] += y[a] * y[b] * scale;
            }
        }
    }
    for (a, &j) in observed.iter().enumerate() {
        s[a * m + a] += em.r_diag()[j];
    }
    let l = factor_with_jitter(s, m)?;

    // perturbed innovations, solved against S member by member
    let mut solved = Vec::with_capacity(n_e); // [n_e][m]
    for y in &y_pred {
        let d: Vec<f64> = observed
            .iter()
            .zip(y)
            .map(|(&j, yp)| obs.values[k][j] + em.r_diag()[j].sqrt() * rng.normal() - yp)
            .collect();
        solved.push(chol_solve(&l, m, &d));
    }

    // apply increments over the window j ∈ [k−lag, k]
    let start = k.saturating_sub(lag);
    for j in start..=k {
        let d_z = ens[j][0].len();
        let n = ens[j].len() as f64;
        let mut z_mean = vec![0.0; d_z];
        for member in &ens[j] {
            for (s, v) in z_mean.iter_mut().zip(member) {
                *s += v / n;
            }
        }
        // cross covariance P = Z Yᵀ/(n−1): [d_z, m]
        let mut p = vec![0.0; d_z * m];
        for (member, y) in ens[j].iter().zip(&y_anom) {
            for r in 0..d_z {
                let za = member[r] - z_mean[r];
                for c in 0..m {
                    p[r * m + c] += za * y[c] * scale;
                }
            }
        }
        for (member, u) in ens[j].iter_mut().zip(&solved) {
            for r in 0..d_z {
                let mut inc = 0.0;
                for c in 0..m {
                    inc += p[r * m + c] * u[c];
                }
                member[r] += inc;
            }
        }
    }
    Ok(())
}

/// Ensemble Kalman smoother over a drift network's one-step flow.
pub fn enks_smooth(
    net: &Binn,
    delta: f64,
    config: &EnksConfig,
    em: &EmissionModel,
    obs: &ObservationSeries,
    rng: &mut Rng,
) -> Result<Vec<Ensemble>> {
    if net.dim() != em.d_z() {
        return Err(Error::validation(format!(
            "drift network dimension {} does not match emission input {}",
            net.dim(),
            em.d_z()
        )));
    }
    enks_smooth_flow(|z| flow_n(net, z, 1, delta), config, em, obs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameterized;
    use crate::observation::OperatorTag;
    use crate::systems::{simulate, System, SystemTag};

    fn scalar_em(r: f64) -> EmissionModel {
        EmissionModel::identity(1, vec![r]).unwrap()
    }

    fn series(values: Vec<Vec<f64>>, mask: Vec<Vec<bool>>, delta: f64) -> ObservationSeries {
        ObservationSeries { values, mask, delta, r: 0.0, operator: OperatorTag::Identity }
    }

    #[test]
    fn cholesky_solve_matches_hand_solution() {
        // A = [[4,2,0],[2,5,1],[0,1,3]], b = Ax for x = (1,−2,3)
        let a = vec![4.0, 2.0, 0.0, 2.0, 5.0, 1.0, 0.0, 1.0, 3.0];
        let x_true = [1.0, -2.0, 3.0];
        let b: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a[i * 3 + j] * x_true[j]).sum())
            .collect();
        let mut l = a.clone();
        cholesky(&mut l, 3).unwrap();
        let x = chol_solve(&l, 3, &b);
        for (got, want) in x.iter().zip(&x_true) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_innovation_is_rescued_by_jitter() {
        // rank-1 matrix: plain factorization fails, jittered succeeds
        let a = vec![1.0, 1.0, 1.0, 1.0];
        assert!(cholesky(&mut a.clone(), 2).is_err());
        let l = factor_with_jitter(a, 2).unwrap();
        assert!(l[0] > 0.0 && l[3] > 0.0);
    }

    #[test]
    fn consistent_noise_free_observations_are_tracked() {
        // observations generated by the model itself, vanishing noise levels
        let system = System::from_tag(SystemTag::L63);
        let truth = simulate(&system, &[2.0, 3.0, 15.0], 30, 0.01, None).unwrap();
        let net = Binn::exact_l63(&Default::default());
        let em = EmissionModel::identity(3, vec![1e-12; 3]).unwrap();
        let obs = series(
            truth.states.clone(),
            vec![vec![true; 3]; truth.len()],
            0.01,
        );
        let config = EnksConfig {
            n_ensemble: 12,
            q_diag: vec![0.0; 3],
            lag: None,
            init_mean: truth.states[0].clone(),
            init_var: vec![1e-10; 3],
        };
        let smoothed =
            enks_smooth(&net, 0.01, &config, &em, &obs, &mut Rng::new(3)).unwrap();
        for (ens, truth_state) in smoothed.iter().zip(&truth.states) {
            for (m, t) in ens.mean().iter().zip(truth_state) {
                assert!((m - t).abs() < 1e-6, "{m} vs {t}");
            }
        }
    }

    /// Closed-form Kalman filter + backward smoother on z' = a z + w.
    fn rts_reference(
        a: f64,
        q: f64,
        r: f64,
        init_mean: f64,
        init_var: f64,
        xs: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let n = xs.len();
        let mut mf = vec![0.0; n]; // filtered means
        let mut pf = vec![0.0; n];
        let mut mp = vec![0.0; n]; // predicted
        let mut pp = vec![0.0; n];
        for k in 0..n {
            let (m_pred, p_pred) = if k == 0 {
                (init_mean, init_var)
            } else {
                (a * mf[k - 1], a * a * pf[k - 1] + q)
            };
            mp[k] = m_pred;
            pp[k] = p_pred;
            let gain = p_pred / (p_pred + r);
            mf[k] = m_pred + gain * (xs[k] - m_pred);
            pf[k] = (1.0 - gain) * p_pred;
        }
        let mut ms = mf.clone();
        let mut ps = pf.clone();
        for k in (0..n - 1).rev() {
            let c = pf[k] * a / pp[k + 1];
            ms[k] = mf[k] + c * (ms[k + 1] - mp[k + 1]);
            ps[k] = pf[k] + c * c * (ps[k + 1] - pp[k + 1]);
        }
        (ms, ps)
    }

    /// Drift constant c so that one Runge–Kutta step of z' = cz with δ = 1
    /// multiplies the state by `target` exactly (the step is the quartic
    /// Taylor polynomial of the exponential).
    pub(crate) fn drift_for_step_factor(target: f64) -> f64 {
        let poly = |c: f64| 1.0 + c + c * c / 2.0 + c * c * c / 6.0 + c * c * c * c / 24.0;
        let (mut lo, mut hi) = (-1.0, 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if poly(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn scalar_linear_net(factor: f64) -> Binn {
        let mut rng = Rng::new(0);
        let mut net = Binn::dense(1, &mut rng).unwrap();
        let c = drift_for_step_factor(factor);
        net.visit_mut("", &mut |name, arr| {
            arr.data_mut().fill(if name == "lin_w" { c } else { 0.0 });
        });
        net
    }

    #[test]
    fn scalar_linear_net_realizes_the_contraction() {
        let net = scalar_linear_net(0.9);
        let out = flow_n(&net, &[1.0], 1, 1.0).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-12, "{}", out[0]);
    }

    fn run_scalar_case(n_e: usize, seed: u64) -> (f64, f64) {
        // z' = 0.9 z + w, w ~ N(0, 0.1); x = z + v, v ~ N(0, 0.5)
        let (a, q, r): (f64, f64, f64) = (0.9, 0.1, 0.5);
        let (init_mean, init_var): (f64, f64) = (0.0, 1.0);
        let steps = 40;
        let mut rng = Rng::new(seed);
        let mut z = init_mean + init_var.sqrt() * rng.normal();
        let mut zs = vec![z];
        for _ in 0..steps {
            z = a * z + q.sqrt() * rng.normal();
            zs.push(z);
        }
        let xs: Vec<f64> = zs.iter().map(|z| z + r.sqrt() * rng.normal()).collect();

        let (ms, ps) = rts_reference(a, q, r, init_mean, init_var, &xs);

        let net = scalar_linear_net(a);
        let em = scalar_em(r);
        let obs = series(
            xs.iter().map(|x| vec![*x]).collect(),
            vec![vec![true]; xs.len()],
            1.0,
        );
        let config = EnksConfig {
            n_ensemble: n_e,
            q_diag: vec![q],
            lag: None,
            init_mean: vec![init_mean],
            init_var: vec![init_var],
        };
        let smoothed =
            enks_smooth(&net, 1.0, &config, &em, &obs, &mut rng).unwrap();

        let mse: f64 = smoothed
            .iter()
            .zip(&ms)
            .map(|(ens, m)| (ens.mean()[0] - m) * (ens.mean()[0] - m))
            .sum::<f64>()
            / smoothed.len() as f64;
        let mean_std = (ps.iter().sum::<f64>() / ps.len() as f64).sqrt();
        (mse.sqrt(), mean_std)
    }

    #[test]
    fn scalar_linear_case_approaches_the_exact_smoother() {
        let (rmse, std) = run_scalar_case(800, 7);
        assert!(rmse < 0.15 * std, "rmse {rmse} vs posterior std {std}");
    }

    #[test]
    fn larger_ensembles_are_more_accurate() {
        let mut small = 0.0;
        let mut large = 0.0;
        for seed in 0..8 {
            small += run_scalar_case(10, 100 + seed).0;
            large += run_scalar_case(400, 100 + seed).0;
        }
        assert!(large < small, "mean rmse: n=400 {large} !< n=10 {small}");
    }

    #[test]
    fn zero_lag_analysis_touches_only_the_current_step() {
        let net = scalar_linear_net(0.9);
        let em = scalar_em(0.5);
        let steps = 6;
        // observation only at the last step
        let mut mask = vec![vec![false]; steps];
        mask[steps - 1] = vec![true];
        let values = vec![vec![1.0]; steps];
        let with_obs = series(values.clone(), mask, 1.0);
        let no_obs = series(values, vec![vec![false]; steps], 1.0);

        let config = EnksConfig {
            n_ensemble: 8,
            q_diag: vec![0.1],
            lag: Some(0),
            init_mean: vec![0.0],
            init_var: vec![1.0],
        };
        let a = enks_smooth(&net, 1.0, &config, &em, &with_obs, &mut Rng::new(5)).unwrap();
        let b = enks_smooth(&net, 1.0, &config, &em, &no_obs, &mut Rng::new(5)).unwrap();
        for k in 0..steps - 1 {
            assert_eq!(a[k].members, b[k].members, "step {k} must be a pure forecast");
        }
        assert_ne!(a[steps - 1].members, b[steps - 1].members);

        // full smoothing propagates the same increment back to step 0
        let full = EnksConfig { lag: None, ..config };
        let c = enks_smooth(&net, 1.0, &full, &em, &with_obs, &mut Rng::new(5)).unwrap();
        assert_ne!(c[0].members, b[0].members);
    }

    #[test]
    fn smoothing_is_seed_reproducible_and_validated() {
        let net = scalar_linear_net(0.9);
        let em = scalar_em(0.5);
        let obs = series(vec![vec![0.3]; 5], vec![vec![true]; 5], 1.0);
        let config = EnksConfig {
            n_ensemble: 4,
            q_diag: vec![0.1],
            lag: None,
            init_mean: vec![0.0],
            init_var: vec![1.0],
        };
        let a = enks_smooth(&net, 1.0, &config, &em, &obs, &mut Rng::new(9)).unwrap();
        let b = enks_smooth(&net, 1.0, &config, &em, &obs, &mut Rng::new(9)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.members, y.members);
        }

        let too_small = EnksConfig { n_ensemble: 1, ..config.clone() };
        assert!(enks_smooth(&net, 1.0, &too_small, &em, &obs, &mut Rng::new(9)).is_err());
        let empty = series(vec![], vec![], 1.0);
        assert!(enks_smooth(&net, 1.0, &config, &em, &empty, &mut Rng::new(9)).is_err());
    }
}

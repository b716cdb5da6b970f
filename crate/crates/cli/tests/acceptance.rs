//! Acceptance gate: one test per advertised guarantee of the toolkit, from
//! integrator order through desk-scale identification benchmarks. Each test
//! asserts its stated tolerance and prints a `PASS:` line with the measured
//! numbers (visible with `--nocapture`); a failed assertion is the FAIL line.
//!
//! The desk-scale runs (tests 08–10) train real models and take a few
//! minutes each; test 12 re-runs them from scratch to prove bitwise
//! reproducibility. Run serially to keep peak memory low:
//! `cargo test -p dynid-cli --test acceptance -- --test-threads=1 --nocapture`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use dynid::adcore::{Array, Rng, Tape, Var, VARIANCE_FLOOR};
use dynid::inference::{enks_smooth_flow, EnksConfig, LstmInference, LstmInferenceConfig};
use dynid::metrics::{lyapunov1, MetricReport};
use dynid::nn::{named_gradients, Activation, Binder, Mlp, Parameterized};
use dynid::observation::ObservationSeries;
use dynid::prior::{
    flow_n, generate_stochastic, Binn, EmissionModel, GenerativeModel, VarDynNet,
};
use dynid::systems::{
    l63_rhs, l96_rhs, rk4_step, simulate, System, SystemTag, L63Params, L63sParams, L96Params,
};
use dynid::training::{
    elbo_pass, loss_determ, loss_elbo_lstm, loss_map, lstm_posterior_means, ElboInit, JointModel,
    Objective,
};
use dynid::Result;

use dynid_cli::{
    cmd_evaluate, cmd_generate, cmd_report, cmd_train, ExperimentConfig, Preset, ResolvedConfig,
};

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

fn pass(line: &str) {
    println!("PASS: {line}");
}

// ---------------------------------------------------------------- test 01

/// Fourth-order convergence of the integrator behind every flow map: on
/// dz/dt = z over a unit horizon, halving the step must shrink the error by
/// roughly 2⁴ (ratio within [12, 20]).
#[test]
fn acceptance_01_integrator_is_fourth_order() {
    let started = Instant::now();
    // dense scalar network wired to drift(z) = z
    let mut net = Binn::dense(1, &mut Rng::new(0)).unwrap();
    net.visit_mut("", &mut |name, a| {
        a.data_mut().fill(if name == "lin_w" { 1.0 } else { 0.0 });
    });

    let errors: Vec<f64> = [0.1f64, 0.05, 0.025]
        .iter()
        .map(|&h| {
            let n = (1.0 / h).round() as usize;
            let out = flow_n(&net, &[1.0], n, h).unwrap();
            (out[0] - std::f64::consts::E).abs()
        })
        .collect();
    let r1 = errors[0] / errors[1];
    let r2 = errors[1] / errors[2];
    assert!((12.0..=20.0).contains(&r1), "halving 0.1 -> 0.05 shrank error by {r1}");
    assert!((12.0..=20.0).contains(&r2), "halving 0.05 -> 0.025 shrank error by {r2}");
    assert!(started.elapsed().as_secs_f64() < 1.0);
    pass(&format!("integrator error ratios {r1:.2} and {r2:.2} lie in [12, 20]"));
}

// ---------------------------------------------------------------- test 02

fn attractor_start(tag: SystemTag, z0: &[f64], delta: f64) -> Vec<f64> {
    let sys = System::from_tag(tag);
    let burn = simulate(&sys, z0, 2000, delta, None).unwrap();
    burn.states.last().unwrap().clone()
}

/// The largest-Lyapunov estimator reproduces the literature values on the
/// true systems: 0.91 ± 0.05 for the three-variable system, 1.67 ± 0.10 for
/// the forty-variable ring at its standard forcing.
#[test]
fn acceptance_02_reference_lyapunov_exponents() {
    let started = Instant::now();

    let p63 = L63Params::default();
    let z0 = attractor_start(SystemTag::L63, &[1.0, 1.0, 20.0], 0.01);
    let flow63 = |z: &[f64]| rk4_step(|s| l63_rhs(s, &p63), z, 0.01);
    let l1_63 = lyapunov1(&flow63, &z0, 20_000, 0.01, 1e-8).unwrap();
    assert_close(l1_63, 0.91, 0.05);

    let p96 = L96Params::default();
    let mut seed96 = vec![p96.forcing; p96.n_z];
    seed96[0] += 0.01;
    let z0 = attractor_start(SystemTag::L96, &seed96, 0.05);
    let flow96 = |z: &[f64]| rk4_step(|s| l96_rhs(s, &p96), z, 0.05);
    let l1_96 = lyapunov1(&flow96, &z0, 20_000, 0.05, 1e-8).unwrap();
    assert_close(l1_96, 1.67, 0.10);

    assert!(started.elapsed().as_secs_f64() < 30.0);
    pass(&format!(
        "largest Lyapunov exponents {l1_63:.3} (vs 0.91±0.05) and {l1_96:.3} (vs 1.67±0.10)"
    ));
}

// ---------------------------------------------------------------- test 03

/// The drift networks admit exact weight settings that reproduce the
/// reference right-hand sides to floating-point accuracy along the
/// attractors.
#[test]
fn acceptance_03_exact_weights_reproduce_reference_dynamics() {
    let started = Instant::now();

    let p63 = L63Params::default();
    let net63 = Binn::exact_l63(&p63);
    let sys = System::from_tag(SystemTag::L63);
    let traj = simulate(&sys, &[1.0, 1.0, 20.0], 2000, 0.01, None).unwrap();
    let mut worst: f64 = 0.0;
    for z in traj.states.iter().skip(1000) {
        let got = net63.drift(z).unwrap();
        let want = l63_rhs(z, &p63);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }

    let p96 = L96Params::default();
    let dense = Binn::exact_l96_dense(&p96).unwrap();
    let circular = Binn::exact_l96_circular(&p96).unwrap();
    let sys = System::from_tag(SystemTag::L96);
    let mut seed96 = vec![p96.forcing; p96.n_z];
    seed96[0] += 0.01;
    let traj = simulate(&sys, &seed96, 2000, 0.05, None).unwrap();
    for z in traj.states.iter().skip(1000) {
        let want = l96_rhs(z, &p96);
        for net in [&dense, &circular] {
            let got = net.drift(z).unwrap();
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
        }
    }

    assert!(worst < 1e-10, "worst drift mismatch {worst:e}");
    assert!(started.elapsed().as_secs_f64() < 1.0);
    pass(&format!("exact network weights match both right-hand sides to {worst:.2e} < 1e-10"));
}

// ---------------------------------------------------------------- test 04

/// Forward Kalman filter plus backward (RTS) smoother for the scalar model
/// z' = a·z + w, x = z + v. Returns smoothed means and variances.
fn rts_smoother(
    a: f64,
    q: f64,
    r: f64,
    m0: f64,
    p0: f64,
    xs: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let t = xs.len();
    let (mut m_f, mut p_f) = (vec![0.0; t], vec![0.0; t]);
    let (mut m_p, mut p_p) = (vec![0.0; t], vec![0.0; t]);
    let (mut m, mut p) = (m0, p0);
    for k in 0..t {
        if k > 0 {
            m = a * m;
            p = a * a * p + q;
        }
        m_p[k] = m;
        p_p[k] = p;
        let gain = p / (p + r);
        m += gain * (xs[k] - m);
        p *= 1.0 - gain;
        m_f[k] = m;
        p_f[k] = p;
    }
    let (mut m_s, mut p_s) = (m_f.clone(), p_f.clone());
    for k in (0..t - 1).rev() {
        let c = p_f[k] * a / p_p[k + 1];
        m_s[k] = m_f[k] + c * (m_s[k + 1] - m_p[k + 1]);
        p_s[k] = p_f[k] + c * c * (p_s[k + 1] - p_p[k + 1]);
    }
    (m_s, p_s)
}

/// With a large ensemble, the ensemble smoother agrees with the closed-form
/// smoother on a scalar linear-Gaussian model: the RMSE of the posterior
/// means stays below 5% of the posterior standard deviation.
#[test]
fn acceptance_04_ensemble_smoother_matches_closed_form() {
    let started = Instant::now();
    let (a, q, r, m0, p0) = (0.9, 0.04, 0.25, 0.3, 0.5);
    // Short window: every analysis update adds ~p/√Ne of sampling noise to
    // each smoothed state it reaches back to, so the gap to the exact
    // smoother grows with the window length, not just with 1/√Ne.
    let t_len = 12;
    let em = EmissionModel::identity(1, vec![r]).unwrap();
    let config = EnksConfig {
        n_ensemble: 2000,
        q_diag: vec![q],
        lag: None,
        init_mean: vec![m0],
        init_var: vec![p0],
    };

    let mut sq_err = 0.0;
    let mut sq_std = 0.0;
    let mut count = 0usize;
    for seed in 0..20u64 {
        let mut rng = Rng::stream(7000, seed);
        let mut z = m0 + p0.sqrt() * rng.normal();
        let mut xs = vec![z + r.sqrt() * rng.normal()];
        for _ in 1..t_len {
            z = a * z + q.sqrt() * rng.normal();
            xs.push(z + r.sqrt() * rng.normal());
        }
        let obs = ObservationSeries {
            values: xs.iter().map(|x| vec![*x]).collect(),
            mask: vec![vec![true]; t_len],
            delta: 1.0,
            r: 0.0,
            operator: dynid::observation::OperatorTag::Identity,
        };

        let (m_s, p_s) = rts_smoother(a, q, r, m0, p0, &xs);
        let step = |z: &[f64]| -> Result<Vec<f64>> { Ok(vec![a * z[0]]) };
        let ens = enks_smooth_flow(step, &config, &em, &obs, &mut rng).unwrap();
        for (k, e) in ens.iter().enumerate() {
            let diff = e.mean()[0] - m_s[k];
            sq_err += diff * diff;
            sq_std += p_s[k];
            count += 1;
        }
    }
    let rmse = (sq_err / count as f64).sqrt();
    let std = (sq_std / count as f64).sqrt();
    assert!(
        rmse < 0.05 * std,
        "ensemble-vs-exact mean RMSE {rmse:.5} exceeds 5% of posterior std {std:.5}"
    );
    assert!(started.elapsed().as_secs_f64() < 30.0);
    pass(&format!(
        "ensemble smoother mean RMSE {rmse:.5} is {:.1}% of the posterior std {std:.4}",
        100.0 * rmse / std
    ));
}

// ---------------------------------------------------------------- test 05

fn full_mask(len: usize, d: usize) -> Vec<Vec<bool>> {
    vec![vec![true; d]; len]
}

fn series(values: Vec<Vec<f64>>, mask: Vec<Vec<bool>>, delta: f64) -> ObservationSeries {
    ObservationSeries {
        values,
        mask,
        delta,
        r: 0.0,
        operator: dynid::observation::OperatorTag::Identity,
    }
}

/// With unit transition and observation covariances the MAP objective is an
/// affine image of the deterministic one: loss_map = 0.5·loss_determ(λ=1)
/// plus a constant that no parameter can move, so drift gradients agree
/// after the 0.5 scaling.
#[test]
fn acceptance_05_map_objective_extends_the_deterministic_one() {
    let started = Instant::now();
    let mut rng = Rng::new(501);
    let make_model = |rng: &mut Rng| GenerativeModel {
        binn: Binn::dense(2, rng).unwrap(),
        varnet: Some(VarDynNet::with_constant_raw(2, (1.0 - VARIANCE_FLOOR).ln()).unwrap()),
        emission: EmissionModel::identity(2, vec![1.0, 1.0]).unwrap(),
        delta: 0.05,
    };
    let len = 6;
    let n = 2;
    let values: Vec<Vec<f64>> = (0..len).map(|_| rng.normal_vec(2)).collect();
    let mask: Vec<Vec<bool>> =
        (0..len).map(|_| vec![rng.uniform() < 0.8, rng.uniform() < 0.8]).collect();
    let states: Vec<Vec<f64>> = (0..len).map(|_| rng.normal_vec(2)).collect();
    let obs = series(values, mask, 0.05);

    let eval = |model: &GenerativeModel| {
        let run = |map: bool| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let vars = model.bind(&mut binder, "");
            let entries = binder.into_entries();
            let z: Vec<Var> =
                states.iter().map(|s| tape.leaf(Array::vector(s.clone()))).collect();
            let loss = if map {
                loss_map(&mut tape, model, &vars, &z, &obs, n).unwrap()
            } else {
                loss_determ(&mut tape, model, &vars, &z, &obs, n, 1.0).unwrap()
            };
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).as_scalar().unwrap(), named_gradients(&entries, &grads))
        };
        (run(true), run(false))
    };

    let model_a = make_model(&mut rng);
    let ((map_a, g_map), (det_a, g_det)) = eval(&model_a);
    let mut checked = 0usize;
    for ((name_m, gm), (name_d, gd)) in g_map.iter().zip(&g_det) {
        assert_eq!(name_m, name_d);
        if !name_m.starts_with("binn") {
            continue; // the frozen covariance head is outside the statement
        }
        for (a, b) in gm.data().iter().zip(gd.data()) {
            assert_close(*a, 0.5 * b, 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 0);

    // the offset does not depend on the model parameters
    let model_b = make_model(&mut rng);
    let ((map_b, _), (det_b, _)) = eval(&model_b);
    let c_a = map_a - 0.5 * det_a;
    let c_b = map_b - 0.5 * det_b;
    assert_close(c_a, c_b, 1e-9);
    assert!(started.elapsed().as_secs_f64() < 1.0);
    pass(&format!(
        "MAP = 0.5·deterministic + {c_a:.6} for two random models; {checked} drift gradients \
         agree to 1e-9"
    ));
}

// ---------------------------------------------------------------- test 06

/// Closed-form log evidence of the scalar linear-Gaussian model by the
/// prediction-error decomposition.
fn kalman_log_evidence(a: f64, q: f64, r: f64, m0: f64, p0: f64, xs: &[f64]) -> f64 {
    let (mut m, mut p) = (m0, p0);
    let mut ll = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        if k > 0 {
            m = a * m;
            p = a * a * p + q;
        }
        let s = p + r;
        ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (x - m) * (x - m) / s);
        let gain = p / s;
        m += gain * (x - m);
        p *= 1.0 - gain;
    }
    ll
}

/// Backward likelihood messages p(x_{k:T} | z_k) ∝ N(z_k; b_k, B_k).
fn backward_messages(a: f64, q: f64, r: f64, xs: &[f64]) -> Vec<(f64, f64)> {
    let t = xs.len();
    let mut out = vec![(0.0, 0.0); t];
    out[t - 1] = (xs[t - 1], r);
    for k in (0..t - 1).rev() {
        let (b_next, cap_next) = out[k + 1];
        let denom = q + cap_next;
        let prec = 1.0 / r + a * a / denom;
        let cap = 1.0 / prec;
        out[k] = (cap * (xs[k] / r + a * b_next / denom), cap);
    }
    out
}

/// Scalar linear net whose one-step flow multiplies the state by `factor`
/// (the drift coefficient is found by bisection through the quartic
/// Runge–Kutta step polynomial), wrapped into the generative model
/// z' = a·z + w (var q), x = z + v (var r).
fn scalar_lg_model(a: f64, q: f64, r: f64) -> GenerativeModel {
    let poly = |c: f64| 1.0 + c + c * c / 2.0 + c * c * c / 6.0 + c * c * c * c / 24.0;
    let (mut lo, mut hi) = (-1.0, 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if poly(mid) < a {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let mut net = Binn::dense(1, &mut Rng::new(0)).unwrap();
    net.visit_mut("", &mut |name, arr| {
        arr.data_mut().fill(if name == "lin_w" { c } else { 0.0 });
    });
    GenerativeModel {
        binn: net,
        varnet: Some(VarDynNet::with_constant_raw(1, (q - VARIANCE_FLOOR).ln()).unwrap()),
        emission: EmissionModel::identity(1, vec![r]).unwrap(),
        delta: 1.0,
    }
}

/// One single-sample estimate of the evidence lower bound with the ancestral
/// posterior taken from the closed-form conditionals, optionally inflating
/// the conditional variances to make the posterior suboptimal.
fn elbo_once(
    model: &GenerativeModel,
    xs: &[f64],
    lg: (f64, f64, f64, f64, f64),
    inflate: f64,
    seed: u64,
) -> f64 {
    let (a, q, r, m0, p0) = lg;
    let msgs = backward_messages(a, q, r, xs);
    let obs = series(xs.iter().map(|x| vec![*x]).collect(), full_mask(xs.len(), 1), 1.0);

    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let vars = model.bind(&mut binder, "");

    let (b0, cap0) = msgs[0];
    let prec0 = 1.0 / p0 + 1.0 / cap0;
    let mean0 = (1.0 / prec0) * (m0 / p0 + b0 / cap0);
    let q_mean = tape.constant(Array::vector(vec![mean0]));
    let q_var = tape.constant(Array::vector(vec![inflate / prec0]));
    let p_mean = tape.constant(Array::vector(vec![m0]));
    let p_var = tape.constant(Array::vector(vec![p0]));
    let init = ElboInit::Random { q_mean, q_var, p_mean, p_var };

    let mut q_step = |tape: &mut Tape, k: usize, prior_mean: Var| {
        let (b_k, cap_k) = msgs[k];
        // N(z; prior, q) · N(z; b_k, B_k) -> mean coef·prior + offset, var s
        let prec = 1.0 / q + 1.0 / cap_k;
        let s = 1.0 / prec;
        let scaled = tape.scalar_mul(s / q, prior_mean);
        let off = tape.constant(Array::vector(vec![s * b_k / cap_k]));
        let mean = tape.add(scaled, off)?;
        let var = tape.constant(Array::vector(vec![s * inflate]));
        Ok((mean, var))
    };
    let mut rng = Rng::new(seed);
    let loss = elbo_pass(&mut tape, model, &vars, &obs, 1, init, &mut q_step, &mut rng).unwrap();
    -tape.value(loss).as_scalar().unwrap()
}

/// The single-sample variational estimator is a lower bound on the scalar
/// linear-Gaussian log evidence, and attains it (to Monte-Carlo error) when
/// the sampling posterior is the exact one.
#[test]
fn acceptance_06_variational_estimator_attains_the_evidence() {
    let started = Instant::now();
    let (a, q, r, m0, p0): (f64, f64, f64, f64, f64) = (0.9, 0.04, 0.25, 0.3, 0.5);
    let mut rng = Rng::new(777);
    let mut z = m0 + p0.sqrt() * rng.normal();
    let mut xs = vec![z + r.sqrt() * rng.normal()];
    for _ in 0..7 {
        z = a * z + q.sqrt() * rng.normal();
        xs.push(z + r.sqrt() * rng.normal());
    }
    let model = scalar_lg_model(a, q, r);
    let log_ev = kalman_log_evidence(a, q, r, m0, p0, &xs);

    let n_seeds = 10_000u64;
    let stats = |inflate: f64, base: u64| {
        let vals: Vec<f64> =
            (0..n_seeds).map(|s| elbo_once(&model, &xs, (a, q, r, m0, p0), inflate, base + s)).collect();
        let mean = vals.iter().sum::<f64>() / n_seeds as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_seeds - 1) as f64;
        (mean, (var / n_seeds as f64).sqrt())
    };

    // exact posterior: tight bound, zero spread
    let (mean_exact, se_exact) = stats(1.0, 10_000);
    assert!(
        (mean_exact - log_ev).abs() <= 3.0 * se_exact + 1e-6,
        "exact-posterior mean {mean_exact} vs evidence {log_ev} (se {se_exact})"
    );
    // inflated posterior: still a bound, with a visible gap
    let (mean_loose, se_loose) = stats(2.0, 50_000);
    assert!(
        mean_loose <= log_ev + 3.0 * se_loose,
        "bound violated: {mean_loose} vs evidence {log_ev} (se {se_loose})"
    );
    assert!(mean_loose < log_ev - 0.1);
    assert!(started.elapsed().as_secs_f64() < 60.0);
    pass(&format!(
        "estimator mean {mean_exact:.6} equals evidence {log_ev:.6} at the exact posterior \
         (se {se_exact:.2e}) and stays {:.3} below it when inflated",
        log_ev - mean_loose
    ));
}

// ---------------------------------------------------------------- test 07

fn tiny_inference(d_x: usize, variational: bool) -> LstmInferenceConfig {
    LstmInferenceConfig {
        d_x,
        d_z: 2,
        hidden: 2,
        enc_sizes: vec![d_x, 2],
        enc_activation: Activation::Relu,
        dec_hidden: vec![3],
        dec_activation: Activation::Relu,
        variational,
        seg_len: 2,
    }
}

fn joint_eval(
    model: &JointModel,
    objective: Objective,
    obs: &ObservationSeries,
    n: usize,
    want_grads: bool,
) -> (f64, Vec<(String, Array)>) {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let (gvars, ivars) = model.bind(&mut binder);
    let entries = binder.into_entries();
    let loss = match objective {
        Objective::Determ => {
            let z = lstm_posterior_means(&mut tape, &model.gen, &gvars, &model.inf, &ivars, obs, n)
                .unwrap();
            loss_determ(&mut tape, &model.gen, &gvars, &z, obs, n, 0.8).unwrap()
        }
        Objective::Map => {
            let z = lstm_posterior_means(&mut tape, &model.gen, &gvars, &model.inf, &ivars, obs, n)
                .unwrap();
            loss_map(&mut tape, &model.gen, &gvars, &z, obs, n).unwrap()
        }
        Objective::Elbo => {
            let mut rng = Rng::new(4242);
            loss_elbo_lstm(&mut tape, &model.gen, &gvars, &model.inf, &ivars, obs, n, &mut rng)
                .unwrap()
        }
    };
    let value = tape.value(loss).as_scalar().unwrap();
    let named = if want_grads {
        named_gradients(&entries, &tape.backward(loss).unwrap())
    } else {
        Vec::new()
    };
    (value, named)
}

/// Central-difference check of every reverse-mode gradient of `model` under
/// `objective`; returns how many coordinates were checked.
fn fd_check(model: &JointModel, objective: Objective, obs: &ObservationSeries, n: usize) -> usize {
    let h = 1e-5;
    let (_, analytic) = joint_eval(model, objective, obs, n, true);
    let mut checked = 0usize;
    for (name, grad) in &analytic {
        for elem in 0..grad.len() {
            let probe = |sign: f64| -> f64 {
                let mut m = model.clone();
                m.visit_mut("", &mut |p_name, arr| {
                    if p_name == name {
                        arr.data_mut()[elem] += sign * h;
                    }
                });
                joint_eval(&m, objective, obs, n, false).0
            };
            let fd = (probe(1.0) - probe(-1.0)) / (2.0 * h);
            let a = grad.data()[elem];
            let diff = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            assert!(
                diff <= 1e-4 * scale || diff <= 1e-7,
                "{}: {name}[{elem}] reverse-mode {a:e} vs finite-difference {fd:e}",
                objective.as_str()
            );
            checked += 1;
        }
    }
    checked
}

/// Reverse-mode gradients agree with central differences (relative error
/// below 1e-4) for every learnable parameter — drift network, covariance
/// head, LSTM stacks, encoders, decoders, and the learned observation
/// operator — under all three objectives on a five-step series.
#[test]
fn acceptance_07_gradients_pass_finite_difference_checks() {
    let started = Instant::now();
    let mut rng = Rng::new(701);

    // identity observations, variational posterior: all three objectives
    let joint = JointModel {
        gen: GenerativeModel {
            binn: Binn::dense(2, &mut rng).unwrap(),
            varnet: Some(VarDynNet::new(2, &mut rng).unwrap()),
            emission: EmissionModel::identity(2, vec![0.4, 0.6]).unwrap(),
            delta: 0.05,
        },
        inf: LstmInference::new(tiny_inference(2, true), &mut rng).unwrap(),
    };
    let mut obs = series((0..5).map(|_| rng.normal_vec(2)).collect(), full_mask(5, 2), 0.05);
    obs.mask[2][1] = false; // exercise the masked path too
    let mut checked = 0usize;
    for objective in [Objective::Determ, Objective::Map, Objective::Elbo] {
        checked += fd_check(&joint, objective, &obs, 2);
    }

    // learned nonlinear observation operator (state dim 2 -> obs dim 3)
    let lifted = JointModel {
        gen: GenerativeModel {
            binn: Binn::dense(2, &mut rng).unwrap(),
            varnet: Some(VarDynNet::new(2, &mut rng).unwrap()),
            emission: EmissionModel::learned(
                Mlp::new(&[2, 4, 3], Activation::Tanh, &mut rng).unwrap(),
                vec![0.3, 0.4, 0.5],
            )
            .unwrap(),
            delta: 0.05,
        },
        inf: LstmInference::new(tiny_inference(3, false), &mut rng).unwrap(),
    };
    let obs3 = series((0..5).map(|_| rng.normal_vec(3)).collect(), full_mask(5, 3), 0.05);
    checked += fd_check(&lifted, Objective::Determ, &obs3, 2);
    checked += fd_check(&lifted, Objective::Map, &obs3, 2);

    assert!(started.elapsed().as_secs_f64() < 60.0);
    pass(&format!(
        "{checked} gradient coordinates match central differences to 1e-4 across the \
         objectives and both observation operators"
    ));
}

// ------------------------------------------------------- desk-scale runs

const C8_CONFIG: &str = r#"{
    "system": "l63", "model": "daoden_determ",
    "r": 0.3333333333333333, "seed": 1
}"#;

const C9_CONFIG: &str = r#"{
    "system": "l63", "model": "binn_enks",
    "r": 0.16666666666666666, "seed": 1
}"#;

const C10_CONFIG: &str = r#"{
    "system": "l63", "model": "daoden_determ",
    "r": 0.3333333333333333, "missing_rate": 0.875, "seed": 3
}"#;

struct DeskRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    report: MetricReport,
    wall_secs: f64,
}

fn resolve(json: &str, dir: &Path) -> ResolvedConfig {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    ExperimentConfig::from_file(&path).unwrap().resolve(Preset::Desk, None).unwrap()
}

/// Full pipeline — generate, train, evaluate, report — into a fresh
/// directory.
fn run_desk(json: &str) -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let rc = resolve(json, dir.path());
    let started = Instant::now();
    cmd_generate(&rc, &out).unwrap();
    cmd_train(&rc, &out).unwrap();
    let report = cmd_evaluate(&rc, &out).unwrap();
    cmd_report(&rc, &out).unwrap();
    DeskRun { _dir: dir, out, report, wall_secs: started.elapsed().as_secs_f64() }
}

static C8_RUN: OnceLock<DeskRun> = OnceLock::new();
static C9_RUN: OnceLock<DeskRun> = OnceLock::new();
static C10_RUN: OnceLock<DeskRun> = OnceLock::new();

fn c8_run() -> &'static DeskRun {
    C8_RUN.get_or_init(|| run_desk(C8_CONFIG))
}
fn c9_run() -> &'static DeskRun {
    C9_RUN.get_or_init(|| run_desk(C9_CONFIG))
}
fn c10_run() -> &'static DeskRun {
    C10_RUN.get_or_init(|| run_desk(C10_CONFIG))
}

// ---------------------------------------------------------------- test 08

/// Desk-scale preset (20 noisy sequences of 150 steps, fully observed,
/// noise at 33.3% of the signal scale): the jointly trained deterministic
/// model forecasts (e₄ < 0.3), reconstructs (rec < 1.0), and its free run
/// stays chaotic with the right exponent (λ₁ ∈ [0.7, 1.1]).
#[test]
fn acceptance_08_desk_identification_from_noisy_data() {
    let run = c8_run();
    let e4 = run.report.e_n[&4].mean;
    let rec = run.report.rec.mean;
    let l1 = run.report.lambda1.mean;
    assert!(e4 < 0.3, "e4 {e4}");
    assert!(rec < 1.0, "rec {rec}");
    assert!((0.7..=1.1).contains(&l1), "lambda1 {l1}");
    assert!(run.wall_secs < 3600.0);
    pass(&format!(
        "joint deterministic training: e4 {e4:.3} < 0.3, rec {rec:.3} < 1.0, lambda1 {l1:.3} \
         in [0.7, 1.1] ({:.0}s)",
        run.wall_secs
    ));
}

// ---------------------------------------------------------------- test 09

/// Same preset at 16.7% noise, trained by alternating ensemble smoothing
/// with gradient refits: e₄ < 0.3 and λ₁ ∈ [0.6, 1.0].
#[test]
fn acceptance_09_desk_identification_with_ensemble_smoothing() {
    let run = c9_run();
    let e4 = run.report.e_n[&4].mean;
    let l1 = run.report.lambda1.mean;
    assert!(e4 < 0.3, "e4 {e4}");
    assert!((0.6..=1.0).contains(&l1), "lambda1 {l1}");
    assert!(run.wall_secs < 3600.0);
    pass(&format!(
        "smoother-based training: e4 {e4:.3} < 0.3, lambda1 {l1:.3} in [0.6, 1.0] ({:.0}s)",
        run.wall_secs
    ));
}

// ---------------------------------------------------------------- test 10

/// With 87.5% of the observation entries masked out, training still
/// completes and reconstructs the hidden states (rec < 3.0); masked entries
/// provably contribute zero gradient: replacing their stored values leaves
/// every loss value and every parameter gradient bit-identical.
#[test]
fn acceptance_10_desk_identification_with_sparse_observations() {
    // unit-level proof of the masked-gradient claim
    let mut rng = Rng::new(1001);
    let joint = JointModel {
        gen: GenerativeModel {
            binn: Binn::dense(2, &mut rng).unwrap(),
            varnet: Some(VarDynNet::new(2, &mut rng).unwrap()),
            emission: EmissionModel::identity(2, vec![0.4, 0.6]).unwrap(),
            delta: 0.05,
        },
        inf: LstmInference::new(tiny_inference(2, true), &mut rng).unwrap(),
    };
    let mut obs = series((0..6).map(|_| rng.normal_vec(2)).collect(), full_mask(6, 2), 0.05);
    obs.mask[0][0] = false;
    obs.mask[2][1] = false;
    obs.mask[4][0] = false;
    obs.mask[4][1] = false;
    for objective in [Objective::Determ, Objective::Map, Objective::Elbo] {
        let (va, ga) = joint_eval(&joint, objective, &obs.with_sentinel(999.0), 2, true);
        let (vb, gb) = joint_eval(&joint, objective, &obs.with_sentinel(-123.0), 2, true);
        assert_eq!(va, vb, "{}", objective.as_str());
        for ((na, a), (nb, b)) in ga.iter().zip(&gb) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data(), "{}: {na}", objective.as_str());
        }
    }

    let run = c10_run();
    let rec = run.report.rec.mean;
    assert!(rec < 3.0, "rec {rec}");
    assert!(run.wall_secs < 3600.0);
    pass(&format!(
        "masked entries leave losses and gradients bit-identical; training at 87.5% missing \
         completes with rec {rec:.3} < 3.0 ({:.0}s)",
        run.wall_secs
    ));
}

// ---------------------------------------------------------------- test 11

/// Damped chaotic drift with a constant-variance transition head: the exact
/// stochastic fixture of the generator contrast.
fn stochastic_fixture() -> (Binn, VarDynNet) {
    let net = Binn::exact_l63_damped(&L63sParams::default());
    let varnet = VarDynNet::with_constant_raw(3, (0.25 - VARIANCE_FLOOR).ln()).unwrap();
    (net, varnet)
}

fn sign_changes(traj: &[Vec<f64>]) -> usize {
    traj.windows(2).filter(|w| (w[0][0] > 0.0) != (w[1][0] > 0.0)).count()
}

/// Sampling the transition noise makes the damped system keep switching
/// wings (≥ 1 sign change of the first component in ≥ 90% of 20 long runs),
/// while the noise-free recursion of the same generator reduces exactly to
/// the deterministic flow — which stays trapped on one wing.
#[test]
fn acceptance_11_stochastic_generation_switches_wings() {
    let (net, varnet) = stochastic_fixture();
    let delta = 0.01;
    let steps = 20_000;

    // settle onto the deterministic attractor of the damped system
    let mut z0 = vec![2.0, 3.0, 18.0];
    for _ in 0..2000 {
        z0 = flow_n(&net, &z0, 1, delta).unwrap();
    }

    // noise-free recursion == iterated deterministic flow, bit for bit
    let mut det = Vec::with_capacity(steps + 1);
    det.push(z0.clone());
    let mut cur = z0.clone();
    for _ in 0..steps {
        cur = flow_n(&net, &cur, 1, delta).unwrap();
        det.push(cur.clone());
    }
    for k in [1usize, 137, 5000, steps] {
        assert_eq!(det[k], flow_n(&net, &z0, k, delta).unwrap(), "flow mismatch at step {k}");
    }
    let det_switches = sign_changes(&det);
    assert_eq!(det_switches, 0, "deterministic run should stay trapped on one wing");

    // sampled transitions keep crossing between wings
    let mut switching_runs = 0usize;
    for run in 0..20u64 {
        let mut rng = Rng::stream(1107, run);
        let traj = generate_stochastic(&net, &varnet, &z0, steps, delta, &mut rng).unwrap();
        if sign_changes(&traj) >= 1 {
            switching_runs += 1;
        }
    }
    assert!(
        switching_runs >= 18,
        "only {switching_runs}/20 stochastic runs switched wings"
    );
    pass(&format!(
        "{switching_runs}/20 stochastic runs switch wings; the noise-free recursion equals the \
         deterministic flow exactly and never switches"
    ));
}

// ---------------------------------------------------------------- test 12

fn artifact_bytes(out: &Path) -> BTreeMap<String, Vec<u8>> {
    // trace.csv is excluded: it records wall-clock times
    ["train.ds.json", "test.ds.json", "model.ckpt.json", "report.json", "report.csv", "table.csv"]
        .iter()
        .map(|name| (name.to_string(), fs::read(out.join(name)).unwrap()))
        .collect()
}

/// Re-running every desk-scale experiment with the same seeds reproduces
/// every artifact byte for byte, and the stochastic-generation fixture
/// reproduces its trajectories exactly.
#[test]
fn acceptance_12_desk_runs_are_bitwise_reproducible() {
    let mut compared = 0usize;
    for (name, first, config) in [
        ("noisy identification", c8_run(), C8_CONFIG),
        ("smoother identification", c9_run(), C9_CONFIG),
        ("sparse identification", c10_run(), C10_CONFIG),
    ] {
        let again = run_desk(config);
        let a = artifact_bytes(&first.out);
        let b = artifact_bytes(&again.out);
        for (file, bytes) in &a {
            assert_eq!(
                Some(bytes),
                b.get(file),
                "{name}: {file} differs between identical runs"
            );
            compared += 1;
        }
    }

    let (net, varnet) = stochastic_fixture();
    let roll = |seed: u64| {
        let mut rng = Rng::stream(1107, seed);
        generate_stochastic(&net, &varnet, &[2.0, 3.0, 18.0], 2000, 0.01, &mut rng).unwrap()
    };
    assert_eq!(roll(0), roll(0));
    pass(&format!(
        "{compared} artifacts across three re-trained experiments are byte-identical, and \
         stochastic generation replays exactly under a fixed seed"
    ));
}

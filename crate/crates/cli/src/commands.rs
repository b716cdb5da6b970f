//! The five subcommands: dataset generation, training, evaluation,
//! trajectory simulation, and report rendering. Every command writes a run
//! manifest tying its outputs to the resolved config and input hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dynid::adcore::Rng;
use dynid::checkpoint::{self, LoadedModel};
use dynid::inference::enks_smooth;
use dynid::metrics::{evaluate, MetricReport, TestSequence};
use dynid::nn::Binder;
use dynid::observation::{
    load_dataset, make_observations, save_dataset, Dataset, ObservationSeries,
};
use dynid::prior::{flow_n, GenerativeModel, VarDynNet};
use dynid::systems::{make_dataset, reference_stats, System, DIVERGENCE_LIMIT};
use dynid::training::{
    lstm_posterior_means, train_em_enks, train_random_nstep, trace_csv, InferenceKind,
};
use dynid::adcore::Tape;
use dynid::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::build::{build_generative, build_joint, enks_config, eval_config, Normalizer};
use crate::config::ResolvedConfig;

/// File layout inside a run directory.
pub struct RunPaths {
    out: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        RunPaths { out: out.to_path_buf() }
    }
    pub fn train_dataset(&self) -> PathBuf {
        self.out.join("train.ds.json")
    }
    pub fn test_dataset(&self) -> PathBuf {
        self.out.join("test.ds.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("model.ckpt.json")
    }
    pub fn trace(&self) -> PathBuf {
        self.out.join("trace.csv")
    }
    pub fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }
    pub fn table_csv(&self) -> PathBuf {
        self.out.join("table.csv")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.out.join(format!("{command}.manifest.json"))
    }
    pub fn simulation(&self, mode: SimMode, run: usize) -> PathBuf {
        self.out.join(format!("sim_{}_{run:03}.csv", mode.as_str()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Everything needed to trace an emitted number back to its inputs.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a ResolvedConfig,
    config_sha256: String,
    /// Extra command parameters outside the config (e.g. simulation length).
    params: serde_json::Value,
    /// Input file name → content hash.
    inputs: BTreeMap<String, String>,
    /// Files the command produces, relative to the run directory.
    outputs: Vec<String>,
}

fn write_manifest(
    paths: &RunPaths,
    command: &str,
    rc: &ResolvedConfig,
    params: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
) -> Result<()> {
    let config_sha256 = sha256_hex(&serde_json::to_vec(rc)?);
    let manifest = Manifest { command, config: rc, config_sha256, params, inputs, outputs };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(paths.manifest(command), text + "\n")?;
    Ok(())
}

fn input_hash(path: &Path) -> Result<(String, String)> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok((name, file_sha256(path)?))
}

/// Check that a dataset on disk matches what the config says it should be.
fn check_dataset(rc: &ResolvedConfig, ds: &Dataset, role: &str) -> Result<()> {
    ds.validate()?;
    if ds.system != rc.system
        || ds.operator != rc.operator
        || (ds.delta - rc.delta).abs() > 1e-12
        || (ds.r - rc.r).abs() > 1e-12
        || (ds.missing_rate - rc.missing_rate).abs() > 1e-12
    {
        return Err(Error::validation(format!(
            "{role} dataset was generated under different settings \
             (system {}, operator {}, delta {}, r {}, missing_rate {}) than the config",
            ds.system.as_str(),
            ds.operator.as_str(),
            ds.delta,
            ds.r,
            ds.missing_rate
        )));
    }
    Ok(())
}

fn build_dataset(
    rc: &ResolvedConfig,
    system: &System,
    n_sequences: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let truths = make_dataset(system, n_sequences, rc.seq_len, rc.delta, rc.burn_in, rng)?;
    let mut observations = Vec::with_capacity(truths.len());
    let mut noise_std = Vec::new();
    for seq in &truths {
        let (obs, std) = make_observations(seq, rc.operator, rc.r, rc.missing_rate, rng)?;
        observations.push(obs);
        noise_std = std;
    }
    let ds = Dataset {
        system: rc.system,
        delta: rc.delta,
        r: rc.r,
        missing_rate: rc.missing_rate,
        operator: rc.operator,
        seed: rc.seed,
        noise_std,
        truths,
        observations,
    };
    ds.validate()?;
    Ok(ds)
}

/// Synthesize train and test datasets with observations and provenance.
pub fn cmd_generate(rc: &ResolvedConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let paths = RunPaths::new(out);
    let system = System::from_tag(rc.system);
    let mut rng = Rng::new(rc.seed);

    let train = build_dataset(rc, &system, rc.n_train, &mut rng)?;
    save_dataset(&paths.train_dataset(), &train)?;
    let test = build_dataset(rc, &system, rc.n_test, &mut rng)?;
    save_dataset(&paths.test_dataset(), &test)?;

    log::info!(
        "generated {} train + {} test sequences of length {}",
        rc.n_train,
        rc.n_test,
        rc.seq_len
    );
    write_manifest(
        &paths,
        "generate",
        rc,
        serde_json::json!({}),
        BTreeMap::new(),
        vec!["train.ds.json".into(), "test.ds.json".into()],
    )
}

/// Train the configured model on the generated training data; writes the
/// checkpoint, the loss trace, and the run manifest (manifest first, so a
/// failed run still leaves its provenance behind).
pub fn cmd_train(rc: &ResolvedConfig, out: &Path) -> Result<f64> {
    let paths = RunPaths::new(out);
    let ds = load_dataset(&paths.train_dataset())?;
    check_dataset(rc, &ds, "training")?;

    let mut inputs = BTreeMap::new();
    let (name, hash) = input_hash(&paths.train_dataset())?;
    inputs.insert(name, hash);
    write_manifest(
        &paths,
        "train",
        rc,
        serde_json::json!({}),
        inputs,
        vec!["model.ckpt.json".into(), "trace.csv".into()],
    )?;

    // Training happens in the normalized frame; the checkpoint therefore
    // stores normalized-coordinate dynamics, and evaluate/simulate rebuild
    // the same frame from the config. Model initialization draws from its
    // own stream so that dataset generation and training stay independently
    // reproducible.
    let norm = Normalizer::for_config(rc)?;
    let obs: Vec<_> = ds.observations.iter().map(|o| norm.normalize_obs(o)).collect();
    let mut rng = Rng::stream(rc.seed, 1);
    let outcome = match rc.model.inference() {
        InferenceKind::Lstm => {
            let mut model = build_joint(rc, &norm, &mut rng)?;
            let outcome = train_random_nstep(&rc.train, &obs, &mut model)?;
            checkpoint::save_joint(&paths.checkpoint(), &model)?;
            outcome
        }
        InferenceKind::Enks => {
            let mut model = build_generative(rc, &norm, &mut rng)?;
            let enks = enks_config(rc);
            let outcome = train_em_enks(&rc.train, &obs, &mut model, &enks)?;
            checkpoint::save_generative(&paths.checkpoint(), &model)?;
            outcome
        }
    };
    std::fs::write(paths.trace(), trace_csv(&outcome.trace))?;
    log::info!("training finished: final loss {:.6}", outcome.final_loss);
    Ok(outcome.final_loss)
}

fn format_aggregate(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

/// The benchmark-table row for one report.
pub fn table_csv_text(rc: &ResolvedConfig, report: &MetricReport) -> Result<String> {
    let e4 = report
        .e_n
        .get(&4)
        .ok_or_else(|| Error::validation("table output needs horizon 4 among 'horizons'"))?;
    let mut text = String::from("model,system,r,missing_rate,e4,rec,pi05,lambda1\n");
    text.push_str(&format!(
        "{},{},{:.4},{:.4},{},{},{},{}\n",
        rc.model.as_str(),
        rc.system.as_str(),
        rc.r,
        rc.missing_rate,
        format_aggregate(e4.mean, e4.std),
        format_aggregate(report.rec.mean, report.rec.std),
        format_aggregate(report.pi_half.mean, report.pi_half.std),
        format_aggregate(report.lambda1.mean, report.lambda1.std),
    ));
    Ok(text)
}

/// Score a checkpoint on the test dataset; writes JSON and CSV reports.
pub fn cmd_evaluate(rc: &ResolvedConfig, out: &Path) -> Result<MetricReport> {
    let paths = RunPaths::new(out);
    let loaded = checkpoint::load(&paths.checkpoint())?;
    let ds = load_dataset(&paths.test_dataset())?;
    check_dataset(rc, &ds, "test")?;

    let test: Vec<TestSequence> = ds
        .truths
        .iter()
        .zip(&ds.observations)
        .map(|(t, o)| TestSequence { truth: t.states.clone(), obs: o.clone() })
        .collect();
    let ec = eval_config(rc, &test)?;

    // The checkpoint holds normalized-frame dynamics; conjugating its step
    // map by the frame yields the physical flow all metrics are scored on.
    let norm = Normalizer::for_config(rc)?;
    let report = match &loaded {
        LoadedModel::Generative(gm) => {
            let flow = |z: &[f64]| -> Result<Vec<f64>> {
                let next = flow_n(&gm.binn, &norm.normalize_state(z), 1, gm.delta)?;
                Ok(norm.denormalize_state(&next))
            };
            let enks = enks_config(rc);
            let mut k: u64 = 0;
            let mut reconstruct = |obs: &ObservationSeries| -> Result<Vec<Vec<f64>>> {
                let mut rng = Rng::stream(rc.seed, 100 + k);
                k += 1;
                let obs = norm.normalize_obs(obs);
                let ens = enks_smooth(&gm.binn, gm.delta, &enks, &gm.emission, &obs, &mut rng)?;
                Ok(ens.iter().map(|e| norm.denormalize_state(&e.mean())).collect())
            };
            evaluate(&flow, &mut reconstruct, &test, &ec)?
        }
        LoadedModel::Joint(jm) => {
            let flow = |z: &[f64]| -> Result<Vec<f64>> {
                let next = flow_n(&jm.gen.binn, &norm.normalize_state(z), 1, jm.gen.delta)?;
                Ok(norm.denormalize_state(&next))
            };
            let mut reconstruct = |obs: &ObservationSeries| -> Result<Vec<Vec<f64>>> {
                let obs = norm.normalize_obs(obs);
                let mut tape = Tape::new();
                let mut binder = Binder::new(&mut tape);
                let (gvars, ivars) = jm.bind(&mut binder);
                let states =
                    lstm_posterior_means(&mut tape, &jm.gen, &gvars, &jm.inf, &ivars, &obs, 1)?;
                Ok(states
                    .iter()
                    .map(|&v| norm.denormalize_state(tape.value(v).data()))
                    .collect())
            };
            evaluate(&flow, &mut reconstruct, &test, &ec)?
        }
    };

    std::fs::write(paths.report_json(), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(paths.report_csv(), format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    std::fs::write(paths.table_csv(), table_csv_text(rc, &report)?)?;

    let mut inputs = BTreeMap::new();
    for p in [paths.checkpoint(), paths.test_dataset()] {
        let (name, hash) = input_hash(&p)?;
        inputs.insert(name, hash);
    }
    write_manifest(
        &paths,
        "evaluate",
        rc,
        serde_json::json!({}),
        inputs,
        vec!["report.json".into(), "report.csv".into(), "table.csv".into()],
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    Deterministic,
    Stochastic,
}

impl SimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::Deterministic => "deterministic",
            SimMode::Stochastic => "stochastic",
        }
    }
}

impl std::str::FromStr for SimMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(SimMode::Deterministic),
            "stochastic" => Ok(SimMode::Stochastic),
            other => Err(Error::validation(format!(
                "unknown simulation mode '{other}' (expected deterministic or stochastic)"
            ))),
        }
    }
}

/// Starting state for simulations: inside the attractor bounding box but off
/// the symmetry axis, and identical across reruns. Physical coordinates.
fn simulation_start(rc: &ResolvedConfig) -> Vec<f64> {
    let stats = reference_stats(rc.system);
    stats.mean.iter().zip(&stats.std).map(|(m, s)| m + s).collect()
}

/// Iterate the flow in the training frame, stopping at divergence; returns
/// the trajectory (including the start) and the index of the last valid
/// step. With a noise source, each step samples z ~ N(F¹(z), variances).
fn rollout_partial(
    gm: &GenerativeModel,
    z0: &[f64],
    n_steps: usize,
    mut noise: Option<(&VarDynNet, &mut Rng)>,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(z0.to_vec());
    let mut cur = z0.to_vec();
    for step in 0..n_steps {
        let Ok(mu) = flow_n(&gm.binn, &cur, 1, gm.delta) else {
            return Ok((states, step));
        };
        let next = match noise.as_mut() {
            None => mu,
            Some((varnet, rng)) => {
                let d = varnet.variances(&cur, &mu)?;
                mu.iter().zip(&d).map(|(&m, &v)| m + v.sqrt() * rng.normal()).collect()
            }
        };
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Ok((states, step));
        }
        cur = next;
        states.push(cur.clone());
    }
    Ok((states, n_steps))
}

fn trajectory_csv(states: &[Vec<f64>]) -> String {
    let d = states.first().map_or(0, |s| s.len());
    let mut text = String::from("step");
    for i in 1..=d {
        text.push_str(&format!(",z{i}"));
    }
    text.push('\n');
    for (k, s) in states.iter().enumerate() {
        text.push_str(&k.to_string());
        for v in s {
            text.push(',');
            text.push_str(&format!("{v}"));
        }
        text.push('\n');
    }
    text
}

/// Roll trajectories out of a checkpoint for external plotting. Checkpoints
/// are interpreted in the normalized training frame of the configured
/// system; rows are written back in physical coordinates.
pub fn cmd_simulate(
    rc: &ResolvedConfig,
    out: &Path,
    steps: usize,
    runs: usize,
    mode: SimMode,
) -> Result<()> {
    if steps == 0 || runs == 0 {
        return Err(Error::validation("simulation needs positive --steps and --runs"));
    }
    let paths = RunPaths::new(out);
    let loaded = checkpoint::load(&paths.checkpoint())?;
    let gm = loaded.generative();
    let norm = Normalizer::for_config(rc)?;
    let z0 = norm.normalize_state(&simulation_start(rc));
    if z0.len() != gm.d_z() {
        return Err(Error::validation(format!(
            "checkpoint state dimension {} does not match system '{}'",
            gm.d_z(),
            rc.system.as_str()
        )));
    }

    let mut outputs = Vec::with_capacity(runs);
    let mut divergences: Vec<serde_json::Value> = Vec::new();
    for run in 0..runs {
        let (states, last) = match mode {
            SimMode::Deterministic => rollout_partial(gm, &z0, steps, None)?,
            SimMode::Stochastic => {
                let varnet = gm.varnet.as_ref().ok_or_else(|| {
                    Error::validation(
                        "checkpoint has no transition-variance head; \
                         stochastic simulation needs one",
                    )
                })?;
                let mut rng = Rng::stream(rc.seed, 1000 + run as u64);
                rollout_partial(gm, &z0, steps, Some((varnet, &mut rng)))?
            }
        };
        if last < steps {
            log::warn!("{} run {run} diverged; last valid step {last}", mode.as_str());
            divergences.push(serde_json::json!({"run": run, "last_valid_step": last}));
        }
        let physical: Vec<Vec<f64>> =
            states.iter().map(|z| norm.denormalize_state(z)).collect();
        let path = paths.simulation(mode, run);
        std::fs::write(&path, trajectory_csv(&physical))?;
        outputs.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }

    let mut inputs = BTreeMap::new();
    let (name, hash) = input_hash(&paths.checkpoint())?;
    inputs.insert(name, hash);
    write_manifest(
        &paths,
        "simulate",
        rc,
        serde_json::json!({
            "steps": steps,
            "runs": runs,
            "mode": mode.as_str(),
            "divergences": divergences,
        }),
        inputs,
        outputs,
    )
}

/// Render the stored evaluation report as the benchmark-table row; returns
/// the text that was printed.
pub fn cmd_report(rc: &ResolvedConfig, out: &Path) -> Result<String> {
    let paths = RunPaths::new(out);
    let text = std::fs::read_to_string(paths.report_json())?;
    let report: MetricReport = serde_json::from_str(&text)?;
    let table = table_csv_text(rc, &report)?;
    std::fs::write(paths.table_csv(), &table)?;

    let mut inputs = BTreeMap::new();
    let (name, hash) = input_hash(&paths.report_json())?;
    inputs.insert(name, hash);
    write_manifest(
        &paths,
        "report",
        rc,
        serde_json::json!({}),
        inputs,
        vec!["table.csv".into()],
    )?;
    Ok(table)
}

//! Long-run reference statistics per system, used for observation-noise
//! scaling, initial-condition sampling, and error thresholds.
//!
//! Each system gets one deterministic reference trajectory (fixed initial
//! state, fixed burn-in, fixed internal seed for the stochastic system) whose
//! per-component moments and bounding box are computed once and cached for
//! the process lifetime. Default parameters and the native step are used, so
//! the statistics are a pure function of the system tag.

use std::sync::OnceLock;

use super::{simulate, System, SystemTag};
use crate::adcore::Rng;

/// Statistics of a long attractor run.
#[derive(Clone, Debug)]
pub struct ReferenceStats {
    /// Per-component mean.
    pub mean: Vec<f64>,
    /// Per-component standard deviation.
    pub std: Vec<f64>,
    /// Per-component minimum over the run.
    pub bbox_min: Vec<f64>,
    /// Per-component maximum over the run.
    pub bbox_max: Vec<f64>,
}

impl ReferenceStats {
    /// Scalar spread of the system: root-mean-square of the per-component
    /// standard deviations. Matches the scale of a cross-component RMSE.
    pub fn rms_std(&self) -> f64 {
        let n = self.std.len() as f64;
        (self.std.iter().map(|s| s * s).sum::<f64>() / n).sqrt()
    }
}

const BURN_STEPS: usize = 2_000;
const RECORD_STEPS: usize = 50_000;
const L63S_REFERENCE_SEED: u64 = 0x5EED_1063;

fn compute(tag: SystemTag) -> ReferenceStats {
    let system = System::from_tag(tag);
    let delta = system.native_delta();
    let d = system.dim();
    let z0 = match tag {
        SystemTag::L63 | SystemTag::L63s => vec![1.0, 1.0, 1.0],
        SystemTag::L96 => {
            // Perturb one component away from the unstable uniform state.
            let mut z = vec![8.0; d];
            z[0] += 0.01;
            z
        }
    };
    let mut rng = Rng::new(L63S_REFERENCE_SEED);
    let noise = tag.is_stochastic();
    let seq = simulate(
        &system,
        &z0,
        BURN_STEPS + RECORD_STEPS,
        delta,
        if noise { Some(&mut rng) } else { None },
    )
    .expect("reference run must not diverge");

    let recorded = &seq.states[BURN_STEPS..];
    let n = recorded.len() as f64;
    let mut mean = vec![0.0; d];
    for s in recorded {
        for i in 0..d {
            mean[i] += s[i];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    let mut bbox_min = vec![f64::INFINITY; d];
    let mut bbox_max = vec![f64::NEG_INFINITY; d];
    for s in recorded {
        for i in 0..d {
            let c = s[i] - mean[i];
            var[i] += c * c;
            bbox_min[i] = bbox_min[i].min(s[i]);
            bbox_max[i] = bbox_max[i].max(s[i]);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    ReferenceStats { mean, std, bbox_min, bbox_max }
}

/// Cached reference statistics for `tag` (default parameters, native step).
pub fn reference_stats(tag: SystemTag) -> &'static ReferenceStats {
    static L63: OnceLock<ReferenceStats> = OnceLock::new();
    static L96: OnceLock<ReferenceStats> = OnceLock::new();
    static L63S: OnceLock<ReferenceStats> = OnceLock::new();
    match tag {
        SystemTag::L63 => L63.get_or_init(|| compute(SystemTag::L63)),
        SystemTag::L96 => L96.get_or_init(|| compute(SystemTag::L96)),
        SystemTag::L63s => L63S.get_or_init(|| compute(SystemTag::L63s)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l63_statistics_match_known_attractor_scales() {
        let s = reference_stats(SystemTag::L63);
        // Known Lorenz-63 climatology: z1, z2 are roughly ±8 around 0 and z3
        // sits near 23-24 with std around 8.6.
        assert!(s.mean[0].abs() < 2.0, "mean z1 {}", s.mean[0]);
        assert!(s.mean[1].abs() < 2.0, "mean z2 {}", s.mean[1]);
        assert!((20.0..=27.0).contains(&s.mean[2]), "mean z3 {}", s.mean[2]);
        assert!((7.0..=9.0).contains(&s.std[0]), "std z1 {}", s.std[0]);
        assert!((8.0..=10.0).contains(&s.std[1]), "std z2 {}", s.std[1]);
        assert!((7.5..=9.5).contains(&s.std[2]), "std z3 {}", s.std[2]);
        assert!(s.bbox_min[0] < -10.0 && s.bbox_max[0] > 10.0);
    }

    #[test]
    fn l96_per_component_std_is_about_three_point_six() {
        let s = reference_stats(SystemTag::L96);
        for (i, std) in s.std.iter().enumerate() {
            assert!((3.2..=4.0).contains(std), "component {i} std {std}");
        }
        assert!((3.2..=4.0).contains(&s.rms_std()));
    }

    #[test]
    fn stats_are_cached_and_stable() {
        let a = reference_stats(SystemTag::L63);
        let b = reference_stats(SystemTag::L63);
        assert!(std::ptr::eq(a, b));
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn l63s_statistics_are_finite_and_reproducible() {
        let s = reference_stats(SystemTag::L63s);
        assert!(s.std.iter().all(|v| v.is_finite() && *v > 0.0));
    }
}

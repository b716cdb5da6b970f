//! Adaptive-moment gradient descent and global-norm clipping.

use std::collections::BTreeMap;

use crate::adcore::Array;
use crate::error::{Error, Result};

/// Scale all gradients by `max_norm / ||g||` when the joint Euclidean norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(String, Array)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

struct Slot {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam: first/second moment estimates with bias correction.
///
///   m ← β₁ m + (1−β₁) g          v ← β₂ v + (1−β₂) g²
///   Δ = −lr · m̂ / (√v̂ + ε),  m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
///
/// State is keyed by parameter name, so the same optimizer instance can be
/// reused across steps as long as names stay stable.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: BTreeMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Advance moment estimates and return the additive update per parameter.
    pub fn deltas(&mut self, grads: &[(String, Array)]) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, g) in grads {
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                t: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if slot.m.len() != g.len() {
                return Err(Error::validation(format!(
                    "gradient for {name} changed length: {} then {}",
                    slot.m.len(),
                    g.len()
                )));
            }
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let mut delta = Vec::with_capacity(g.len());
            for (k, &gk) in g.data().iter().enumerate() {
                slot.m[k] = self.beta1 * slot.m[k] + (1.0 - self.beta1) * gk;
                slot.v[k] = self.beta2 * slot.v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = slot.m[k] / bc1;
                let v_hat = slot.v[k] / bc2;
                delta.push(-self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            out.insert(name.clone(), delta);
        }
        Ok(out)
    }
}

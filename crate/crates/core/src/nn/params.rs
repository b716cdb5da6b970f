//! Named-parameter plumbing shared by every trainable module.
//!
//! A module exposes its weights through [`Parameterized`], always under the
//! same names, and registers them on a tape through a [`Binder`]. After
//! `backward`, the binder's records let the optimizer read each gradient back
//! by name and apply the update to the matching array.

use std::collections::BTreeMap;

use crate::adcore::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Hierarchical parameter names: `join("enc", "w0") == "enc/w0"`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Trainable modules expose parameters as named arrays. Names must be stable
/// across `visit`, `visit_mut`, and the module's `bind` method.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array));
}

/// Collect `(name, copy-of-value)` pairs, mostly for tests and checkpoints.
pub fn collect_params(model: &dyn Parameterized) -> Vec<(String, Array)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, a| out.push((name.to_string(), a.clone())));
    out
}

/// Euclidean norm over every parameter of a module.
pub fn param_norm(model: &dyn Parameterized) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, a| sq += a.data().iter().map(|v| v * v).sum::<f64>());
    sq.sqrt()
}

/// Records the tape leaves created for model parameters.
pub struct Binder<'a> {
    tape: &'a mut Tape,
    entries: Vec<(String, Var, Vec<usize>)>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        Binder { tape, entries: Vec::new() }
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    /// Insert `value` as a differentiable leaf and remember its name.
    pub fn leaf(&mut self, prefix: &str, name: &str, value: &Array) -> Var {
        let var = self.tape.leaf(value.clone());
        self.entries.push((join(prefix, name), var, value.shape().to_vec()));
        var
    }

    pub fn into_entries(self) -> Vec<(String, Var, Vec<usize>)> {
        self.entries
    }
}

/// Materialize one gradient array per bound parameter (zeros for parameters
/// the loss never touched), in binder order.
pub fn named_gradients(
    entries: &[(String, Var, Vec<usize>)],
    grads: &Gradients,
) -> Vec<(String, Array)> {
    entries
        .iter()
        .map(|(name, var, shape)| (name.clone(), grads.get_or_zeros(*var, shape)))
        .collect()
}

/// Add `updates[name]` elementwise to each matching parameter. Every update
/// must correspond to an existing parameter of identical length.
pub fn apply_updates(
    model: &mut dyn Parameterized,
    updates: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let mut consumed = 0usize;
    let mut mismatch: Option<String> = None;
    model.visit_mut("", &mut |name, a| {
        if let Some(delta) = updates.get(name) {
            if delta.len() != a.len() {
                mismatch.get_or_insert_with(|| {
                    format!(
                        "update for {name} has {} entries, parameter has {}",
                        delta.len(),
                        a.len()
                    )
                });
                return;
            }
            for (p, d) in a.data_mut().iter_mut().zip(delta) {
                *p += d;
            }
            consumed += 1;
        }
    });
    if let Some(msg) = mismatch {
        return Err(Error::validation(msg));
    }
    if consumed != updates.len() {
        return Err(Error::validation(format!(
            "{} updates target no parameter (applied {consumed} of {})",
            updates.len() - consumed,
            updates.len()
        )));
    }
    Ok(())
}

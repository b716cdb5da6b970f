//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences with a small step form an oracle that is independent
//! of the tape's backward rules: the forward function is simply re-evaluated
//! at perturbed inputs. Every differentiable operation in the crate is
//! validated against this oracle.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Default relative tolerance for gradient agreement.
pub const FD_REL_TOL: f64 = 1e-4;

/// Absolute slack below which disagreement is attributed to FD roundoff.
const FD_ABS_FLOOR: f64 = 1e-7;

/// Central-difference gradient of `f` with respect to every element of every
/// input: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference<F>(f: F, inputs: &[Array], h: f64) -> Result<Vec<Array>>
where
    F: Fn(&[Array]) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let mut g = Array::zeros(input.shape());
        for elem in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[elem] += h;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[elem] -= h;
            g.data_mut()[elem] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Builds a scalar function of `inputs` on a fresh tape, then compares the
/// tape's reverse-mode gradients against central differences.
///
/// `build` receives the tape and one leaf per input and must return the
/// scalar root. Agreement is required up to `rel_tol` relative error (with a
/// small absolute floor to absorb FD roundoff on near-zero gradients).
pub fn check_gradients<B>(build: B, inputs: &[Array], h: f64, rel_tol: f64) -> Result<()>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // Reverse-mode gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    // Finite-difference oracle re-runs the forward construction only.
    let eval = |xs: &[Array]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.leaf(a.clone())).collect();
        let r = build(&mut t, &vs)?;
        t.value(r).as_scalar()
    };
    let fd = finite_difference(eval, inputs, h)?;

    for (idx, (input, fd_g)) in inputs.iter().zip(&fd).enumerate() {
        let ad_g = grads.get_or_zeros(vars[idx], input.shape());
        for elem in 0..input.len() {
            let (a, f) = (ad_g.data()[elem], fd_g.data()[elem]);
            let diff = (a - f).abs();
            let scale = a.abs().max(f.abs());
            if diff > rel_tol * scale && diff > FD_ABS_FLOOR {
                return Err(Error::computation(format!(
                    "gradient mismatch at input {idx} element {elem}: reverse-mode {a:e} vs finite-difference {f:e} (rel {:e})",
                    diff / scale.max(f64::MIN_POSITIVE)
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::Rng;

    fn rand_vec(rng: &mut Rng, n: usize) -> Array {
        Array::vector(rng.normal_vec(n))
    }

    fn rand_mat(rng: &mut Rng, m: usize, n: usize) -> Array {
        Array::matrix(m, n, rng.normal_vec(m * n)).unwrap()
    }

    /// Positive random vector bounded away from zero (for log/sqrt/div).
    fn rand_pos_vec(rng: &mut Rng, n: usize) -> Array {
        Array::vector((0..n).map(|_| 0.5 + rng.uniform() * 2.0).collect())
    }

    #[test]
    fn fd_matches_analytic_for_cubic() {
        // f(x) = sum(x ⊙ x ⊙ x) has gradient 3x².
        let x = Array::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_difference(
            |xs| Ok(xs[0].data().iter().map(|v| v * v * v).sum()),
            &[x.clone()],
            FD_STEP,
        )
        .unwrap();
        for (gi, xi) in g[0].data().iter().zip(x.data()) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-6);
        }
    }

    /// Every differentiable primitive agrees with central differences on
    /// randomized inputs, including a 64x64 elementwise case.
    #[test]
    fn all_primitives_pass_fd_checks() {
        let mut rng = Rng::new(20_240_601);

        // Elementwise unary ops over a mix of sizes up to 64x64.
        type Unary = (&'static str, fn(&mut Tape, Var) -> Result<Var>, bool);
        let unary: Vec<Unary> = vec![
            ("exp", |t, a| Ok(t.exp(a)), false),
            ("log", |t, a| t.log(a), true),
            ("sqrt", |t, a| t.sqrt(a), true),
            ("tanh", |t, a| Ok(t.tanh(a)), false),
            ("sigmoid", |t, a| Ok(t.sigmoid(a)), false),
            ("relu", |t, a| Ok(t.relu(a)), false),
            ("square", |t, a| Ok(t.square(a)), false),
            ("softplus", |t, a| Ok(t.softplus(a)), false),
            ("clamp", |t, a| t.clamp(a, -0.9, 0.9), false),
            ("mean", |t, a| t.mean(a), false),
            ("scalar_mul", |t, a| Ok(t.scalar_mul(-1.75, a)), false),
        ];
        for (name, op, positive) in &unary {
            for shape in [vec![1usize], vec![7], vec![64 * 64]] {
                let n: usize = shape.iter().product();
                let input = if *positive { rand_pos_vec(&mut rng, n) } else { rand_vec(&mut rng, n) };
                check_gradients(
                    |t, vars| {
                        let y = op(t, vars[0])?;
                        Ok(t.sum(y))
                    },
                    &[input],
                    FD_STEP,
                    FD_REL_TOL,
                )
                .unwrap_or_else(|e| panic!("{name} on shape {shape:?}: {e}"));
            }
        }

        // Binary elementwise ops.
        type Binary = (&'static str, fn(&mut Tape, Var, Var) -> Result<Var>, bool);
        let binary: Vec<Binary> = vec![
            ("add", |t, a, b| t.add(a, b), false),
            ("sub", |t, a, b| t.sub(a, b), false),
            ("mul", |t, a, b| t.mul(a, b), false),
            ("div", |t, a, b| t.div(a, b), true),
        ];
        for (name, op, positive_rhs) in &binary {
            for n in [1usize, 9, 640] {
                let a = rand_vec(&mut rng, n);
                let b = if *positive_rhs { rand_pos_vec(&mut rng, n) } else { rand_vec(&mut rng, n) };
                check_gradients(
                    |t, vars| {
                        let y = op(t, vars[0], vars[1])?;
                        Ok(t.sum(y))
                    },
                    &[a, b],
                    FD_STEP,
                    FD_REL_TOL,
                )
                .unwrap_or_else(|e| panic!("{name} (n = {n}): {e}"));
            }
        }

        // Matrix products (both argument ranks).
        for (m, k, n) in [(2usize, 3usize, 4usize), (5, 5, 5), (12, 8, 6)] {
            let a = rand_mat(&mut rng, m, k);
            let b = rand_mat(&mut rng, k, n);
            check_gradients(
                |t, vars| {
                    let y = t.matmul(vars[0], vars[1])?;
                    let y = t.square(y);
                    Ok(t.sum(y))
                },
                &[a, b],
                FD_STEP,
                FD_REL_TOL,
            )
            .unwrap_or_else(|e| panic!("matmul {m}x{k}x{n}: {e}"));
        }
        let a = rand_mat(&mut rng, 6, 4);
        let x = rand_vec(&mut rng, 4);
        check_gradients(
            |t, vars| {
                let y = t.matmul(vars[0], vars[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            },
            &[a, x],
            FD_STEP,
            FD_REL_TOL,
        )
        .unwrap();

        // Bilinear form, including the repeated-argument case x^T W x whose
        // gradient accumulates (W + W^T) x into the shared operand.
        let x = rand_vec(&mut rng, 5);
        let w = rand_mat(&mut rng, 5, 7);
        let y = rand_vec(&mut rng, 7);
        check_gradients(
            |t, vars| t.bilinear(vars[0], vars[1], vars[2]),
            &[x, w, y],
            FD_STEP,
            FD_REL_TOL,
        )
        .unwrap();
        let x = rand_vec(&mut rng, 6);
        let w = rand_mat(&mut rng, 6, 6);
        check_gradients(
            |t, vars| t.bilinear(vars[0], vars[1], vars[0]),
            &[x, w],
            FD_STEP,
            FD_REL_TOL,
        )
        .unwrap();

        // Structure ops.
        let a = rand_vec(&mut rng, 4);
        let b = rand_vec(&mut rng, 3);
        check_gradients(
            |t, vars| {
                let c = t.concat(&[vars[0], vars[1]])?;
                let s = t.slice(c, 2, 6)?;
                let s = t.square(s);
                Ok(t.sum(s))
            },
            &[a, b],
            FD_STEP,
            FD_REL_TOL,
        )
        .unwrap();

        // Scale (scalar node times vector) and broadcast.
        let s = Array::scalar(0.8);
        let v = rand_vec(&mut rng, 5);
        check_gradients(
            |t, vars| {
                let y = t.scale(vars[0], vars[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            },
            &[s, v],
            FD_STEP,
            FD_REL_TOL,
        )
        .unwrap();

        // Reparameterized sampling: gradient flows through mean and variance.
        let mean = rand_vec(&mut rng, 4);
        let var = rand_pos_vec(&mut rng, 4);
        check_gradients(
            |t, vars| {
                // Fixed noise seed makes the "function" deterministic so the
                // FD oracle and reverse pass see the same draw.
                let mut noise_rng = Rng::new(99);
                let z = super::super::tape::sample_gaussian(t, &mut noise_rng, vars[0], vars[1])?;
                let z = t.square(z);
                Ok(t.sum(z))
            },
            &[mean, var],
            FD_STEP,
            FD_REL_TOL,
        )
        .unwrap();
    }

    #[test]
    fn composite_expression_passes_fd() {
        // A small network-like composite: sum(tanh(W x + b)²).
        let mut rng = Rng::new(7);
        let w = rand_mat(&mut rng, 4, 3);
        let x = rand_vec(&mut rng, 3);
        let b = rand_vec(&mut rng, 4);
        check_gradients(
            |t, vars| {
                let h = t.matmul(vars[0], vars[1])?;
                let h = t.add(h, vars[2])?;
                let h = t.tanh(h);
                let h = t.square(h);
                Ok(t.sum(h))
            },
            &[w, x, b],
            FD_STEP,
            FD_REL_TOL,
        )
        .unwrap();
    }
}

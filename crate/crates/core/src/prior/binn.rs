//! Bilinear drift networks: second-order polynomial vector fields.
//!
//! Two weight layouts:
//! * `Dense` — one `[d, d]` linear cell plus bias, and one `[d, d]` bilinear
//!   form per output component: `f_i(z) = (Wz + b)_i + zᵀ B_i z`.
//! * `Circular` — weights shared across components over a wrap-around window
//!   of radius 2, which makes the drift shift-equivariant:
//!   `f_i(z) = b + Σ_a w_a z_{i+a} + Σ_{a,b} G_{ab} z_{i+a} z_{i+b}`,
//!   offsets a, b ∈ [−2, 2], indices modulo d.
//!
//! Both layouts can represent any quadratic field expressible in their
//! footprint exactly; constructors are provided that encode the Lorenz-63 and
//! Lorenz-96 right-hand sides to machine precision.

use serde::{Deserialize, Serialize};

use crate::adcore::{Array, Rng, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Binder, Parameterized};
use crate::systems::{L63Params, L63sParams, L96Params};

/// Half-width of the shared circular stencil.
pub const STENCIL_RADIUS: usize = 2;

const WINDOW: usize = 2 * STENCIL_RADIUS + 1;

/// Weight scale for fresh networks: near-zero drift keeps early rollouts of
/// the integrator stable.
pub const BINN_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinnMode {
    Dense,
    Circular,
}

#[derive(Debug, Clone)]
enum Kind {
    Dense {
        lin_w: Array,      // [d, d]
        lin_b: Array,      // [d]
        forms: Vec<Array>, // d arrays of [d, d]
    },
    Circular {
        lin_w: Array, // [WINDOW]
        bias: Array,  // scalar
        form: Array,  // [WINDOW * WINDOW], row-major over (a, b)
    },
}

#[derive(Debug, Clone)]
pub struct Binn {
    dim: usize,
    kind: Kind,
}

pub enum BinnVars {
    Dense { lin_w: Var, lin_b: Var, forms: Vec<Var> },
    Circular { lin_w: Var, bias: Var, form: Var },
}

impl Binn {
    pub fn dense(dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("drift network dimension must be positive"));
        }
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.normal() * BINN_INIT_STD).collect()
        };
        let lin_w = Array::matrix(dim, dim, draw(dim * dim))?;
        let lin_b = Array::vector(draw(dim));
        let forms = (0..dim)
            .map(|_| Array::matrix(dim, dim, draw(dim * dim)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Binn { dim, kind: Kind::Dense { lin_w, lin_b, forms } })
    }

    pub fn circular(dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim < WINDOW {
            return Err(Error::validation(format!(
                "circular drift needs dimension >= {WINDOW}, got {dim}"
            )));
        }
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.normal() * BINN_INIT_STD).collect()
        };
        let lin_w = Array::vector(draw(WINDOW));
        let form = Array::vector(draw(WINDOW * WINDOW));
        let bias = Array::scalar(rng.normal() * BINN_INIT_STD);
        Ok(Binn { dim, kind: Kind::Circular { lin_w, bias, form } })
    }

    /// Dense weights encoding the Lorenz-63 right-hand side exactly.
    pub fn exact_l63(p: &L63Params) -> Self {
        let lin_w = Array::matrix(
            3,
            3,
            vec![-p.sigma, p.sigma, 0.0, p.rho, -1.0, 0.0, 0.0, 0.0, -p.beta],
        )
        .expect("static shape");
        let lin_b = Array::vector(vec![0.0; 3]);
        let mut f1 = vec![0.0; 9];
        f1[2] = -1.0; // −z₁ z₃ in component 2
        let mut f2 = vec![0.0; 9];
        f2[1] = 1.0; // z₁ z₂ in component 3
        let forms = vec![
            Array::zeros(&[3, 3]),
            Array::matrix(3, 3, f1).expect("static shape"),
            Array::matrix(3, 3, f2).expect("static shape"),
        ];
        Binn { dim: 3, kind: Kind::Dense { lin_w, lin_b, forms } }
    }

    /// Dense weights encoding the drift of the damped stochastic Lorenz-63.
    pub fn exact_l63_damped(p: &L63sParams) -> Self {
        let mut net = Self::exact_l63(&L63Params { sigma: p.sigma, rho: p.rho, beta: p.beta });
        if let Kind::Dense { lin_w, .. } = &mut net.kind {
            let d = 3;
            let damp = [2.0 / p.gamma, 2.0 / p.gamma, 4.0 / p.gamma];
            for (i, v) in damp.iter().enumerate() {
                lin_w.data_mut()[i * d + i] -= v;
            }
        }
        net
    }

    /// Dense weights encoding the Lorenz-96 right-hand side exactly.
    pub fn exact_l96_dense(p: &L96Params) -> Result<Self> {
        p.validate()?;
        let d = p.n_z;
        let mut lin = vec![0.0; d * d];
        for i in 0..d {
            lin[i * d + i] = -1.0;
        }
        let lin_w = Array::matrix(d, d, lin)?;
        let lin_b = Array::vector(vec![p.forcing; d]);
        let mut forms = Vec::with_capacity(d);
        for i in 0..d {
            let mut f = vec![0.0; d * d];
            let prev = (i + d - 1) % d;
            f[((i + 1) % d) * d + prev] = 1.0;
            f[((i + d - 2) % d) * d + prev] = -1.0;
            forms.push(Array::matrix(d, d, f)?);
        }
        Ok(Binn { dim: d, kind: Kind::Dense { lin_w, lin_b, forms } })
    }

    /// Shared circular weights encoding the Lorenz-96 right-hand side exactly
    /// (any dimension ≥ the stencil window works with the same weights).
    pub fn exact_l96_circular(p: &L96Params) -> Result<Self> {
        p.validate()?;
        if p.n_z < WINDOW {
            return Err(Error::validation(format!(
                "circular drift needs dimension >= {WINDOW}, got {}",
                p.n_z
            )));
        }
        let mut lin_w = vec![0.0; WINDOW];
        lin_w[STENCIL_RADIUS] = -1.0; // offset 0
        let mut form = vec![0.0; WINDOW * WINDOW];
        let idx = |off: isize| (off + STENCIL_RADIUS as isize) as usize;
        form[idx(1) * WINDOW + idx(-1)] = 1.0; // z_{i+1} z_{i−1}
        form[idx(-2) * WINDOW + idx(-1)] = -1.0; // −z_{i−2} z_{i−1}
        Ok(Binn {
            dim: p.n_z,
            kind: Kind::Circular {
                lin_w: Array::vector(lin_w),
                bias: Array::scalar(p.forcing),
                form: Array::vector(form),
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> BinnMode {
        match self.kind {
            Kind::Dense { .. } => BinnMode::Dense,
            Kind::Circular { .. } => BinnMode::Circular,
        }
    }

    /// Drift as a plain function of the state.
    pub fn drift(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::validation(format!(
                "drift input has {} components, network expects {}",
                z.len(),
                self.dim
            )));
        }
        Ok(self.drift_unchecked(z))
    }

    pub(crate) fn drift_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        match &self.kind {
            Kind::Dense { lin_w, lin_b, forms } => {
                let mut out = lin_b.data().to_vec();
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += lin_w.data()[i * d + j] * z[j];
                    }
                    let fi = forms[i].data();
                    for r in 0..d {
                        for c in 0..d {
                            acc += z[r] * fi[r * d + c] * z[c];
                        }
                    }
                    out[i] += acc;
                }
                out
            }
            Kind::Circular { lin_w, bias, form } => {
                let w = lin_w.data();
                let g = form.data();
                let b = bias.data()[0];
                (0..d)
                    .map(|i| {
                        let at = |off: usize| z[(i + d + off - STENCIL_RADIUS) % d];
                        let mut acc = b;
                        for a in 0..WINDOW {
                            acc += w[a] * at(a);
                        }
                        for a in 0..WINDOW {
                            for bb in 0..WINDOW {
                                acc += g[a * WINDOW + bb] * at(a) * at(bb);
                            }
                        }
                        acc
                    })
                    .collect()
            }
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BinnVars {
        match &self.kind {
            Kind::Dense { lin_w, lin_b, forms } => BinnVars::Dense {
                lin_w: b.leaf(prefix, "lin_w", lin_w),
                lin_b: b.leaf(prefix, "lin_b", lin_b),
                forms: forms
                    .iter()
                    .enumerate()
                    .map(|(i, f)| b.leaf(prefix, &format!("form{i}"), f))
                    .collect(),
            },
            Kind::Circular { lin_w, bias, form } => BinnVars::Circular {
                lin_w: b.leaf(prefix, "lin_w", lin_w),
                bias: b.leaf(prefix, "bias", bias),
                form: b.leaf(prefix, "form", form),
            },
        }
    }

    /// Drift recorded on the tape.
    pub fn drift_tape(&self, tape: &mut Tape, vars: &BinnVars, z: Var) -> Result<Var> {
        let d = self.dim;
        if tape.value(z).shape() != [d] {
            return Err(Error::validation(format!(
                "drift input has shape {:?}, network expects [{d}]",
                tape.value(z).shape()
            )));
        }
        match vars {
            BinnVars::Dense { lin_w, lin_b, forms } => {
                let wz = tape.matmul(*lin_w, z)?;
                let lin = tape.add(wz, *lin_b)?;
                let mut bils = Vec::with_capacity(d);
                for f in forms {
                    bils.push(tape.bilinear(z, *f, z)?);
                }
                let bil = tape.concat(&bils)?;
                tape.add(lin, bil)
            }
            BinnVars::Circular { lin_w, bias, form } => {
                // rotations rot_a(z)_i = z_{(i + a − radius) mod d}
                let mut rots = Vec::with_capacity(WINDOW);
                for a in 0..WINDOW {
                    let shift = (a + d - STENCIL_RADIUS) % d;
                    let rot = if shift == 0 {
                        z
                    } else {
                        let head = tape.slice(z, shift, d)?;
                        let tail = tape.slice(z, 0, shift)?;
                        tape.concat(&[head, tail])?
                    };
                    rots.push(rot);
                }
                let mut acc = tape.broadcast(*bias, d)?;
                for (a, &rot) in rots.iter().enumerate() {
                    let wa = tape.slice(*lin_w, a, a + 1)?;
                    let term = tape.scale(wa, rot)?;
                    acc = tape.add(acc, term)?;
                }
                for a in 0..WINDOW {
                    for bb in 0..WINDOW {
                        let g = tape.slice(*form, a * WINDOW + bb, a * WINDOW + bb + 1)?;
                        let prod = tape.mul(rots[a], rots[bb])?;
                        let term = tape.scale(g, prod)?;
                        acc = tape.add(acc, term)?;
                    }
                }
                Ok(acc)
            }
        }
    }
}

impl Parameterized for Binn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array)) {
        match &self.kind {
            Kind::Dense { lin_w, lin_b, forms } => {
                f(&join(prefix, "lin_w"), lin_w);
                f(&join(prefix, "lin_b"), lin_b);
                for (i, form) in forms.iter().enumerate() {
                    f(&join(prefix, &format!("form{i}")), form);
                }
            }
            Kind::Circular { lin_w, bias, form } => {
                f(&join(prefix, "lin_w"), lin_w);
                f(&join(prefix, "bias"), bias);
                f(&join(prefix, "form"), form);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array)) {
        match &mut self.kind {
            Kind::Dense { lin_w, lin_b, forms } => {
                f(&join(prefix, "lin_w"), lin_w);
                f(&join(prefix, "lin_b"), lin_b);
                for (i, form) in forms.iter_mut().enumerate() {
                    f(&join(prefix, &format!("form{i}")), form);
                }
            }
            Kind::Circular { lin_w, bias, form } => {
                f(&join(prefix, "lin_w"), lin_w);
                f(&join(prefix, "bias"), bias);
                f(&join(prefix, "form"), form);
            }
        }
    }
}

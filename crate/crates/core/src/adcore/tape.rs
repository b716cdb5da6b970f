//! The differentiation tape: forward operations append nodes, `backward`
//! replays them in reverse, accumulating adjoints.
//!
//! Nodes are identified by insertion index ([`Var`]), so parents always
//! precede children and a single reverse sweep visits the graph in a valid
//! topological order. The tape is a plain `Vec` confined to one thread;
//! replaying the same tape twice produces bitwise-identical gradients.

use super::array::Array;
use super::rng::Rng;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// Constant scalar times array.
    ScalarMul(f64, Var),
    /// Scalar node (rank 0 or `[1]`) times array.
    Scale(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    /// `x^T W y` for `x: [d1]`, `W: [d1, d2]`, `y: [d2]` -> scalar.
    Bilinear(Var, Var, Var),
    Concat(Vec<Var>),
    /// Contiguous vector slice `[start, end)`.
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
}

struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

/// Records a single forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    adjoints: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any path connected them.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Gradient of the root with respect to `v`, or zeros of `shape`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Array {
        match self.get(v) {
            Some(a) => a.clone(),
            None => Array::zeros(shape),
        }
    }
}

fn shape_err(op: &str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::validation(format!("{op}: shape mismatch {lhs:?} vs {rhs:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (parameters, states being optimized).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (observations, noise draws, fixed weights).
    /// Backward passes never propagate into or through constants unless a
    /// differentiable node depends on them downstream.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Array::scalar(v))
    }

    // --- shape-preserving binary ops -------------------------------------

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Array, bool)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(op_name, va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o = f(*o, x);
        }
        Ok((out, self.requires(a) || self.requires(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.data().iter().any(|&x| x == 0.0) {
            return Err(Error::computation("div: zero denominator entry"));
        }
        let (v, rg) = self.zip("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v, rg))
    }

    // --- scaling ----------------------------------------------------------

    /// Constant scalar times array.
    pub fn scalar_mul(&mut self, c: f64, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x *= c;
        }
        let rg = self.requires(a);
        self.push(Op::ScalarMul(c, a), v, rg)
    }

    /// Scalar node (rank 0 or `[1]`) times array.
    pub fn scale(&mut self, s: Var, a: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.len() != 1 {
            return Err(Error::validation(format!(
                "scale: scaling factor must be scalar, got shape {:?}",
                sv.shape()
            )));
        }
        let c = sv.data()[0];
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x *= c;
        }
        let rg = self.requires(s) || self.requires(a);
        Ok(self.push(Op::Scale(s, a), v, rg))
    }

    /// Scalar node broadcast to a length-`n` vector.
    pub fn broadcast(&mut self, s: Var, n: usize) -> Result<Var> {
        let ones = self.constant(Array::filled(&[n], 1.0));
        self.scale(s, ones)
    }

    // --- linear algebra -----------------------------------------------------

    /// Matrix product: `[m,k] x [k,n] -> [m,n]` or matrix-vector
    /// `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let x = va.data()[i * k + l];
                        if x != 0.0 {
                            let row = &vb.data()[l * n..(l + 1) * n];
                            let dst = &mut out[i * n..(i + 1) * n];
                            for (d, &y) in dst.iter_mut().zip(row) {
                                *d += x * y;
                            }
                        }
                    }
                }
                Array::matrix(m, n, out)?
            }
            (&[m, k], &[k2]) if k == k2 => {
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &va.data()[i * k..(i + 1) * k];
                    out[i] = row.iter().zip(vb.data()).map(|(&x, &y)| x * y).sum();
                }
                Array::vector(out)
            }
            (sa, sb) => return Err(shape_err("matmul", sa, sb)),
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Bilinear form `x^T W y` -> scalar, for `x: [d1]`, `W: [d1,d2]`, `y: [d2]`.
    pub fn bilinear(&mut self, x: Var, w: Var, y: Var) -> Result<Var> {
        let (vx, vw, vy) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[y.0].value,
        );
        let (d1, d2) = match vw.shape() {
            &[d1, d2] => (d1, d2),
            s => return Err(Error::validation(format!("bilinear: W must be rank 2, got {s:?}"))),
        };
        if vx.shape() != [d1] {
            return Err(shape_err("bilinear (x vs W rows)", vx.shape(), vw.shape()));
        }
        if vy.shape() != [d2] {
            return Err(shape_err("bilinear (y vs W cols)", vy.shape(), vw.shape()));
        }
        let mut acc = 0.0;
        for i in 0..d1 {
            let xi = vx.data()[i];
            if xi != 0.0 {
                let row = &vw.data()[i * d2..(i + 1) * d2];
                acc += xi * row.iter().zip(vy.data()).map(|(&wij, &yj)| wij * yj).sum::<f64>();
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(y);
        Ok(self.push(Op::Bilinear(x, w, y), Array::scalar(acc), rg))
    }

    // --- structure ----------------------------------------------------------

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::validation("concat: no inputs"));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() > 1 {
                return Err(Error::validation(format!(
                    "concat: inputs must be scalars or vectors, got {:?}",
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
            rg |= self.requires(p);
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Array::vector(data), rg))
    }

    /// Contiguous slice `[start, end)` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rank() != 1 {
            return Err(Error::validation(format!("slice: input must be a vector, got {:?}", v.shape())));
        }
        if start > end || end > v.len() {
            return Err(Error::validation(format!(
                "slice: range {start}..{end} out of bounds for length {}",
                v.len()
            )));
        }
        let out = Array::vector(v.data()[start..end].to_vec());
        let rg = self.requires(a);
        Ok(self.push(Op::Slice(a, start, end), out, rg))
    }

    // --- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.requires(a);
        self.push(Op::Sum(a), Array::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::validation("mean: empty input"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires(a);
        Ok(self.push(Op::Mean(a), Array::scalar(m), rg))
    }

    // --- elementwise nonlinearities -----------------------------------------

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> (Array, bool) {
        let mut v = self.nodes[a.0].value.clone();
        for x in v.data_mut() {
            *x = f(*x);
        }
        (v, self.requires(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (v, rg) = self.map(a, f64::exp);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::computation("log: non-positive input entry"));
        }
        let (v, rg) = self.map(a, f64::ln);
        Ok(self.push(Op::Log(a), v, rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data().iter().any(|&x| x < 0.0) {
            return Err(Error::computation("sqrt: negative input entry"));
        }
        let (v, rg) = self.map(a, f64::sqrt);
        Ok(self.push(Op::Sqrt(a), v, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (v, rg) = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (v, rg) = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (v, rg) = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (v, rg) = self.map(a, |x| x * x);
        self.push(Op::Square(a), v, rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        // Stable ln(1 + e^x) = max(x, 0) + ln1p(e^{-|x|}).
        let (v, rg) = self.map(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(Op::Softplus(a), v, rg)
    }

    /// Clamp entries into `[lo, hi]`; the gradient is zero outside the open
    /// interval (same subgradient convention as `relu` at its kink).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::validation(format!("clamp: empty interval [{lo}, {hi}]")));
        }
        let (v, rg) = self.map(a, |x| x.clamp(lo, hi));
        Ok(self.push(Op::Clamp(a, lo, hi), v, rg))
    }

    // --- reverse sweep --------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Returns the adjoint of every
    /// node reachable backwards from `root` (others read as `None`).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::validation(format!(
                "backward: root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut adj: Vec<Option<Array>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(Array::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Keep the adjoint available to callers.
            adj[idx] = Some(g);
            let g = adj[idx].as_ref().unwrap().clone();
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, |_| g.clone());
                    self.accumulate(&mut adj, *b, |_| g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, |_| g.clone());
                    self.accumulate(&mut adj, *b, |_| {
                        let mut n = g.clone();
                        for x in n.data_mut() {
                            *x = -*x;
                        }
                        n
                    });
                }
                Op::ScalarMul(c, a) => {
                    let c = *c;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for x in n.data_mut() {
                            *x *= c;
                        }
                        n
                    });
                }
                Op::Scale(s, a) => {
                    let c = self.nodes[s.0].value.data()[0];
                    let av = &self.nodes[a.0].value;
                    self.accumulate(&mut adj, *s, |t| {
                        let dot: f64 = g.data().iter().zip(av.data()).map(|(&gi, &ai)| gi * ai).sum();
                        let mut out = Array::zeros(t.nodes[s.0].value.shape());
                        out.data_mut()[0] = dot;
                        out
                    });
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for x in n.data_mut() {
                            *x *= c;
                        }
                        n
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &y) in n.data_mut().iter_mut().zip(bv.data()) {
                            *x *= y;
                        }
                        n
                    });
                    self.accumulate(&mut adj, *b, |_| {
                        let mut n = g.clone();
                        for (x, &y) in n.data_mut().iter_mut().zip(av.data()) {
                            *x *= y;
                        }
                        n
                    });
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &y) in n.data_mut().iter_mut().zip(bv.data()) {
                            *x /= y;
                        }
                        n
                    });
                    self.accumulate(&mut adj, *b, |_| {
                        let mut n = g.clone();
                        for ((x, &num), &den) in
                            n.data_mut().iter_mut().zip(av.data()).zip(bv.data())
                        {
                            *x *= -num / (den * den);
                        }
                        n
                    });
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    match (av.shape(), bv.shape()) {
                        (&[m, k], &[_, n]) => {
                            // dA = G B^T ; dB = A^T G
                            self.accumulate(&mut adj, *a, |_| {
                                let mut da = vec![0.0; m * k];
                                for i in 0..m {
                                    for l in 0..k {
                                        let mut acc = 0.0;
                                        for j in 0..n {
                                            acc += g.data()[i * n + j] * bv.data()[l * n + j];
                                        }
                                        da[i * k + l] = acc;
                                    }
                                }
                                Array::matrix(m, k, da).expect("matmul adjoint shape")
                            });
                            self.accumulate(&mut adj, *b, |_| {
                                let mut db = vec![0.0; k * n];
                                for l in 0..k {
                                    for j in 0..n {
                                        let mut acc = 0.0;
                                        for i in 0..m {
                                            acc += av.data()[i * k + l] * g.data()[i * n + j];
                                        }
                                        db[l * n + j] = acc;
                                    }
                                }
                                Array::matrix(k, n, db).expect("matmul adjoint shape")
                            });
                        }
                        (&[m, k], &[_]) => {
                            // dA = g x^T (outer) ; dx = A^T g
                            self.accumulate(&mut adj, *a, |_| {
                                let mut da = vec![0.0; m * k];
                                for i in 0..m {
                                    let gi = g.data()[i];
                                    for l in 0..k {
                                        da[i * k + l] = gi * bv.data()[l];
                                    }
                                }
                                Array::matrix(m, k, da).expect("matmul adjoint shape")
                            });
                            self.accumulate(&mut adj, *b, |_| {
                                let mut db = vec![0.0; k];
                                for l in 0..k {
                                    let mut acc = 0.0;
                                    for i in 0..m {
                                        acc += av.data()[i * k + l] * g.data()[i];
                                    }
                                    db[l] = acc;
                                }
                                Array::vector(db)
                            });
                        }
                        _ => unreachable!("matmul validated on the forward pass"),
                    }
                }
                Op::Bilinear(x, w, y) => {
                    let gs = g.as_scalar().expect("bilinear output is scalar");
                    let (xv, wv, yv) = (
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &self.nodes[y.0].value,
                    );
                    let (d1, d2) = (xv.len(), yv.len());
                    self.accumulate(&mut adj, *x, |_| {
                        let mut dx = vec![0.0; d1];
                        for (i, dxi) in dx.iter_mut().enumerate() {
                            let row = &wv.data()[i * d2..(i + 1) * d2];
                            *dxi = gs * row.iter().zip(yv.data()).map(|(&wij, &yj)| wij * yj).sum::<f64>();
                        }
                        Array::vector(dx)
                    });
                    self.accumulate(&mut adj, *w, |_| {
                        let mut dw = vec![0.0; d1 * d2];
                        for i in 0..d1 {
                            for j in 0..d2 {
                                dw[i * d2 + j] = gs * xv.data()[i] * yv.data()[j];
                            }
                        }
                        Array::matrix(d1, d2, dw).expect("bilinear adjoint shape")
                    });
                    self.accumulate(&mut adj, *y, |_| {
                        let mut dy = vec![0.0; d2];
                        for (j, dyj) in dy.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for i in 0..d1 {
                                acc += wv.data()[i * d2 + j] * xv.data()[i];
                            }
                            *dyj = gs * acc;
                        }
                        Array::vector(dy)
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        let part_shape = self.nodes[p.0].value.shape().to_vec();
                        let seg = g.data()[offset..offset + n].to_vec();
                        self.accumulate(&mut adj, p, |_| {
                            if part_shape.is_empty() {
                                Array::scalar(seg[0])
                            } else {
                                Array::vector(seg.clone())
                            }
                        });
                        offset += n;
                    }
                }
                Op::Slice(a, start, _end) => {
                    let n = self.nodes[a.0].value.len();
                    let start = *start;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut da = vec![0.0; n];
                        da[start..start + g.len()].copy_from_slice(g.data());
                        Array::vector(da)
                    });
                }
                Op::Sum(a) => {
                    let gs = g.as_scalar().expect("sum output is scalar");
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accumulate(&mut adj, *a, |_| Array::filled(&shape, gs));
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let gs = g.as_scalar().expect("mean output is scalar") / n;
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    self.accumulate(&mut adj, *a, |_| Array::filled(&shape, gs));
                }
                Op::Exp(a) => {
                    let out = &node.value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &e) in n.data_mut().iter_mut().zip(out.data()) {
                            *x *= e;
                        }
                        n
                    });
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &v) in n.data_mut().iter_mut().zip(av.data()) {
                            *x /= v;
                        }
                        n
                    });
                }
                Op::Sqrt(a) => {
                    let out = &node.value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &s) in n.data_mut().iter_mut().zip(out.data()) {
                            // d sqrt(v)/dv = 1/(2 sqrt(v)); at v = 0 the
                            // derivative is unbounded — pin it to 0 so the
                            // zero-variance limit stays finite.
                            *x = if s > 0.0 { *x / (2.0 * s) } else { 0.0 };
                        }
                        n
                    });
                }
                Op::Tanh(a) => {
                    let out = &node.value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &t) in n.data_mut().iter_mut().zip(out.data()) {
                            *x *= 1.0 - t * t;
                        }
                        n
                    });
                }
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &s) in n.data_mut().iter_mut().zip(out.data()) {
                            *x *= s * (1.0 - s);
                        }
                        n
                    });
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &v) in n.data_mut().iter_mut().zip(av.data()) {
                            if v <= 0.0 {
                                *x = 0.0;
                            }
                        }
                        n
                    });
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &v) in n.data_mut().iter_mut().zip(av.data()) {
                            *x *= 2.0 * v;
                        }
                        n
                    });
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[a.0].value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &v) in n.data_mut().iter_mut().zip(av.data()) {
                            *x *= 1.0 / (1.0 + (-v).exp());
                        }
                        n
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let av = &self.nodes[a.0].value;
                    self.accumulate(&mut adj, *a, |_| {
                        let mut n = g.clone();
                        for (x, &v) in n.data_mut().iter_mut().zip(av.data()) {
                            if v <= lo || v >= hi {
                                *x = 0.0;
                            }
                        }
                        n
                    });
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(
        &self,
        adj: &mut [Option<Array>],
        target: Var,
        contribution: impl FnOnce(&Tape) -> Array,
    ) {
        if !self.requires(target) {
            return;
        }
        let c = contribution(self);
        match &mut adj[target.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), c.shape());
                for (x, &y) in existing.data_mut().iter_mut().zip(c.data()) {
                    *x += y;
                }
            }
            slot => *slot = Some(c),
        }
    }
}

/// Differentiable reparameterized draw from `N(mean, diag(var))`:
/// `mean + sqrt(var) ⊙ ξ` with `ξ` standard normal. The gradient flows
/// through `mean` and `var`; the noise is recorded as a constant. Variance
/// entries must be non-negative; at exactly zero the draw collapses to the
/// mean.
pub fn sample_gaussian(tape: &mut Tape, rng: &mut Rng, mean: Var, var: Var) -> Result<Var> {
    let (ms, vs) = (tape.value(mean).shape(), tape.value(var).shape());
    if ms != vs {
        return Err(shape_err("sample_gaussian", ms, vs));
    }
    if tape.value(var).data().iter().any(|&v| v < 0.0) {
        return Err(Error::validation("sample_gaussian: negative variance entry"));
    }
    let n = tape.value(mean).len();
    let shape = tape.value(mean).shape().to_vec();
    let mut noise = Array::zeros(&shape);
    for (x, z) in noise.data_mut().iter_mut().zip(rng.normal_vec(n)) {
        *x = z;
    }
    let xi = tape.constant(noise);
    let sd = tape.sqrt(var)?;
    let scaled = tape.mul(sd, xi)?;
    tape.add(mean, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    #[test]
    fn square_of_three_is_nine() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![3.0]));
        let y = t.square(x);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn matmul_identity_returns_vector() {
        let mut t = Tape::new();
        let eye = t.leaf(Array::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let v = t.leaf(Array::vector(vec![2.0, -1.0, 0.5]));
        let out = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(out).data(), &[2.0, -1.0, 0.5]);
    }

    #[test]
    fn matmul_matrix_matrix_matches_triple_loop() {
        let mut rng = Rng::new(17);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    expect[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        let mut t = Tape::new();
        let av = t.leaf(Array::matrix(m, k, a).unwrap());
        let bv = t.leaf(Array::matrix(k, n, b).unwrap());
        let out = t.matmul(av, bv).unwrap();
        for (got, want) in t.value(out).data().iter().zip(&expect) {
            assert_close(*got, *want, 1e-12);
        }
    }

    #[test]
    fn bilinear_matches_explicit_double_loop() {
        let mut rng = Rng::new(23);
        let (d1, d2) = (4, 6);
        let x: Vec<f64> = (0..d1).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..d1 * d2).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..d2).map(|_| rng.normal()).collect();
        let mut expect = 0.0;
        for i in 0..d1 {
            for j in 0..d2 {
                expect += x[i] * w[i * d2 + j] * y[j];
            }
        }
        let mut t = Tape::new();
        let xv = t.leaf(Array::vector(x));
        let wv = t.leaf(Array::matrix(d1, d2, w).unwrap());
        let yv = t.leaf(Array::vector(y));
        let out = t.bilinear(xv, wv, yv).unwrap();
        assert_close(t.value(out).as_scalar().unwrap(), expect, 1e-12);
    }

    #[test]
    fn backward_of_square_sum() {
        // d/dx sum(x^2) = 2x; at x = 3 the gradient is 6.
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![3.0]));
        let sq = t.square(x);
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_through_constant_root_gives_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, 2.0]));
        let c = t.constant_scalar(5.0);
        let g = t.backward(c).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn shape_mismatch_names_the_primitive() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(vec![1.0, 2.0]));
        let b = t.leaf(Array::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "error should name the op: {err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "error should show shapes: {err}");
    }

    #[test]
    fn log_of_non_positive_fails() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(vec![1.0, 0.0]));
        assert!(t.log(a).is_err());
    }

    #[test]
    fn replaying_a_tape_twice_is_bitwise_identical() {
        let mut rng = Rng::new(9);
        let mut t = Tape::new();
        let w = t.leaf(Array::matrix(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap());
        let x = t.leaf(Array::vector(rng.normal_vec(3)));
        let h = t.matmul(w, x).unwrap();
        let h = t.tanh(h);
        let sq = t.square(h);
        let root = t.sum(sq);
        let g1 = t.backward(root).unwrap();
        let g2 = t.backward(root).unwrap();
        for v in [w, x] {
            let a = g1.get(v).unwrap();
            let b = g2.get(v).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn sample_gaussian_zero_variance_returns_mean_exactly() {
        let mut t = Tape::new();
        let mut rng = Rng::new(1);
        let mean = t.leaf(Array::vector(vec![1.5, -2.0, 0.25]));
        let var = t.leaf(Array::vector(vec![0.0, 0.0, 0.0]));
        let z = sample_gaussian(&mut t, &mut rng, mean, var).unwrap();
        assert_eq!(t.value(z).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn sample_gaussian_rejects_negative_variance() {
        let mut t = Tape::new();
        let mut rng = Rng::new(1);
        let mean = t.leaf(Array::vector(vec![0.0]));
        let var = t.leaf(Array::vector(vec![-1e-9]));
        assert!(sample_gaussian(&mut t, &mut rng, mean, var).is_err());
    }

    #[test]
    fn sample_gaussian_moments() {
        // Mean 2, variance 4: over 1e6 draws the sample mean is within ~0.01
        // and the sample variance within 2%.
        let mut rng = Rng::new(77);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut t = Tape::new();
            let mean = t.leaf(Array::vector(vec![2.0]));
            let var = t.leaf(Array::vector(vec![4.0]));
            let z = sample_gaussian(&mut t, &mut rng, mean, var).unwrap();
            let v = t.value(z).data()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert_close(mean, 2.0, 0.01);
        assert!((var - 4.0).abs() / 4.0 < 0.02, "sample variance {var}");
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(vec![1.0, 2.0]));
        let b = t.leaf(Array::vector(vec![3.0]));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = t.slice(c, 1, 3).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 3.0]);
    }

    #[test]
    fn broadcast_spreads_scalar_and_sums_gradient() {
        let mut t = Tape::new();
        let s = t.leaf(Array::scalar(2.5));
        let v = t.broadcast(s, 4).unwrap();
        assert_eq!(t.value(v).data(), &[2.5; 4]);
        let total = t.sum(v);
        let g = t.backward(total).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[4.0]);
    }
}

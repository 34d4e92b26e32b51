//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every value on the tape is a [`Tensor2`]; vectors are `n × 1` columns and
//! scalars are `1 × 1`. Nodes are appended in evaluation order, so the record
//! is topologically sorted by construction and `backward` is a single reverse
//! sweep.

use super::ops::{kl_term, KL_CLAMP, NORM_EPS};
use super::tensor::{dot, norm, Tensor2};
use super::KernelError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    MatVec(Var, Var),
    MatTVec(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Softmax(Var),
    CosineLogits { bank: Var, query: Var, inv_temp: f64 },
    CosineSim(Var, Var),
    SqDist(Var, Var),
    Kl(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor2> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of the right shape if nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor2 {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor2::zeros(r, c)
            }
        }
    }
}

fn same_shape(a: &Tensor2, b: &Tensor2) -> Result<(), KernelError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(KernelError::ShapeMismatch { left: a.shape(), right: b.shape() })
    }
}

fn accumulate(slot: &mut Option<Tensor2>, shape: (usize, usize), f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1));
    f(g.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor2 {
        &self.nodes[var.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    /// A trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Constant)
    }

    /// Copy of `var`'s current value that blocks gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor2::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor2::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| c * v).collect();
        let out = Tensor2::from_vec(x.rows(), x.cols(), data).expect("shape preserved");
        self.push(out, Op::Scale(a, c))
    }

    /// Elementwise sum of equally shaped nodes. An empty list is a scalar zero.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var, KernelError> {
        let Some(&first) = terms.first() else {
            return Ok(self.constant(Tensor2::scalar(0.0)));
        };
        let mut acc = self.value(first).clone();
        for &t in &terms[1..] {
            let v = self.value(t);
            same_shape(&acc, v)?;
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += b;
            }
        }
        Ok(self.push(acc, Op::Sum(terms.to_vec())))
    }

    /// `m · x` with `m: r×c`, `x: c×1`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var, KernelError> {
        let (mv, xv) = (self.value(m), self.value(x));
        if xv.cols() != 1 {
            return Err(KernelError::ShapeMismatch { left: mv.shape(), right: xv.shape() });
        }
        let out = mv.matvec(xv.data())?;
        Ok(self.push(Tensor2::column(&out), Op::MatVec(m, x)))
    }

    /// `mᵀ · w` with `m: r×c`, `w: r×1`.
    pub fn matvec_transposed(&mut self, m: Var, w: Var) -> Result<Var, KernelError> {
        let (mv, wv) = (self.value(m), self.value(w));
        if wv.cols() != 1 {
            return Err(KernelError::ShapeMismatch { left: mv.shape(), right: wv.shape() });
        }
        let out = mv.matvec_transposed(wv.data())?;
        Ok(self.push(Tensor2::column(&out), Op::MatTVec(m, w)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(KernelError::ShapeMismatch { left: x.shape(), right: y.shape() });
        }
        let (r, k, c) = (x.rows(), x.cols(), y.cols());
        let mut out = Tensor2::zeros(r, c);
        for i in 0..r {
            for t in 0..k {
                let xit = x.get(i, t);
                let yrow = y.row(t);
                for (o, &yv) in out.row_mut(i).iter_mut().zip(yrow) {
                    *o += xit * yv;
                }
            }
        }
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor2::from_vec(x.rows(), x.cols(), data).expect("shape preserved");
        self.push(out, Op::Tanh(a))
    }

    /// Softmax over all entries of a column.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = super::ops::softmax(x.data());
        let out = Tensor2::from_vec(x.rows(), x.cols(), s.into_inner()).expect("shape preserved");
        self.push(out, Op::Softmax(a))
    }

    /// Column of `cos(bank_i, query) / temperature` over the rows of `bank`.
    pub fn cosine_logits(&mut self, bank: Var, query: Var, temperature: f64) -> Result<Var, KernelError> {
        let (m, q) = (self.value(bank), self.value(query));
        if q.cols() != 1 || q.rows() != m.cols() {
            return Err(KernelError::ShapeMismatch { left: m.shape(), right: q.shape() });
        }
        let qn = norm(q.data());
        if qn <= NORM_EPS {
            return Err(KernelError::ZeroNormVector);
        }
        let inv_temp = 1.0 / temperature;
        let mut out = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let row = m.row(i);
            let rn = norm(row);
            if rn <= NORM_EPS {
                return Err(KernelError::ZeroNormVector);
            }
            out.push(inv_temp * dot(row, q.data()) / (rn * qn));
        }
        Ok(self.push(Tensor2::column(&out), Op::CosineLogits { bank, query, inv_temp }))
    }

    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        let c = super::ops::cosine_sim(x.data(), y.data())?;
        Ok(self.push(Tensor2::scalar(c), Op::CosineSim(a, b)))
    }

    /// Scalar `Σ (a − b)²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        let d = super::ops::mse(x.data(), y.data())?;
        Ok(self.push(Tensor2::scalar(d), Op::SqDist(a, b)))
    }

    /// Scalar `KL(p || q)`.
    pub fn kl(&mut self, p: Var, q: Var) -> Result<Var, KernelError> {
        let (x, y) = (self.value(p), self.value(q));
        same_shape(x, y)?;
        let d = super::ops::kl_div(x.data(), y.data())?;
        Ok(self.push(Tensor2::scalar(d), Op::Kl(p, q)))
    }

    /// Gradients of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients, KernelError> {
        if self.nodes.is_empty() {
            return Err(KernelError::EmptyTape);
        }
        let root_shape = self.value(root).shape();
        if root_shape != (1, 1) {
            return Err(KernelError::NotScalar { shape: root_shape });
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let g = g.data();
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    for (v, sign) in [(a, 1.0), (b, 1.0)] {
                        accumulate(&mut grads[v.0], shapes[v.0], |d| {
                            d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g)
                        });
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(a, 1.0), (b, -1.0)] {
                        accumulate(&mut grads[v.0], shapes[v.0], |d| {
                            d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g)
                        });
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], shapes[a.0], |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
                }),
                Op::Sum(terms) => {
                    for t in terms {
                        accumulate(&mut grads[t.0], shapes[t.0], |d| {
                            d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
                        });
                    }
                }
                Op::MatVec(m, x) => {
                    let (mv, xv) = (self.value(*m), self.value(*x));
                    let cols = mv.cols();
                    accumulate(&mut grads[m.0], shapes[m.0], |d| {
                        for (i, gi) in g.iter().enumerate() {
                            for (dij, xj) in d[i * cols..(i + 1) * cols].iter_mut().zip(xv.data()) {
                                *dij += gi * xj;
                            }
                        }
                    });
                    let back = mv.matvec_transposed(g).expect("shapes checked at record time");
                    accumulate(&mut grads[x.0], shapes[x.0], |d| {
                        d.iter_mut().zip(back.iter()).for_each(|(d, b)| *d += b)
                    });
                }
                Op::MatTVec(m, w) => {
                    let (mv, wv) = (self.value(*m), self.value(*w));
                    let cols = mv.cols();
                    accumulate(&mut grads[m.0], shapes[m.0], |d| {
                        for (i, wi) in wv.data().iter().enumerate() {
                            for (dij, gj) in d[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                                *dij += wi * gj;
                            }
                        }
                    });
                    let back = mv.matvec(g).expect("shapes checked at record time");
                    accumulate(&mut grads[w.0], shapes[w.0], |d| {
                        d.iter_mut().zip(back.iter()).for_each(|(d, b)| *d += b)
                    });
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (r, k, c) = (x.rows(), x.cols(), y.cols());
                    // dA = G Bᵀ
                    accumulate(&mut grads[a.0], shapes[a.0], |d| {
                        for i in 0..r {
                            for t in 0..k {
                                d[i * k + t] += dot(&g[i * c..(i + 1) * c], y.row(t));
                            }
                        }
                    });
                    // dB = Aᵀ G
                    accumulate(&mut grads[b.0], shapes[b.0], |d| {
                        for i in 0..r {
                            for t in 0..k {
                                let xit = x.get(i, t);
                                for (dv, gv) in d[t * c..(t + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                    *dv += xit * gv;
                                }
                            }
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], shapes[a.0], |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += (1.0 - y * y) * g;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let gy = dot(g, y);
                    accumulate(&mut grads[a.0], shapes[a.0], |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - gy);
                        }
                    });
                }
                Op::CosineLogits { bank, query, inv_temp } => {
                    let (m, q) = (self.value(*bank), self.value(*query));
                    let qd = q.data();
                    let qn = norm(qd);
                    let cols = m.cols();
                    let mut dq = vec![0.0; cols];
                    let mut dm = vec![0.0; m.rows() * cols];
                    for (i, gi) in g.iter().enumerate() {
                        let row = m.row(i);
                        let rn = norm(row);
                        let cos = dot(row, qd) / (rn * qn);
                        let s = inv_temp * gi;
                        for j in 0..cols {
                            dm[i * cols + j] += s * (qd[j] / (rn * qn) - cos * row[j] / (rn * rn));
                            dq[j] += s * (row[j] / (rn * qn) - cos * qd[j] / (qn * qn));
                        }
                    }
                    accumulate(&mut grads[bank.0], shapes[bank.0], |d| {
                        d.iter_mut().zip(&dm).for_each(|(d, v)| *d += v)
                    });
                    accumulate(&mut grads[query.0], shapes[query.0], |d| {
                        d.iter_mut().zip(&dq).for_each(|(d, v)| *d += v)
                    });
                }
                Op::CosineSim(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    let (nx, ny) = (norm(x), norm(y));
                    let cos = node.value.data()[0];
                    let g0 = g[0];
                    accumulate(&mut grads[a.0], shapes[a.0], |d| {
                        for ((d, xi), yi) in d.iter_mut().zip(x).zip(y) {
                            *d += g0 * (yi / (nx * ny) - cos * xi / (nx * nx));
                        }
                    });
                    accumulate(&mut grads[b.0], shapes[b.0], |d| {
                        for ((d, xi), yi) in d.iter_mut().zip(x).zip(y) {
                            *d += g0 * (xi / (nx * ny) - cos * yi / (ny * ny));
                        }
                    });
                }
                Op::SqDist(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    let g0 = g[0];
                    for (v, sign) in [(a, 2.0), (b, -2.0)] {
                        accumulate(&mut grads[v.0], shapes[v.0], |d| {
                            for ((d, xi), yi) in d.iter_mut().zip(x).zip(y) {
                                *d += sign * g0 * (xi - yi);
                            }
                        });
                    }
                }
                Op::Kl(p, q) => {
                    let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                    let g0 = g[0];
                    debug_assert_eq!(node.value.data()[0], pv.iter().zip(qv).map(|(a, b)| kl_term(*a, *b)).sum::<f64>());
                    accumulate(&mut grads[p.0], shapes[p.0], |d| {
                        for ((d, &pi), &qi) in d.iter_mut().zip(pv).zip(qv) {
                            if pi > 0.0 {
                                *d += g0 * (pi.ln() - qi.max(KL_CLAMP).ln() + 1.0);
                            }
                        }
                    });
                    accumulate(&mut grads[q.0], shapes[q.0], |d| {
                        for ((d, &pi), &qi) in d.iter_mut().zip(pv).zip(qv) {
                            if qi > KL_CLAMP {
                                *d -= g0 * pi / qi;
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

use super::kernels::{self, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Relu(Var),
    Logistic(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Distance(Var, Var),
    PairwiseDistances(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep. A tape supports
/// one backward pass; call [`Tape::reset`] (or build a new tape) before the
/// next one.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it through tracked operations.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("shape recorded"))
    }

    /// Like [`get`](Self::get) but yields zeros instead of `None`.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Elementwise binary op allowing a scalar on either side.
fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.is_scalar() && b.shape().is_empty() {
        let y = b.item();
        return Ok(a.map(|x| f(x, y)));
    }
    if a.is_scalar() && a.shape().is_empty() {
        let x = a.item();
        return Ok(b.map(|y| f(x, y)));
    }
    Err(Error::dim(op, a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::matrix(m, n, kernels::matmul(m, k, n, av.data(), bv.data()))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.shape().len() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        kernels::add_bias_rows(out.data_mut(), bv.data());
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), tracked))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::ScalarMul(x, s), tracked)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::AddScalar(x), tracked)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scalar_mul(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Square(x), tracked)
    }

    /// Elementwise square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::domain("sqrt", format!("negative input {bad}")));
        }
        let out = xv.map(f64::sqrt);
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Sqrt(x), tracked))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let out = xv.map(f64::ln);
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Log(x), tracked))
    }

    /// `max(0, x)`; derivative 0 at exactly 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::relu);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Relu(x), tracked)
    }

    pub fn logistic(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::logistic);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Logistic(x), tracked)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Mean over all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let m = if n == 0 {
            0.0
        } else {
            xv.data().iter().sum::<f64>() / n as f64
        };
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), tracked)
    }

    /// Concatenates along the last axis. Vectors join end to end; matrices
    /// must agree on row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = self.value(*first).shape().len();
        let rows = self.value(*first).rows();
        if rank == 0 || rank > 2 {
            return Err(Error::dim("concat", self.value(*first).shape(), &[]));
        }
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != rank || v.rows() != rows {
                return Err(Error::dim("concat", self.value(*first).shape(), v.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let out = Tensor::new(shape, data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), tracked))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::dim("gather_rows", xv.shape(), &[rows.len()]));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Contract(format!("gather_rows index {r} out of {n} rows")));
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), tracked))
    }

    /// `||u - v||_2` as a scalar. The gradient at `u == v` is defined as zero.
    pub fn euclidean_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        same_shape("euclidean_distance", uv, vv)?;
        let d = kernels::sq_distance(uv.data(), vv.data()).sqrt();
        let tracked = self.tracked(&[u, v]);
        Ok(self.push(Tensor::scalar(d), Op::Distance(u, v), tracked))
    }

    /// All-pairs Euclidean distances between the rows of `a` (`r x k`) and
    /// `b` (`c x k`), giving `r x c`. Zero distances get zero gradient.
    pub fn pairwise_distances(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::dim("pairwise_distances", av.shape(), bv.shape()));
        }
        let (r, c) = (av.shape()[0], bv.shape()[0]);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(kernels::sq_distance(av.row(i), bv.row(j)).sqrt());
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::PairwiseDistances(a, b), tracked))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns a contract error if `loss` is not a scalar or if this tape has
    /// already been differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same recording; reset the tape first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.tracked {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].tracked;

        // Accumulates `delta` into the gradient slot of `v`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    // dA = G * B^T
                    acc(grads, *a, m * k, |s| gemm(m, n, k, g, false, bv.data(), true, 1.0, s));
                }
                if wants(*b) {
                    // dB = A^T * G
                    acc(grads, *b, k * n, |s| gemm(k, m, n, av.data(), true, g, false, 1.0, s));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !wants(v) {
                        continue;
                    }
                    let len = val(v).len();
                    if len == g.len() && val(v).shape() == node.value.shape() {
                        acc(grads, v, len, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
                    } else {
                        let total: f64 = g.iter().sum();
                        acc(grads, v, 1, |d| d[0] += s * total);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let (vv, ov) = (val(v), val(other));
                    if vv.shape() == node.value.shape() {
                        if ov.shape() == node.value.shape() {
                            acc(grads, v, vv.len(), |d| {
                                for ((d, g), o) in d.iter_mut().zip(g).zip(ov.data()) {
                                    *d += g * o;
                                }
                            });
                        } else {
                            let o = ov.item();
                            acc(grads, v, vv.len(), |d| {
                                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * o)
                            });
                        }
                    } else {
                        let total: f64 = g.iter().zip(ov.data()).map(|(g, o)| g * o).sum();
                        acc(grads, v, 1, |d| d[0] += total);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    acc(grads, *x, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
                if wants(*b) {
                    let c = val(*b).len();
                    acc(grads, *b, c, |d| {
                        for row in g.chunks(c) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::ScalarMul(x, s) => {
                if wants(*x) {
                    acc(grads, *x, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
                }
            }
            Op::AddScalar(x) => {
                if wants(*x) {
                    acc(grads, *x, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::Square(x) => self.unary(*x, g, grads, |x| 2.0 * x),
            Op::Sqrt(x) => {
                let out = node.value.data();
                if wants(*x) {
                    acc(grads, *x, g.len(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                            if *y > 0.0 {
                                *d += g * 0.5 / y;
                            }
                        }
                    });
                }
            }
            Op::Log(x) => self.unary(*x, g, grads, |x| 1.0 / x),
            Op::Relu(x) => self.unary(*x, g, grads, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Logistic(x) => {
                let out = node.value.data();
                if wants(*x) {
                    acc(grads, *x, g.len(), |d| {
                        for ((d, g), s) in d.iter_mut().zip(g).zip(out) {
                            *d += g * s * (1.0 - s);
                        }
                    });
                }
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary(*x, g, grads, move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let g0 = g[0];
                    acc(grads, *x, val(*x).len(), |d| d.iter_mut().for_each(|d| *d += g0));
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    let g0 = g[0] / n.max(1) as f64;
                    acc(grads, *x, n, |d| d.iter_mut().for_each(|d| *d += g0));
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).cols();
                    if wants(*p) {
                        acc(grads, *p, rows * c, |d| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + c];
                                d[r * c..(r + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, g)| *d += g);
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::GatherRows(x, rows) => {
                if wants(*x) {
                    let xv = val(*x);
                    let c = xv.shape()[1];
                    acc(grads, *x, xv.len(), |d| {
                        for (i, &r) in rows.iter().enumerate() {
                            d[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(d, g)| *d += g);
                        }
                    });
                }
            }
            Op::Distance(u, v) => {
                let dist = node.value.item();
                if dist > 0.0 {
                    let (uv, vv) = (val(*u), val(*v));
                    let scale = g[0] / dist;
                    for (w, sign) in [(*u, 1.0), (*v, -1.0)] {
                        if wants(w) {
                            acc(grads, w, uv.len(), |d| {
                                for ((d, a), b) in d.iter_mut().zip(uv.data()).zip(vv.data()) {
                                    *d += sign * scale * (a - b);
                                }
                            });
                        }
                    }
                }
            }
            Op::PairwiseDistances(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, c, k) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
                let dist = node.value.data();
                // coefficient g_ij / d_ij, zero where d_ij == 0
                let coef: Vec<f64> = g
                    .iter()
                    .zip(dist)
                    .map(|(g, d)| if *d > 0.0 { g / d } else { 0.0 })
                    .collect();
                if wants(*a) {
                    acc(grads, *a, r * k, |d| {
                        for i in 0..r {
                            let ai = av.row(i);
                            let di = &mut d[i * k..(i + 1) * k];
                            for j in 0..c {
                                let w = coef[i * c + j];
                                if w == 0.0 {
                                    continue;
                                }
                                for ((d, x), y) in di.iter_mut().zip(ai).zip(bv.row(j)) {
                                    *d += w * (x - y);
                                }
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, c * k, |d| {
                        for i in 0..r {
                            let ai = av.row(i);
                            for j in 0..c {
                                let w = coef[i * c + j];
                                if w == 0.0 {
                                    continue;
                                }
                                let dj = &mut d[j * k..(j + 1) * k];
                                for ((d, x), y) in dj.iter_mut().zip(ai).zip(bv.row(j)) {
                                    *d -= w * (x - y);
                                }
                            }
                        }
                    });
                }
            }
        }
    }

    /// Elementwise chain rule: `dx += g * f'(x)`.
    fn unary(&self, x: Var, g: &[f64], grads: &mut [Option<Vec<f64>>], deriv: impl Fn(f64) -> f64) {
        let xn = &self.nodes[x.0];
        if !xn.tracked {
            return;
        }
        let slot = grads[x.0].get_or_insert_with(|| vec![0.0; g.len()]);
        for ((d, g), xv) in slot.iter_mut().zip(g).zip(xn.value.data()) {
            *d += g * deriv(*xv);
        }
    }
}

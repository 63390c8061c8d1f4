//! Reverse-mode differentiation over a recorded chain of primitives.
//!
//! A [`Tape`] is the computation record: values are computed eagerly as
//! operations are pushed, and [`Tape::backward`] replays the record once in
//! reverse order, accumulating vector-Jacobian products. The primitive set
//! is fixed to what the pipeline's equations compose from: matrix multiply,
//! elementwise add/sub/mul, scalar scale, concat, row slicing/gather,
//! row-mean, softmax, log, exp, cosine similarity, and cross-entropy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, softmax_slice, Tensor, COSINE_NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Primitive {
    Leaf,
    /// Matrix product with 1-D promotion: a 1-D left operand acts as a row
    /// vector, a 1-D right operand as a column vector, and promoted axes are
    /// squeezed from the output.
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// Row-major concatenation. `rows: Some(n)` stacks n equal-length parts
    /// into an [n, d] matrix; `None` joins vectors into one vector.
    Concat { parts: Vec<Var>, rows: Option<usize> },
    SliceRows { a: Var, start: usize, end: usize },
    RowMean { a: Var },
    Softmax { a: Var },
    Log { a: Var },
    Exp { a: Var },
    CosineSim { u: Var, v: Var, degenerate: bool },
    GatherRow { m: Var, row: usize },
    /// Mean token cross-entropy of `targets[t]` under logit row t.
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Primitive {
    fn tag(&self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul { .. } => "matmul",
            Primitive::Add { .. } => "add",
            Primitive::Sub { .. } => "sub",
            Primitive::Mul { .. } => "mul",
            Primitive::Scale { .. } => "scale",
            Primitive::Concat { .. } => "concat",
            Primitive::SliceRows { .. } => "slice_rows",
            Primitive::RowMean { .. } => "row_mean",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Log { .. } => "log",
            Primitive::Exp { .. } => "exp",
            Primitive::CosineSim { .. } => "cosine_similarity",
            Primitive::GatherRow { .. } => "gather_row",
            Primitive::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    prim: Primitive,
    value: Tensor,
    needs_grad: bool,
}

/// Computation record and parameter registry for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    warnings: Vec<String>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; zeros when `v` is unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.nodes[v.0].value.shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.to_vec(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Gradients keyed by registered parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn push(&mut self, prim: Primitive, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numerical(format!(
                "non-finite output of primitive '{}' (node {})",
                prim.tag(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { prim, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(Primitive::Leaf, t, needs).expect("finite leaf")
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Primitive::Leaf, t, false).expect("finite constant")
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Record a named trainable parameter so its gradient can be collected
    /// by [`Tape::grad_map`].
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Var {
        let v = self.push(Primitive::Leaf, t.clone(), true).expect("finite parameter");
        self.params.push((name.into(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k1, a_vec) = promote_left(ta)?;
        let (k2, n, b_vec) = promote_right(tb)?;
        if k1 != k2 {
            return Err(Error::invalid(format!(
                "matmul inner dimension mismatch: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = mat_mul(ta.data(), tb.data(), m, k1, n);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![1],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Primitive::MatMul { a, b }, Tensor::new(shape, data)?, needs)
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul(a, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, BinOp::Mul)
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, op: BinOp) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match (ta.is_scalar(), tb.is_scalar()) {
            _ if ta.shape() == tb.shape() => {
                let data = ta.data().iter().zip(tb.data()).map(|(x, y)| op.apply(*x, *y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            (true, false) => {
                let s = ta.item();
                let data = tb.data().iter().map(|y| op.apply(s, *y)).collect();
                Tensor::new(tb.shape().to_vec(), data)?
            }
            (false, true) => {
                let s = tb.item();
                let data = ta.data().iter().map(|x| op.apply(*x, s)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            _ => {
                return Err(Error::invalid(format!(
                    "elementwise {} shape mismatch: {:?} vs {:?}",
                    op.tag(),
                    ta.shape(),
                    tb.shape()
                )))
            }
        };
        let needs = self.needs(a) || self.needs(b);
        let prim = match op {
            BinOp::Add => Primitive::Add { a, b },
            BinOp::Sub => Primitive::Sub { a, b },
            BinOp::Mul => Primitive::Mul { a, b },
        };
        self.push(prim, value, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Primitive::Scale { a, c }, value, needs)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_vector() {
                return Err(Error::invalid("concat expects vectors"));
            }
            data.extend_from_slice(t.data());
            needs |= self.needs(p);
        }
        let value = Tensor::vector(data);
        self.push(Primitive::Concat { parts: parts.to_vec(), rows: None }, value, needs)
    }

    /// Stack equal-length vectors into an [n, d] matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("stack_rows of zero parts"));
        }
        let d = self.nodes[parts[0].0].value.len();
        let mut data = Vec::with_capacity(parts.len() * d);
        let mut needs = false;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_vector() || t.len() != d {
                return Err(Error::invalid("stack_rows expects equal-length vectors"));
            }
            data.extend_from_slice(t.data());
            needs |= self.needs(p);
        }
        let value = Tensor::matrix(parts.len(), d, data)?;
        self.push(
            Primitive::Concat { parts: parts.to_vec(), rows: Some(parts.len()) },
            value,
            needs,
        )
    }

    /// Contiguous rows [start, end) of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if !ta.is_matrix() {
            return Err(Error::invalid("slice_rows expects a matrix"));
        }
        let (r, c) = (ta.rows(), ta.cols());
        if start >= end || end > r {
            return Err(Error::invalid(format!("slice_rows range {start}..{end} out of {r} rows")));
        }
        let value = Tensor::matrix(end - start, c, ta.data()[start * c..end * c].to_vec())?;
        let needs = self.needs(a);
        self.push(Primitive::SliceRows { a, start, end }, value, needs)
    }

    /// Arithmetic mean over the rows of an [n, d] matrix.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if !ta.is_matrix() {
            return Err(Error::invalid("row_mean expects a matrix"));
        }
        let (n, d) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (j, o) in out.iter_mut().enumerate() {
                *o += ta.data()[i * d + j];
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let needs = self.needs(a);
        self.push(Primitive::RowMean { a }, Tensor::vector(out), needs)
    }

    /// Stabilized softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if !ta.is_vector() {
            return Err(Error::invalid("softmax expects a vector"));
        }
        let value = Tensor::vector(softmax_slice(ta.data())?);
        let needs = self.needs(a);
        self.push(Primitive::Softmax { a }, value, needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Primitive::Log { a }, value, needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(Primitive::Exp { a }, value, needs)
    }

    /// Cosine similarity of two vectors as a length-1 tensor, clamped to
    /// [-1, 1]. Degenerate (near-zero norm) inputs yield 0, a warning, and a
    /// zero gradient.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
        let cs = cosine_similarity(tu.data(), tv.data())?;
        if cs.degenerate {
            self.warnings.push(format!(
                "degenerate cosine at node {}: near-zero norm, result defined as 0",
                self.nodes.len()
            ));
        }
        let needs = self.needs(u) || self.needs(v);
        self.push(
            Primitive::CosineSim { u, v, degenerate: cs.degenerate },
            Tensor::scalar(cs.value),
            needs,
        )
    }

    /// Row `row` of a matrix as a vector; on a vector, the single element
    /// `row` as a length-1 tensor.
    pub fn gather_row(&mut self, m: Var, row: usize) -> Result<Var> {
        let tm = &self.nodes[m.0].value;
        let value = if tm.is_matrix() {
            let (r, c) = (tm.rows(), tm.cols());
            if row >= r {
                return Err(Error::invalid(format!("gather_row {row} out of {r} rows")));
            }
            Tensor::vector(tm.data()[row * c..(row + 1) * c].to_vec())
        } else if tm.is_vector() {
            if row >= tm.len() {
                return Err(Error::invalid(format!(
                    "gather_row {row} out of vector of length {}",
                    tm.len()
                )));
            }
            Tensor::scalar(tm.data()[row])
        } else {
            return Err(Error::invalid("gather_row expects a matrix or vector"));
        };
        let needs = self.needs(m);
        self.push(Primitive::GatherRow { m, row }, value, needs)
    }

    /// Element of a vector as a scalar node.
    pub fn index(&mut self, v: Var, i: usize) -> Result<Var> {
        self.gather_row(v, i)
    }

    /// Mean cross-entropy of `targets[t]` under logit row t of an [L, V]
    /// matrix (stabilized log-sum-exp). Requires `L >= targets.len() >= 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if !tl.is_matrix() {
            return Err(Error::invalid("cross_entropy expects a logits matrix"));
        }
        if targets.is_empty() {
            return Err(Error::invalid("cross_entropy with empty targets"));
        }
        let (rows, vocab) = (tl.rows(), tl.cols());
        if targets.len() > rows {
            return Err(Error::invalid(format!(
                "cross_entropy: {} targets but only {rows} logit rows",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            if y >= vocab {
                return Err(Error::invalid(format!("target token {y} out of vocabulary {vocab}")));
            }
            let row = tl.row(t);
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let needs = self.needs(logits);
        self.push(Primitive::CrossEntropy { logits, targets: targets.to_vec() }, value, needs)
    }

    /// Fold a nonempty list of same-shape vars with `add`.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::invalid("add_n of zero parts"))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Sum of a vector's entries as a scalar node.
    pub fn sum_vec(&mut self, v: Var) -> Result<Var> {
        let n = self.nodes[v.0].value.len();
        let ones = self.constant(Tensor::vector(vec![1.0; n]));
        self.dot(v, ones)
    }

    /// Reverse pass from a scalar-valued root. Visits each recorded
    /// primitive at most once, in reverse order of recording.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_t = &self.nodes[root.0].value;
        if root_t.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar-valued, got shape {:?}",
                root_t.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every registered parameter, keyed by name. Parameters
    /// the root does not depend on get zero gradients.
    pub fn grad_map(&self, grads: &Gradients) -> GradMap {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), grads.wrt(self, *v)))
            .collect()
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &node.prim {
            Primitive::Leaf => {}
            Primitive::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, _) = promote_left(ta).expect("validated at push");
                let (_, n, _) = promote_right(tb).expect("validated at push");
                // dA = G B^T, dB = A^T G
                let da = mat_mul_nt(g, tb.data(), m, n, k);
                let db = mat_mul_tn(ta.data(), g, m, k, n);
                acc(*a, da);
                acc(*b, db);
            }
            Primitive::Add { a, b } => {
                acc(*a, reduce_to_shape(g, self.nodes[a.0].value.len()));
                acc(*b, reduce_to_shape(g, self.nodes[b.0].value.len()));
            }
            Primitive::Sub { a, b } => {
                acc(*a, reduce_to_shape(g, self.nodes[a.0].value.len()));
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(*b, reduce_to_shape(&neg, self.nodes[b.0].value.len()));
            }
            Primitive::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, mul_backward(g, tb.data(), ta.len()));
                acc(*b, mul_backward(g, ta.data(), tb.len()));
            }
            Primitive::Scale { a, c } => {
                acc(*a, g.iter().map(|x| x * c).collect());
            }
            Primitive::Concat { parts, .. } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Primitive::SliceRows { a, start, end } => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; r * c];
                da[start * c..end * c].copy_from_slice(g);
                acc(*a, da);
            }
            Primitive::RowMean { a } => {
                let ta = &self.nodes[a.0].value;
                let (n, d) = (ta.rows(), ta.cols());
                let mut da = Vec::with_capacity(n * d);
                for _ in 0..n {
                    da.extend(g.iter().map(|x| x / n as f64));
                }
                acc(*a, da);
            }
            Primitive::Softmax { a } => {
                let s = node.value.data();
                let inner: f64 = g.iter().zip(s).map(|(gi, si)| gi * si).sum();
                let da = s.iter().zip(g).map(|(si, gi)| si * (gi - inner)).collect();
                acc(*a, da);
            }
            Primitive::Log { a } => {
                let ta = &self.nodes[a.0].value;
                acc(*a, g.iter().zip(ta.data()).map(|(gi, xi)| gi / xi).collect());
            }
            Primitive::Exp { a } => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
            }
            Primitive::CosineSim { u, v, degenerate } => {
                if *degenerate {
                    return;
                }
                let (tu, tv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
                let nu = tu.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = tv.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                debug_assert!(nu >= COSINE_NORM_EPS && nv >= COSINE_NORM_EPS);
                let c = node.value.item();
                let g0 = g[0];
                let du = tu
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(ui, vi)| g0 * (vi / (nu * nv) - c * ui / (nu * nu)))
                    .collect();
                let dv = tv
                    .data()
                    .iter()
                    .zip(tu.data())
                    .map(|(vi, ui)| g0 * (ui / (nu * nv) - c * vi / (nv * nv)))
                    .collect();
                acc(*u, du);
                acc(*v, dv);
            }
            Primitive::GatherRow { m, row } => {
                let tm = &self.nodes[m.0].value;
                let mut dm = vec![0.0; tm.len()];
                let width = if tm.is_matrix() { tm.cols() } else { 1 };
                dm[row * width..row * width + width].copy_from_slice(g);
                acc(*m, dm);
            }
            Primitive::CrossEntropy { logits, targets } => {
                let tl = &self.nodes[logits.0].value;
                let (rows, vocab) = (tl.rows(), tl.cols());
                let mut dl = vec![0.0; rows * vocab];
                let scale = g[0] / targets.len() as f64;
                for (t, &y) in targets.iter().enumerate() {
                    let row = tl.row(t);
                    let probs = softmax_slice(row).expect("nonempty row");
                    for (j, p) in probs.iter().enumerate() {
                        dl[t * vocab + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        }
    }
}

/// (rows, inner, was_vector) for the left matmul operand.
fn promote_left(t: &Tensor) -> Result<(usize, usize, bool)> {
    if t.is_matrix() {
        Ok((t.rows(), t.cols(), false))
    } else if t.is_vector() {
        Ok((1, t.len(), true))
    } else {
        Err(Error::invalid("matmul operand must be 1-D or 2-D"))
    }
}

/// (inner, cols, was_vector) for the right matmul operand.
fn promote_right(t: &Tensor) -> Result<(usize, usize, bool)> {
    if t.is_matrix() {
        Ok((t.rows(), t.cols(), false))
    } else if t.is_vector() {
        Ok((t.len(), 1, true))
    } else {
        Err(Error::invalid("matmul operand must be 1-D or 2-D"))
    }
}

/// C[m,n] = A[m,k] B[k,n]
fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = G[m,n] B[k,n]^T
fn mat_mul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[k,n] = A[m,k]^T G[m,n]
fn mat_mul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

/// Reduce an output gradient onto an operand that may have been a broadcast
/// scalar: sum when the operand holds one element, pass through otherwise.
fn reduce_to_shape(g: &[f64], operand_len: usize) -> Vec<f64> {
    if operand_len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g.to_vec()
    }
}

/// d(a*b)/da given the other operand's data; handles scalar broadcast.
fn mul_backward(g: &[f64], other: &[f64], operand_len: usize) -> Vec<f64> {
    if operand_len == 1 && g.len() != 1 {
        // scalar operand: sum g .* other
        vec![g.iter().zip(other).map(|(x, y)| x * y).sum()]
    } else if other.len() == 1 {
        // other side is the scalar
        let s = other[0];
        g.iter().map(|x| x * s).collect()
    } else {
        g.iter().zip(other).map(|(x, y)| x * y).collect()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecvar(tape: &mut Tape, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::vector(data).with_grad())
    }

    #[test]
    fn elementwise_square_gradient() {
        // f(x) = sum(x .* x) at x = [1, 2] has gradient [2, 4].
        let mut tape = Tape::new();
        let x = vecvar(&mut tape, vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_vec(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_sum_is_constant() {
        // f(x) = sum(softmax(x)) is constant 1, so the gradient vanishes.
        let mut tape = Tape::new();
        let x = vecvar(&mut tape, vec![0.3, -1.2, 2.0]);
        let s = tape.softmax(x).unwrap();
        let loss = tape.sum_vec(s).unwrap();
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        for g in grads.wrt(&tape, x).data() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // gradient of x + x is 2, not 1.
        let mut tape = Tape::new();
        let x = vecvar(&mut tape, vec![3.0]);
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(&tape, x).data(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = vecvar(&mut tape, vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = Tensor::vector(vec![2.0]).with_grad();
        let unused = Tensor::vector(vec![5.0, 6.0]).with_grad();
        let a = tape.param("used", &used);
        let _b = tape.param("unused", &unused);
        let loss = tape.mul(a, a).unwrap();
        let grads = tape.backward(loss).unwrap();
        let map = tape.grad_map(&grads);
        assert_eq!(map["used"].data(), &[4.0]);
        assert_eq!(map["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shapes_and_values() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap());
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.matmul(w, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2]);
        assert_eq!(tape.value(y).data(), &[7.0, -1.0]);

        // row-vector times matrix
        let v = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let z = tape.matmul(v, w).unwrap();
        assert_eq!(tape.value(z).shape(), &[3]);
        assert_eq!(tape.value(z).data(), &[1.0, -1.0, 3.0]);

        // dot product
        let d = tape.dot(x, x).unwrap();
        assert_eq!(tape.value(d).shape(), &[1]);
        assert_eq!(tape.value(d).item(), 14.0);
    }

    #[test]
    fn matmul_inner_mismatch_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.matmul(w, x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::matrix(2, 8, vec![0.0; 16]).unwrap());
        let loss = tape.cross_entropy(logits, &[3, 5]).unwrap();
        assert!((tape.value(loss).item() - (8.0f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        assert!(tape.cross_entropy(logits, &[]).is_err());
        assert!(tape.cross_entropy(logits, &[4]).is_err());
        assert!(tape.cross_entropy(logits, &[0, 1]).is_err());
    }

    #[test]
    fn degenerate_cosine_warns_and_zeroes_gradient() {
        let mut tape = Tape::new();
        let z = vecvar(&mut tape, vec![0.0, 0.0]);
        let v = vecvar(&mut tape, vec![1.0, 1.0]);
        let c = tape.cosine_sim(z, v).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        assert_eq!(tape.warnings().len(), 1);
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.wrt(&tape, v).data(), &[0.0, 0.0]);
    }

    #[test]
    fn slice_and_gather_round_trip() {
        let mut tape = Tape::new();
        let m = tape.leaf(
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().with_grad(),
        );
        let s = tape.slice_rows(m, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.gather_row(m, 0).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0]);

        let sm = tape.row_mean(s).unwrap();
        let total = tape.sum_vec(sm).unwrap();
        let grads = tape.backward(total).unwrap();
        // each of rows 1..3 contributes 1/2 per element
        assert_eq!(grads.wrt(&tape, m).data(), &[0.0, 0.0, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut tape = Tape::new();
        let s = vecvar(&mut tape, vec![3.0]);
        let v = vecvar(&mut tape, vec![1.0, 2.0, 4.0]);
        let y = tape.mul(s, v).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 12.0]);
        let loss = tape.sum_vec(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, s).data(), &[7.0]);
        assert_eq!(grads.wrt(&tape, v).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn non_finite_forward_is_a_numerical_error() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![-1.0]));
        assert!(matches!(tape.log(v), Err(Error::Numerical(_))));
    }
}

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::{ParameterStore, Shape, Tensor};
use crate::math;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch normalisation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode<'a> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with the given running `(mean, var)`.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-feature statistics of a training-mode batch norm, for updating the
/// running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    MaskedSoftmax(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { x: Var, scale: Vec<f64> },
    BlockMatMulT { a: Var, b: Var, block: usize },
    BlockMatMul { a: Var, v: Var, block: usize },
    HeadScores { q: Var, k: Var, heads: usize },
    HeadMix { a: Var, v: Var, heads: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves that are not store parameters.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

pub const BATCHNORM_EPS: f64 = 1e-7;

fn shape_err(op: &'static str, lhs: Shape, rhs: Shape) -> Error {
    Error::Shape { op, lhs, rhs }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.0 * shape.1, value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape, n.value.clone()).expect("node shape")
    }

    /// Leaf holding a constant (no gradient).
    pub fn constant(&mut self, shape: Shape, values: Vec<f64>) -> Result<Var> {
        if shape.0 * shape.1 != values.len() {
            return Err(Error::Argument(format!("{} values for shape {shape:?}", values.len())));
        }
        Ok(self.push(shape, values, Op::Leaf { param: None }, false))
    }

    /// Constant copy of a tensor's values.
    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape, t.values.clone(), Op::Leaf { param: None }, false)
    }

    /// Leaf from a tensor; gradients reach it if `requires_grad` is set and
    /// are read back with [`Graph::grad`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape, t.values.clone(), Op::Leaf { param: None }, t.requires_grad)
    }

    /// Leaf bound to a store parameter; [`Graph::backward`] accumulates into
    /// the store.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        Ok(self.push(
            t.shape,
            t.values.clone(),
            Op::Leaf {
                param: Some(name.into()),
            },
            true,
        ))
    }

    /// Accumulated gradient of a non-parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.node(a).value, &self.node(b).value, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push((m, n), out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`; with `b` an `out x in` weight this is a bias-free linear map.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul_t", (m, k), (n, k2)));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push((m, n), out, Op::MatMulT(a, b), rg))
    }

    /// `x · wᵀ + b` with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(sa)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, tag: Op) -> Result<Var> {
        let shape = self.same_shape(op, a, b)?;
        let out = self.node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, tag, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Argument("add_n of nothing".into()))?;
        let shape = self.shape(first);
        let mut out = vec![0.0; shape.0 * shape.1];
        for &x in xs {
            if self.shape(x) != shape {
                return Err(shape_err("add_n", shape, self.shape(x)));
            }
            out.iter_mut().zip(&self.node(x).value).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(xs);
        Ok(self.push(shape, out, Op::AddN(xs.to_vec()), rg))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), rs) = (self.shape(a), self.shape(row));
        if rs != (1, n) {
            return Err(shape_err("add_row", (m, n), rs));
        }
        let r = &self.node(row).value;
        let out = self.node(a)
            .value
            .chunks(n)
            .flat_map(|ar| ar.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push((m, n), out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), rs) = (self.shape(a), self.shape(row));
        if rs != (1, n) {
            return Err(shape_err("mul_row", (m, n), rs));
        }
        let r = &self.node(row).value;
        let out = self.node(a)
            .value
            .chunks(n)
            .flat_map(|ar| ar.iter().zip(r).map(|(x, y)| x * y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push((m, n), out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(a);
        let (shape, rg) = (n.shape, n.requires_grad);
        let out = n.value.iter().map(|x| f(*x)).collect();
        self.push(shape, out, op, rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, math::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, math::cos, Op::Cos(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, math::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, math::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, math::ln, Op::Log(a))
    }

    // ---- reductions and reshaping ----------------------------------------

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let v = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push((1, 1), vec![v], Op::Mean(a), rg)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let v = n.value.iter().sum::<f64>();
        let rg = n.requires_grad;
        self.push((1, 1), vec![v], Op::Sum(a), rg)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let (r, c) = n.shape;
        let mut out = vec![0.0; c];
        for row in n.value.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = n.requires_grad;
        self.push((1, c), out, Op::MeanRows(a), rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.shape(*xs.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?).0;
        let mut cols = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.0 != rows {
                return Err(shape_err("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                let n = self.node(x);
                let c = n.shape.1;
                out.extend_from_slice(&n.value[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push((rows, cols), out, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.shape(*xs.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.1 != cols {
                return Err(shape_err("concat_rows", (rows, cols), s));
            }
            rows += s.0;
            out.extend_from_slice(&self.node(x).value);
        }
        let rg = self.rg(xs);
        Ok(self.push((rows, cols), out, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", (r, c), (start, len)));
        }
        let v = &self.node(x).value;
        let out = (0..r)
            .flat_map(|i| v[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push((r, len), out, Op::SliceCols { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", (r, c), (bad, c)));
        }
        let v = &self.node(x).value;
        let out = idx
            .iter()
            .flat_map(|&i| v[i * c..(i + 1) * c].iter().copied())
            .collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            (idx.len(), c),
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let s = self.shape(x);
        if s.0 * s.1 != shape.0 * shape.1 {
            return Err(shape_err("reshape", s, shape));
        }
        let n = self.node(x);
        let (v, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape, v, Op::Reshape(x), rg))
    }

    // ---- attention pieces --------------------------------------------------

    /// Row-wise softmax; entries with `mask[i] == true` are treated as `-∞`
    /// and receive probability 0. `mask` is either the full `r x c` layout or
    /// a single `c`-vector shared by all rows.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(m) = mask {
            if m.len() != r * c && m.len() != c {
                return Err(shape_err("masked_softmax", (r, c), (1, m.len())));
            }
        }
        let masked = |i: usize, j: usize| match mask {
            None => false,
            Some(m) if m.len() == c => m[j],
            Some(m) => m[i * c + j],
        };
        let v = &self.node(x).value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, &u) in row.iter().enumerate() {
                if !masked(i, j) && u > max {
                    max = u;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {i} has no finite entry")));
            }
            let mut total = 0.0;
            for (j, &u) in row.iter().enumerate() {
                if !masked(i, j) {
                    let e = math::exp(u - max);
                    out[i * c + j] = e;
                    total += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= total);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push((r, c), out, Op::MaskedSoftmax(x), rg))
    }

    /// Block-diagonal `a · bᵀ`: rows are grouped in consecutive blocks of
    /// `block`; output row `(g, i)` column `j` is `a[g,i] · b[g,j]`.
    pub fn block_matmul_t(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let ((ra, k), (rb, kb)) = (self.shape(a), self.shape(b));
        if ra != rb || k != kb || block == 0 || ra % block != 0 {
            return Err(shape_err("block_matmul_t", (ra, k), (rb, kb)));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; ra * block];
        for g in 0..ra / block {
            for i in 0..block {
                let row = g * block + i;
                let ar = &av[row * k..(row + 1) * k];
                for j in 0..block {
                    let col = g * block + j;
                    out[row * block + j] = dot(ar, &bv[col * k..(col + 1) * k]);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push((ra, block), out, Op::BlockMatMulT { a, b, block }, rg))
    }

    /// Block-diagonal `a · v` with `a` laid out as from [`Graph::block_matmul_t`].
    pub fn block_matmul(&mut self, a: Var, v: Var, block: usize) -> Result<Var> {
        let ((ra, ca), (rv, d)) = (self.shape(a), self.shape(v));
        if ca != block || ra != rv || block == 0 || ra % block != 0 {
            return Err(shape_err("block_matmul", (ra, ca), (rv, d)));
        }
        let (aval, vval) = (&self.node(a).value, &self.node(v).value);
        let mut out = vec![0.0; ra * d];
        for g in 0..ra / block {
            for i in 0..block {
                let row = g * block + i;
                let o = &mut out[row * d..(row + 1) * d];
                for j in 0..block {
                    let w = aval[row * block + j];
                    let vr = &vval[(g * block + j) * d..(g * block + j + 1) * d];
                    o.iter_mut().zip(vr).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push((ra, d), out, Op::BlockMatMul { a, v, block }, rg))
    }

    /// Per-head scores of a single query against `n` keys. `q` is
    /// `1 x (heads·d)`, `k` is `n x (heads·d)`; output is `heads x n` with
    /// entry `(m, j) = q_m · k_{j,m}`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let ((rq, cq), (n, ck)) = (self.shape(q), self.shape(k));
        if rq != 1 || cq != ck || heads == 0 || cq % heads != 0 {
            return Err(shape_err("head_scores", (rq, cq), (n, ck)));
        }
        let d = cq / heads;
        let (qv, kv) = (&self.node(q).value, &self.node(k).value);
        let mut out = vec![0.0; heads * n];
        for m in 0..heads {
            for j in 0..n {
                out[m * n + j] = dot(&qv[m * d..(m + 1) * d], &kv[j * cq + m * d..j * cq + (m + 1) * d]);
            }
        }
        let rg = self.rg(&[q, k]);
        Ok(self.push((heads, n), out, Op::HeadScores { q, k, heads }, rg))
    }

    /// Per-head weighted sums: `a` is `heads x n`, `v` is `n x (heads·d)`;
    /// output `1 x (heads·d)` with block `m` equal to `Σ_j a[m,j] v_{j,m}`.
    pub fn head_mix(&mut self, a: Var, v: Var, heads: usize) -> Result<Var> {
        let ((ra, n), (rv, cv)) = (self.shape(a), self.shape(v));
        if ra != heads || rv != n || heads == 0 || cv % heads != 0 {
            return Err(shape_err("head_mix", (ra, n), (rv, cv)));
        }
        let d = cv / heads;
        let (av, vv) = (&self.node(a).value, &self.node(v).value);
        let mut out = vec![0.0; cv];
        for m in 0..heads {
            for j in 0..n {
                let w = av[m * n + j];
                out[m * d..(m + 1) * d]
                    .iter_mut()
                    .zip(&vv[j * cv + m * d..j * cv + (m + 1) * d])
                    .for_each(|(o, x)| *o += w * x);
            }
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push((1, cv), out, Op::HeadMix { a, v, heads }, rg))
    }

    // ---- normalisation and regularisation --------------------------------

    /// Per-column batch normalisation over all rows with learnable `1 x c`
    /// scale `gamma` and shift `beta`. In training mode the batch
    /// statistics are returned for running-average updates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(shape_err("batchnorm", (r, c), self.shape(p)));
            }
        }
        let xv = &self.node(x).value;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if r < 2 {
                    return Err(Error::Argument("training batch norm needs at least 2 rows".into()));
                }
                let mut mean = vec![0.0; c];
                for row in xv.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                let mut var = vec![0.0; c];
                for row in xv.chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbiased = var.iter().map(|v| v / (r - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= r as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batchnorm running stats", (1, c), (mean.len(), var.len())));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BATCHNORM_EPS)).collect();
        let (g, b) = (&self.node(gamma).value, &self.node(beta).value);
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let train = stats.is_some();
        let v = self.push(
            (r, c),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.node(x);
        let scale: Vec<f64> = (0..n.value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = n.value.iter().zip(&scale).map(|(v, s)| v * s).collect();
        let (shape, rg) = (n.shape, n.requires_grad);
        Ok(self.push(shape, out, Op::Dropout { x, scale }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a `1 x 1` loss. Gradients of store parameters are
    /// added to `store`; gradients of other leaves accumulate on the graph.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { param } = &node.op {
                match param {
                    Some(name) => {
                        let t = store.get_mut(name)?;
                        t.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    None => match &mut self.leaf_grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    },
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // accumulate into the adjoint of `v` if it needs one
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        let (r, c) = node.shape;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let k = nodes[a.0].shape.1;
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &mut |da| {
                    let bv = val(*b);
                    for i in 0..r {
                        for p in 0..k {
                            da[i * k + p] += dot(&g[i * c..(i + 1) * c], &bv[p * c..(p + 1) * c]);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    let av = val(*a);
                    for i in 0..r {
                        for p in 0..k {
                            let w = av[i * k + p];
                            if w != 0.0 {
                                db[p * c..(p + 1) * c]
                                    .iter_mut()
                                    .zip(&g[i * c..(i + 1) * c])
                                    .for_each(|(d, x)| *d += w * x);
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let k = nodes[a.0].shape.1;
                // y = A Bᵀ: dA = G B, dB = Gᵀ A
                acc(*a, &mut |da| {
                    matmul_into(g, val(*b), da, r, c, k);
                });
                acc(*b, &mut |db| {
                    let av = val(*a);
                    for i in 0..r {
                        for j in 0..c {
                            let w = g[i * c + j];
                            if w != 0.0 {
                                db[j * k..(j + 1) * k]
                                    .iter_mut()
                                    .zip(&av[i * k..(i + 1) * k])
                                    .for_each(|(d, x)| *d += w * x);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddN(xs) => {
                for x in xs {
                    acc(*x, &mut |d| add_into(d, g));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for gr in g.chunks(c) {
                        add_into(d, gr);
                    }
                });
            }
            Op::MulRow(a, row) => {
                acc(*a, &mut |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(val(*row)) {
                            *d += g * y;
                        }
                    }
                });
                acc(*row, &mut |d| {
                    for (gr, ar) in g.chunks(c).zip(val(*a).chunks(c)) {
                        for ((d, g), x) in d.iter_mut().zip(gr).zip(ar) {
                            *d += g * x;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::Sin(a) => acc(*a, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += g * math::cos(*x);
                }
            }),
            Op::Cos(a) => acc(*a, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d -= g * math::sin(*x);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => acc(*a, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::Exp(a) => acc(*a, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *d += g * y;
                }
            }),
            Op::Log(a) => acc(*a, &mut |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += g / x;
                }
            }),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanRows(a) => {
                let rows = nodes[a.0].shape.0 as f64;
                acc(*a, &mut |d| {
                    for dr in d.chunks_mut(c) {
                        dr.iter_mut().zip(g).for_each(|(d, g)| *d += g / rows);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for x in xs {
                    let w = nodes[x.0].shape.1;
                    acc(*x, &mut |d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * c + offset..i * c + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = nodes[x.0].value.len();
                    acc(*x, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let w = nodes[x.0].shape.1;
                acc(*x, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * w + start..i * w + start + c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::GatherRows { x, idx } => acc(*x, &mut |d| {
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::MaskedSoftmax(x) => acc(*x, &mut |d| {
                let p = &node.value;
                for i in 0..r {
                    let pr = &p[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s = dot(pr, gr);
                    for j in 0..c {
                        d[i * c + j] += pr[j] * (gr[j] - s);
                    }
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let gam = val(*gamma);
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(c) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    if *train {
                        let n = r as f64;
                        let mut sum_dh = vec![0.0; c];
                        let mut sum_dh_h = vec![0.0; c];
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let dh = gr[j] * gam[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * hr[j];
                            }
                        }
                        for i in 0..r {
                            for j in 0..c {
                                let dh = g[i * c + j] * gam[j];
                                d[i * c + j] += inv_std[j] / n
                                    * (n * dh - sum_dh[j] - xhat[i * c + j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[i * c + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, scale } => acc(*x, &mut |d| {
                for ((d, g), s) in d.iter_mut().zip(g).zip(scale) {
                    *d += g * s;
                }
            }),
            Op::BlockMatMulT { a, b, block } => {
                let k = nodes[a.0].shape.1;
                let block = *block;
                let groups = r / block;
                acc(*a, &mut |da| {
                    let bv = val(*b);
                    for gi in 0..groups {
                        for i in 0..block {
                            let row = gi * block + i;
                            for j in 0..block {
                                let w = g[row * block + j];
                                let col = gi * block + j;
                                da[row * k..(row + 1) * k]
                                    .iter_mut()
                                    .zip(&bv[col * k..(col + 1) * k])
                                    .for_each(|(d, x)| *d += w * x);
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    let av = val(*a);
                    for gi in 0..groups {
                        for i in 0..block {
                            let row = gi * block + i;
                            for j in 0..block {
                                let w = g[row * block + j];
                                let col = gi * block + j;
                                db[col * k..(col + 1) * k]
                                    .iter_mut()
                                    .zip(&av[row * k..(row + 1) * k])
                                    .for_each(|(d, x)| *d += w * x);
                            }
                        }
                    }
                });
            }
            Op::BlockMatMul { a, v, block } => {
                let block = *block;
                let groups = r / block;
                let d_out = c;
                acc(*a, &mut |da| {
                    let vv = val(*v);
                    for gi in 0..groups {
                        for i in 0..block {
                            let row = gi * block + i;
                            for j in 0..block {
                                let vr = gi * block + j;
                                da[row * block + j] +=
                                    dot(&g[row * d_out..(row + 1) * d_out], &vv[vr * d_out..(vr + 1) * d_out]);
                            }
                        }
                    }
                });
                acc(*v, &mut |dv| {
                    let av = val(*a);
                    for gi in 0..groups {
                        for i in 0..block {
                            let row = gi * block + i;
                            for j in 0..block {
                                let w = av[row * block + j];
                                let vr = gi * block + j;
                                dv[vr * d_out..(vr + 1) * d_out]
                                    .iter_mut()
                                    .zip(&g[row * d_out..(row + 1) * d_out])
                                    .for_each(|(d, x)| *d += w * x);
                            }
                        }
                    }
                });
            }
            Op::HeadScores { q, k, heads } => {
                let (n, cq) = nodes[k.0].shape;
                let d = cq / heads;
                acc(*q, &mut |dq| {
                    let kv = val(*k);
                    for m in 0..*heads {
                        for j in 0..n {
                            let w = g[m * n + j];
                            dq[m * d..(m + 1) * d]
                                .iter_mut()
                                .zip(&kv[j * cq + m * d..j * cq + (m + 1) * d])
                                .for_each(|(o, x)| *o += w * x);
                        }
                    }
                });
                acc(*k, &mut |dk| {
                    let qv = val(*q);
                    for m in 0..*heads {
                        for j in 0..n {
                            let w = g[m * n + j];
                            dk[j * cq + m * d..j * cq + (m + 1) * d]
                                .iter_mut()
                                .zip(&qv[m * d..(m + 1) * d])
                                .for_each(|(o, x)| *o += w * x);
                        }
                    }
                });
            }
            Op::HeadMix { a, v, heads } => {
                let (n, cv) = nodes[v.0].shape;
                let d = cv / heads;
                acc(*a, &mut |da| {
                    let vv = val(*v);
                    for m in 0..*heads {
                        for j in 0..n {
                            da[m * n + j] += dot(&g[m * d..(m + 1) * d], &vv[j * cv + m * d..j * cv + (m + 1) * d]);
                        }
                    }
                });
                acc(*v, &mut |dv| {
                    let av = val(*a);
                    for m in 0..*heads {
                        for j in 0..n {
                            let w = av[m * n + j];
                            dv[j * cv + m * d..j * cv + (m + 1) * d]
                                .iter_mut()
                                .zip(&g[m * d..(m + 1) * d])
                                .for_each(|(o, x)| *o += w * x);
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

/// `out += a (m x k) · b (k x n)`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let w = a[i * k + p];
            if w != 0.0 {
                o.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, x)| *o += w * x);
            }
        }
    }
}

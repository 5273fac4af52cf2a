//! Reverse-mode differentiation over a recorded graph of tensor ops.
//!
//! Every op evaluates eagerly and appends a node holding its value and
//! whatever the backward rule needs. [`Graph::backward`] walks the nodes in
//! reverse and accumulates cotangents. Only the ops the model's loss uses
//! exist here. Values are rank-2; vectors are `[1, n]` rows and scalars
//! `[1, 1]`.

use crate::error::{Error, Result};

use super::functions::{normalized_exp, PROB_FLOOR};
use super::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Distance used by [`Graph::neg_distance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    Euclid,
    Manhattan,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Softplus(Var),
    Recip(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        inv_norms: Vec<T>,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Vec<Var>),
    GroupedLse {
        x: Var,
        scale: Var,
        groups: Vec<Option<usize>>,
        weights: Vec<T>,
    },
    NegDistance {
        a: Var,
        b: Var,
        kind: DistanceKind,
    },
    CrossEntropyRows {
        p: Var,
        targets: Vec<usize>,
    },
    MseConst {
        x: Var,
        target: Tensor<T>,
    },
    KlConst {
        q: Var,
        p: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Cotangents produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// The cotangent of `v`, zeros if nothing flowed into it.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

fn softplus<T: Real>(x: T) -> T {
    // ln(1 + e^x) without overflow.
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `c[m,n] += a[m,k] · b[k,n]`; each output sums over `k` in ascending order.
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn shape2(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat<T: Real>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::matrix(rows, cols, data).expect("kernel output matches its shape")
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        let value = if value.rank() == 2 {
            value
        } else {
            let (r, c) = shape2(&value);
            value.reshape(vec![r, c]).expect("same element count")
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        shape2(&self.nodes[v.0].value)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn expect_scalar(&self, v: Var, what: &str) -> Result<()> {
        if self.dims(v) != (1, 1) {
            return Err(Error::contract(format!(
                "{what} expects a [1, 1] scalar, got {:?}",
                self.dims(v)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul of [{m}, {k}] by [{k2}, {n}]"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul_bt of [{m}, {k}] by [{n}, {k2}]ᵀ"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(mat(m, n, out), Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::contract(format!(
                "add of {:?} and {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let (r, c) = self.dims(a);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(mat(r, c, out), Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::contract(format!(
                "add_row of {:?} to [{r}, {c}]",
                self.dims(row)
            )));
        }
        let bias = self.data(row);
        let out = self
            .data(a)
            .chunks(c.max(1))
            .flat_map(|xs| xs.iter().zip(bias).map(|(&x, &b)| x + b))
            .collect();
        Ok(self.push(mat(r, c, out), Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Multiplies every entry of `a` by the `[1, 1]` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar(s, "mul_scalar")?;
        let sv = self.scalar(s);
        let value = self.nodes[a.0].value.map(|x| x * sv);
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| T::one() / x);
        self.push(value, Op::Recip(a), &[a])
    }

    /// `max(x, 0)`, with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| gelu_parts(x).0);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax. `-inf` entries get probability 0; a row of only
    /// `-inf` is a contract violation, NaN or `+inf` a numerical failure.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(a).chunks(c.max(1)) {
            let probs = normalized_exp(row)?
                .ok_or_else(|| Error::contract("softmax over a fully masked row"))?;
            out.extend(probs);
        }
        Ok(self.push(mat(r, c, out), Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row layer normalization with `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::contract("layer_norm gain/bias must be [1, cols]"));
        }
        let n = T::of(c as f64);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = Vec::with_capacity(r * c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.data(x).chunks(c) {
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            mat(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales every row to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = Vec::with_capacity(r * c);
        let mut inv_norms = Vec::with_capacity(r);
        let mut zero_rows = 0usize;
        for row in self.data(x).chunks(c.max(1)) {
            let mut sq = T::zero();
            for &v in row {
                sq = sq + v * v;
            }
            let inv = if sq > T::zero() {
                T::one() / sq.sqrt()
            } else {
                zero_rows += 1;
                T::zero()
            };
            inv_norms.push(inv);
            out.extend(row.iter().map(|&v| v * inv));
        }
        if zero_rows > 0 {
            log::warn!("{zero_rows} zero-norm rows in cosine normalization, similarity set to 0");
        }
        self.push(mat(r, c, out), Op::NormalizeRows { x, inv_norms }, &[x])
    }

    /// Rectangular sub-block `[row0 .. row0+rows, col0 .. col0+cols]`.
    pub fn slice(
        &mut self,
        x: Var,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Var> {
        let (r, c) = self.dims(x);
        if row0 + rows > r || col0 + cols > c {
            return Err(Error::contract(format!(
                "slice [{row0}+{rows}, {col0}+{cols}] out of [{r}, {c}]"
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&src[i * c + col0..i * c + col0 + cols]);
        }
        Ok(self.push(mat(rows, cols, out), Op::Slice { x, row0, col0 }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("gather row {bad} of {r}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let n = rows.len();
        Ok(self.push(mat(n, c, out), Op::GatherRows { x, rows }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&v| self.dims(v).1)
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::contract("concat_rows with unequal widths"));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        Ok(self.push(mat(rows, c, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&v| self.dims(v).0)
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::contract("concat_cols with unequal heights"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(mat(r, total, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column means, `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r == 0 {
            return Err(Error::contract("mean over zero rows"));
        }
        let mut out = vec![T::zero(); c];
        for row in self.data(x).chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        for o in &mut out {
            *o = *o * inv;
        }
        Ok(self.push(mat(1, c, out), Op::MeanRows(x), &[x]))
    }

    /// Sum of `[1, 1]` scalars.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &t in terms {
            self.expect_scalar(t, "sum")?;
            total = total + self.scalar(t);
        }
        Ok(self.push(Tensor::scalar(total), Op::Sum(terms.to_vec()), terms))
    }

    /// Grouped LogSumExp of `x · s`.
    ///
    /// `groups[e]` names the output cell (flat index into `out_shape`) that
    /// entry `e` of `x` pools into, or `None` for a masked entry, which
    /// contributes `exp(-inf) = 0`. Cells with no live entries are `-inf`.
    pub fn grouped_lse(
        &mut self,
        x: Var,
        s: Var,
        groups: Vec<Option<usize>>,
        out_shape: (usize, usize),
    ) -> Result<Var> {
        self.expect_scalar(s, "grouped_lse scale")?;
        let xs = self.data(x);
        if groups.len() != xs.len() {
            return Err(Error::contract("grouped_lse needs one group per entry"));
        }
        let cells = out_shape.0 * out_shape.1;
        if groups.iter().flatten().any(|&g| g >= cells) {
            return Err(Error::contract("grouped_lse group index out of range"));
        }
        let sv = self.scalar(s);
        let mut max = vec![T::neg_infinity(); cells];
        for (&v, g) in xs.iter().zip(&groups) {
            if let Some(g) = *g {
                max[g] = max[g].max(v * sv);
            }
        }
        let mut sum = vec![T::zero(); cells];
        for (&v, g) in xs.iter().zip(&groups) {
            if let Some(g) = *g {
                sum[g] = sum[g] + (v * sv - max[g]).exp();
            }
        }
        let out: Vec<T> = max
            .iter()
            .zip(&sum)
            .map(|(&m, &z)| if m == T::neg_infinity() { m } else { m + z.ln() })
            .collect();
        let weights = xs
            .iter()
            .zip(&groups)
            .map(|(&v, g)| match *g {
                Some(g) if out[g] != T::neg_infinity() => (v * sv - out[g]).exp(),
                _ => T::zero(),
            })
            .collect();
        Ok(self.push(
            mat(out_shape.0, out_shape.1, out),
            Op::GroupedLse {
                x,
                scale: s,
                groups,
                weights,
            },
            &[x, s],
        ))
    }

    /// `out[q, n] = -dist(b[q], a[n])` for `a: [N, D]`, `b: [Q, D]`.
    pub fn neg_distance(&mut self, a: Var, b: Var, kind: DistanceKind) -> Result<Var> {
        let (n, d) = self.dims(a);
        let (q, d2) = self.dims(b);
        if d != d2 {
            return Err(Error::contract("neg_distance with unequal widths"));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(q * n);
        for qi in 0..q {
            let brow = &bd[qi * d..(qi + 1) * d];
            for ni in 0..n {
                let arow = &ad[ni * d..(ni + 1) * d];
                let mut acc = T::zero();
                for (&x, &y) in brow.iter().zip(arow) {
                    acc = acc
                        + match kind {
                            DistanceKind::Euclid => (x - y) * (x - y),
                            DistanceKind::Manhattan => (x - y).abs(),
                        };
                }
                out.push(match kind {
                    DistanceKind::Euclid => -acc.sqrt(),
                    DistanceKind::Manhattan => -acc,
                });
            }
        }
        Ok(self.push(mat(q, n, out), Op::NegDistance { a, b, kind }, &[a, b]))
    }

    /// Mean over rows of `-ln(max(p[row, target], 1e-12))`.
    pub fn cross_entropy_rows(&mut self, p: Var, targets: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(p);
        if targets.len() != r || r == 0 {
            return Err(Error::contract(format!(
                "cross_entropy_rows with {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let floor = T::of(PROB_FLOOR);
        let pd = self.data(p);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            total = total - pd[i * c + t].max(floor).ln();
        }
        let value = Tensor::scalar(total / T::of(r as f64));
        Ok(self.push(value, Op::CrossEntropyRows { p, targets }, &[p]))
    }

    /// Mean squared difference between `x` and a constant target.
    pub fn mse_const(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let xs = self.data(x);
        if xs.len() != target.numel() || xs.is_empty() {
            return Err(Error::contract("mse_const shape mismatch"));
        }
        let mut total = T::zero();
        for (&a, &b) in xs.iter().zip(target.data()) {
            total = total + (a - b) * (a - b);
        }
        let value = Tensor::scalar(total / T::of(xs.len() as f64));
        Ok(self.push(value, Op::MseConst { x, target }, &[x]))
    }

    /// Mean over rows of `KL(p ‖ q)` for a constant `p`.
    pub fn kl_const(&mut self, q: Var, p: Tensor<T>) -> Result<Var> {
        let (r, c) = self.dims(q);
        if (p.rows(), p.cols()) != (r, c) || r == 0 {
            return Err(Error::contract("kl_const shape mismatch"));
        }
        let floor = T::of(PROB_FLOOR);
        let mut total = T::zero();
        for (&qv, &pv) in self.data(q).iter().zip(p.data()) {
            if pv > T::zero() {
                total = total + pv * (pv.max(floor).ln() - qv.max(floor).ln());
            }
        }
        let value = Tensor::scalar(total / T::of(r as f64));
        Ok(self.push(value, Op::KlConst { q, p }, &[q]))
    }

    /// Cotangents of the `[1, 1]` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.expect_scalar(loss, "backward")?;
        if !self.scalar(loss).is_finite() {
            return Err(Error::non_finite("loss"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(T::one(), &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Adds `f(i)` into row-major positions of `v` through a closure, creating
    /// the cotangent buffer on first touch.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        f(slot.data_mut());
    }

    fn backprop(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate_with(grads, *a, |da| gemm_nt(gd, bd, da, m, n, k));
                self.accumulate_with(grads, *b, |db| gemm_tn(ad, gd, db, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate_with(grads, *a, |da| gemm_nn(gd, bd, da, m, n, k));
                self.accumulate_with(grads, *b, |db| gemm_tn(gd, ad, db, m, n, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let c = y.cols();
                self.accumulate_with(grads, *row, |dr| {
                    for grow in gd.chunks(c.max(1)) {
                        for (d, &v) in dr.iter_mut().zip(grow) {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar(*s);
                self.accumulate(grads, *a, g.map(|v| v * sv));
                let mut ds = T::zero();
                for (&gv, &av) in gd.iter().zip(self.data(*a)) {
                    ds = ds + gv * av;
                }
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::Softplus(a) => {
                self.elementwise(grads, *a, gd, |x, _| sigmoid(x));
            }
            Op::Recip(a) => {
                self.elementwise(grads, *a, gd, |x, _| -T::one() / (x * x));
            }
            Op::Relu(a) => {
                self.elementwise(grads, *a, gd, |x, _| {
                    if x > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Gelu(a) => {
                self.elementwise(grads, *a, gd, |x, _| gelu_parts(x).1);
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                self.accumulate_with(grads, *a, |da| {
                    for ((drow, yrow), grow) in da
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gd.chunks(c))
                    {
                        let mut dot = T::zero();
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot = dot + yv * gv;
                        }
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = y.cols();
                let gainv = self.data(*gain);
                let n = T::of(c as f64);
                self.accumulate_with(grads, *x, |dx| {
                    for (r, ((drow, hrow), grow)) in dx
                        .chunks_mut(c)
                        .zip(xhat.chunks(c))
                        .zip(gd.chunks(c))
                        .enumerate()
                    {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gainv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hrow[j];
                        }
                        let k = inv_std[r] / n;
                        for j in 0..c {
                            let dh = grow[j] * gainv[j];
                            drow[j] = drow[j] + k * (n * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
                self.accumulate_with(grads, *gain, |dgain| {
                    for (hrow, grow) in xhat.chunks(c).zip(gd.chunks(c)) {
                        for j in 0..c {
                            dgain[j] = dgain[j] + grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate_with(grads, *bias, |dbias| {
                    for grow in gd.chunks(c) {
                        for j in 0..c {
                            dbias[j] = dbias[j] + grow[j];
                        }
                    }
                });
            }
            Op::NormalizeRows { x, inv_norms } => {
                let c = y.cols();
                self.accumulate_with(grads, *x, |dx| {
                    for (r, ((drow, yrow), grow)) in dx
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gd.chunks(c))
                        .enumerate()
                    {
                        let inv = inv_norms[r];
                        if inv == T::zero() {
                            continue;
                        }
                        let mut dot = T::zero();
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot = dot + yv * gv;
                        }
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d = *d + (gv - yv * dot) * inv;
                        }
                    }
                });
            }
            Op::Slice { x, row0, col0 } => {
                let (rows, cols) = (y.rows(), y.cols());
                let xc = self.dims(*x).1;
                self.accumulate_with(grads, *x, |dx| {
                    for i in 0..rows {
                        let dst = &mut dx[(row0 + i) * xc + col0..(row0 + i) * xc + col0 + cols];
                        for (d, &v) in dst.iter_mut().zip(&gd[i * cols..(i + 1) * cols]) {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = y.cols();
                self.accumulate_with(grads, *x, |dx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &v) in dx[r * c..(r + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c])
                        {
                            *d = *d + v;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    let piece = &gd[offset..offset + len];
                    self.accumulate_with(grads, p, |dp| {
                        for (d, &v) in dp.iter_mut().zip(piece) {
                            *d = *d + v;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col0 = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    self.accumulate_with(grads, p, |dp| {
                        for i in 0..r {
                            for j in 0..c {
                                dp[i * c + j] = dp[i * c + j] + gd[i * total + col0 + j];
                            }
                        }
                    });
                    col0 += c;
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                let inv = T::one() / T::of(r as f64);
                self.accumulate_with(grads, *x, |dx| {
                    for drow in dx.chunks_mut(c) {
                        for (d, &v) in drow.iter_mut().zip(gd) {
                            *d = *d + v * inv;
                        }
                    }
                });
            }
            Op::Sum(terms) => {
                for &t in terms {
                    self.accumulate(grads, t, g.clone());
                }
            }
            Op::GroupedLse {
                x,
                scale,
                groups,
                weights,
            } => {
                let sv = self.scalar(*scale);
                let xs = self.data(*x);
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, grp), &w) in dx.iter_mut().zip(groups).zip(weights) {
                        if let Some(gi) = *grp {
                            *d = *d + gd[gi] * w * sv;
                        }
                    }
                });
                let mut ds = T::zero();
                for ((&xv, grp), &w) in xs.iter().zip(groups).zip(weights) {
                    if let Some(gi) = *grp {
                        ds = ds + gd[gi] * w * xv;
                    }
                }
                self.accumulate(grads, *scale, Tensor::scalar(ds));
            }
            Op::NegDistance { a, b, kind } => {
                let (n, d) = self.dims(*a);
                let q = self.dims(*b).0;
                let (ad, bd) = (self.data(*a), self.data(*b));
                // ∂out[qi, ni] / ∂b[qi, k] = -φ_k, ∂/∂a[ni, k] = +φ_k.
                let mut da = vec![T::zero(); n * d];
                let mut db = vec![T::zero(); q * d];
                for qi in 0..q {
                    for ni in 0..n {
                        let gv = gd[qi * n + ni];
                        let dist = -y.data()[qi * n + ni];
                        for k in 0..d {
                            let diff = bd[qi * d + k] - ad[ni * d + k];
                            let phi = match kind {
                                DistanceKind::Euclid if dist > T::zero() => diff / dist,
                                DistanceKind::Euclid => T::zero(),
                                DistanceKind::Manhattan => {
                                    if diff > T::zero() {
                                        T::one()
                                    } else if diff < T::zero() {
                                        -T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                            db[qi * d + k] = db[qi * d + k] - gv * phi;
                            da[ni * d + k] = da[ni * d + k] + gv * phi;
                        }
                    }
                }
                self.accumulate(grads, *a, mat(n, d, da));
                self.accumulate(grads, *b, mat(q, d, db));
            }
            Op::CrossEntropyRows { p, targets } => {
                let c = self.dims(*p).1;
                let scale = gd[0] / T::of(targets.len() as f64);
                let floor = T::of(PROB_FLOOR);
                let pd = self.data(*p);
                self.accumulate_with(grads, *p, |dp| {
                    for (i, &t) in targets.iter().enumerate() {
                        let pv = pd[i * c + t];
                        if pv > floor {
                            dp[i * c + t] = dp[i * c + t] - scale / pv;
                        }
                    }
                });
            }
            Op::MseConst { x, target } => {
                let xs = self.data(*x);
                let k = gd[0] * T::of(2.0) / T::of(xs.len() as f64);
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, &a), &b) in dx.iter_mut().zip(xs).zip(target.data()) {
                        *d = *d + k * (a - b);
                    }
                });
            }
            Op::KlConst { q, p } => {
                let r = self.dims(*q).0;
                let k = gd[0] / T::of(r as f64);
                let floor = T::of(PROB_FLOOR);
                let qs = self.data(*q);
                self.accumulate_with(grads, *q, |dq| {
                    for ((d, &qv), &pv) in dq.iter_mut().zip(qs).zip(p.data()) {
                        if pv > T::zero() && qv > floor {
                            *d = *d - k * pv / qv;
                        }
                    }
                });
            }
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor<T>>],
        a: Var,
        gd: &[T],
        deriv: impl Fn(T, T) -> T,
    ) {
        let xs = self.data(a);
        let ys = self.nodes[a.0].value.data();
        self.accumulate_with(grads, a, |da| {
            for (((d, &x), &y), &gv) in da.iter_mut().zip(xs).zip(ys).zip(gd) {
                *d = *d + gv * deriv(x, y);
            }
        });
    }
}

/// Value and gradient of a scalar function of `params`.
///
/// `loss_fn` receives a fresh graph and one [`Var`] per parameter, builds the
/// loss and returns its node.
pub fn grad<T: Real>(
    params: &[Tensor<T>],
    loss_fn: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            let t = grads.take(v);
            t.reshape(p.shape().to_vec()).expect("gradient matches parameter")
        })
        .collect();
    Ok((g.scalar(loss), out))
}

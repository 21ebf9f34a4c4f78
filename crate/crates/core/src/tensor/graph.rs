//! Tape of recorded operations and their backward rules.

use super::{gemm_at, gemm_bt, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    MeanGroups(Var, usize),
    SumCols(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Clamp(Var, T, T),
    Reshape(Var),
    Pick(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    groups: usize,
    q_rows: usize,
    kv_rows: usize,
    heads: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] simply walks it in reverse.
/// Gradients land on leaves created with `requires_grad = true`. A second
/// `backward` without [`Graph::zero_grad`] is rejected rather than
/// silently accumulating.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    /// Running hash of which side of each ReLU or clamp boundary every
    /// input sits on; `None` unless [`Graph::track_kinks`] was called.
    kinks: Option<u64>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            kinks: None,
        }
    }

    /// Starts recording the piecewise regions of ReLU and clamp inputs.
    /// Two forward passes with equal [`Graph::kink_signature`] went through
    /// the same linear pieces.
    pub fn track_kinks(&mut self) {
        self.kinks.get_or_insert(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn fold_regions(&mut self, a: Var, region: impl Fn(T) -> u8) {
        let Some(mut h) = self.kinks else { return };
        for &x in &self.nodes[a.0].value.data {
            h = (h ^ region(x) as u64).wrapping_mul(0x0100_0000_01b3);
        }
        self.kinks = Some(h);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable (or frozen) input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let node = &self.nodes[v.0];
        Some(Tensor {
            rows: node.value.rows,
            cols: node.value.cols,
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing downstream can ask for a gradient, so drop the saved state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!(
                "{op}: shapes {}x{} and {}x{} differ",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.push(value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds the `1×n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(bias);
        if rb != 1 || cb != ca {
            return Err(Error::shape(format!(
                "add_row: cannot broadcast {rb}x{cb} over {ra}x{ca}"
            )));
        }
        let mut value = self.value(a).clone();
        let b = &self.nodes[bias.0].value.data;
        for row in value.data.chunks_mut(ca) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, T::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.fold_regions(a, |x| (x > T::zero()) as u8);
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.fold_regions(a, |x| (x > lo) as u8 + (x >= hi) as u8);
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::count(self.value(a).len());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Column means of `a`, as a `1×d` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let rows = self.shape(a).0;
        self.mean_groups(a, rows).expect("a tensor always divides into one group")
    }

    /// Means over consecutive blocks of `group` rows: `[g·n × d] → [n × d]`.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(format!(
                "mean_groups: {rows} rows do not split into groups of {group}"
            )));
        }
        let n = rows / group;
        let inv = T::one() / T::count(group);
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![T::zero(); n * cols];
        for (r, row) in src.chunks(cols).enumerate() {
            let dst = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (o, &x) in dst.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let value = Tensor {
            rows: n,
            cols,
            data: out,
        };
        Ok(self.push(value, Op::MeanGroups(a, group), &[a]))
    }

    /// Row sums: `[m × n] → [m × 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let data = self.nodes[a.0]
            .value
            .data
            .chunks(cols)
            .map(|r| r.iter().copied().sum())
            .collect();
        let value = Tensor {
            rows,
            cols: 1,
            data,
        };
        self.push(value, Op::SumCols(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols;
        for row in value.data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let cols = value.cols;
        for row in value.data.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Per-row standardization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(p);
            if s != (1, cols) {
                return Err(Error::shape(format!(
                    "layer_norm {name} is {}x{}, expected 1x{cols}",
                    s.0, s.1
                )));
            }
        }
        let n = T::count(cols);
        let xs = &self.nodes[x.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor {
            rows,
            cols,
            data: out,
        };
        Ok(self.push(
            value,
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

    /// Multi-head scaled dot-product attention over independent groups.
    ///
    /// `q` holds `groups` consecutive blocks of `q.rows / groups` rows, and
    /// `k`/`v` hold matching blocks of `k.rows / groups` rows. Block `i` of
    /// `q` only attends to block `i` of `k`/`v`. Heads split the model width
    /// into `heads` contiguous column slices of width `d / heads`, each
    /// scaled by `1/√(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        let (vr, vd) = self.shape(v);
        if kd != d || vd != d || kr != vr {
            return Err(Error::shape(format!(
                "attention: q {qr}x{d}, k {kr}x{kd}, v {vr}x{vd} are not compatible"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        if groups == 0 || qr % groups != 0 || kr % groups != 0 {
            return Err(Error::shape(format!(
                "attention: {qr} query rows and {kr} key rows do not split into {groups} groups"
            )));
        }
        let geom = AttnGeom {
            groups,
            q_rows: qr / groups,
            kv_rows: kr / groups,
            heads,
        };
        let (out, probs) = attention_forward(
            &self.nodes[q.0].value.data,
            &self.nodes[k.0].value.data,
            &self.nodes[v.0].value.data,
            d,
            geom,
        );
        let value = Tensor {
            rows: qr,
            cols: d,
            data: out,
        };
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let src = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor {
            rows: idx.len(),
            cols,
            data,
        };
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start >= end || end > cols {
            return Err(Error::shape(format!(
                "slice_cols: range {start}..{end} invalid for {cols} columns"
            )));
        }
        let src = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let value = Tensor {
            rows,
            cols: end - start,
            data,
        };
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `out[i] = a[i, idx[i]]`, as an `m×1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if idx.len() != rows || idx.iter().any(|&j| j >= cols) {
            return Err(Error::shape(format!(
                "pick: {} indices for a {rows}x{cols} tensor",
                idx.len()
            )));
        }
        let src = &self.nodes[a.0].value;
        let data = idx.iter().enumerate().map(|(i, &j)| src.get(i, j)).collect();
        let value = Tensor {
            rows,
            cols: 1,
            data,
        };
        Ok(self.push(value, Op::Pick(a, idx.to_vec()), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::shape("concat_rows: nothing to concatenate")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols != cols {
                return Err(Error::shape(format!(
                    "concat_rows: width {} differs from {cols}",
                    t.cols
                )));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let value = Tensor { rows, cols, data };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Back-propagates from the scalar `loss` into every leaf that requires
    /// a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        if self.backward_done {
            return Err(Error::contract(
                "backward called twice without zero_grad; gradients would double count",
            ));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = Accumulator { nodes, grads };
        let val = |v: &Var| &nodes[v.0].value.data;
        let shape = |v: &Var| (nodes[v.0].value.rows, nodes[v.0].value.cols);
        let (out_rows, out_cols) = shape(&Var(id));
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape(a);
                let n = shape(b).1;
                if nodes[a.0].requires_grad {
                    let bv = val(b);
                    acc.accumulate(*a, |ga| gemm_bt(g, bv, ga, m, n, k));
                }
                if nodes[b.0].requires_grad {
                    let av = val(a);
                    acc.accumulate(*b, |gb| gemm_at(av, g, gb, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc.accumulate(*a, |ga| add_into(ga, g));
                acc.accumulate(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc.accumulate(*a, |ga| add_into(ga, g));
                acc.accumulate(*b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = val(a);
                let bv = val(b);
                acc.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc.accumulate(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc.accumulate(*a, |ga| add_into(ga, g));
                acc.accumulate(*bias, |gb| {
                    for row in g.chunks(out_cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc.accumulate(*a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * s;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc.accumulate(*a, |ga| add_into(ga, g));
            }
            Op::Exp(a) => {
                let y = &nodes[id].value.data;
                acc.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = val(a);
                acc.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(a);
                acc.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &nodes[id].value.data;
                acc.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(a);
                let two = T::lit(2.0);
                acc.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += two * x[i] * g[i];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let x = val(a);
                acc.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] >= lo && x[i] <= hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                acc.accumulate(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::MeanGroups(a, group) => {
                let inv = T::one() / T::count(*group);
                let group = *group;
                acc.accumulate(*a, |ga| {
                    for (r, row) in ga.chunks_mut(out_cols).enumerate() {
                        let src = &g[(r / group) * out_cols..(r / group + 1) * out_cols];
                        for (x, &y) in row.iter_mut().zip(src) {
                            *x += y * inv;
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                let cols = shape(a).1;
                acc.accumulate(*a, |ga| {
                    for (r, row) in ga.chunks_mut(cols).enumerate() {
                        for x in row.iter_mut() {
                            *x += g[r];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &nodes[id].value.data;
                acc.accumulate(*a, |ga| {
                    for ((gr, yr), dst) in g
                        .chunks(out_cols)
                        .zip(y.chunks(out_cols))
                        .zip(ga.chunks_mut(out_cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &w)| u * w).sum();
                        for c in 0..out_cols {
                            dst[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = &nodes[id].value.data;
                acc.accumulate(*a, |ga| {
                    for ((gr, yr), dst) in g
                        .chunks(out_cols)
                        .zip(y.chunks(out_cols))
                        .zip(ga.chunks_mut(out_cols))
                    {
                        let total: T = gr.iter().copied().sum();
                        for c in 0..out_cols {
                            dst[c] += gr[c] - yr[c].exp() * total;
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
                let cols = out_cols;
                let n = T::count(cols);
                let gv = val(gain);
                acc.accumulate(*x, |gx| {
                    for r in 0..out_rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            sum_d += dh;
                            sum_dh += dh * hr[c];
                        }
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            gx[r * cols + c] += k * (n * dh - sum_d - hr[c] * sum_dh);
                        }
                    }
                });
                acc.accumulate(*gain, |gg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc.accumulate(*bias, |gb| {
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let d = out_cols;
                let qv = val(q);
                let kv = val(k);
                let vv = val(v);
                let (dq, dk, dv) = attention_backward(g, qv, kv, vv, probs, d, *geom);
                acc.accumulate(*q, |gq| add_into(gq, &dq));
                acc.accumulate(*k, |gk| add_into(gk, &dk));
                acc.accumulate(*v, |gv| add_into(gv, &dv));
            }
            Op::GatherRows(a, idx) => {
                acc.accumulate(*a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * out_cols..(r + 1) * out_cols];
                        add_into(&mut ga[i * out_cols..(i + 1) * out_cols], src);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let cols = shape(a).1;
                let start = *start;
                acc.accumulate(*a, |ga| {
                    for r in 0..out_rows {
                        let src = &g[r * out_cols..(r + 1) * out_cols];
                        let dst = &mut ga[r * cols + start..r * cols + start + out_cols];
                        add_into(dst, src);
                    }
                });
            }
            Op::Pick(a, idx) => {
                let cols = shape(a).1;
                acc.accumulate(*a, |ga| {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * cols + j] += g[r];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    let src = &g[offset..offset + n];
                    acc.accumulate(p, |gp| add_into(gp, src));
                    offset += n;
                }
            }
        }
    }
}

struct Accumulator<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Accumulator<'_, T> {
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    geom: AttnGeom,
) -> (Vec<T>, Vec<T>) {
    let AttnGeom {
        groups,
        q_rows: a,
        kv_rows: b,
        heads,
    } = geom;
    let dk = d / heads;
    let scale = T::one() / T::count(dk).sqrt();
    let mut out = vec![T::zero(); groups * a * d];
    let mut probs = vec![T::zero(); groups * heads * a * b];
    for grp in 0..groups {
        for h in 0..heads {
            let p_base = (grp * heads + h) * a * b;
            for i in 0..a {
                let qi = &q[(grp * a + i) * d + h * dk..(grp * a + i) * d + (h + 1) * dk];
                let prow = &mut probs[p_base + i * b..p_base + (i + 1) * b];
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = &k[(grp * b + j) * d + h * dk..(grp * b + j) * d + (h + 1) * dk];
                    *p = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[(grp * a + i) * d + h * dk..(grp * a + i) * d + (h + 1) * dk];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v[(grp * b + j) * d + h * dk..(grp * b + j) * d + (h + 1) * dk];
                    for (o, &y) in orow.iter_mut().zip(vj) {
                        *o += p * y;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Real>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: usize,
    geom: AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnGeom {
        groups,
        q_rows: a,
        kv_rows: b,
        heads,
    } = geom;
    let dk = d / heads;
    let scale = T::one() / T::count(dk).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dkm = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); b];
    for grp in 0..groups {
        for h in 0..heads {
            let p_base = (grp * heads + h) * a * b;
            for i in 0..a {
                let qrow = (grp * a + i) * d + h * dk;
                let gi = &g[qrow..qrow + dk];
                let prow = &probs[p_base + i * b..p_base + (i + 1) * b];
                for j in 0..b {
                    let vrow = (grp * b + j) * d + h * dk;
                    dp[j] = gi.iter().zip(&v[vrow..vrow + dk]).map(|(&x, &y)| x * y).sum();
                    for c in 0..dk {
                        dv[vrow + c] += prow[j] * gi[c];
                    }
                }
                let dot: T = dp.iter().zip(prow).map(|(&x, &y)| x * y).sum();
                for j in 0..b {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let krow = (grp * b + j) * d + h * dk;
                    for c in 0..dk {
                        dq[qrow + c] += ds * k[krow + c];
                        dkm[krow + c] += ds * q[qrow + c];
                    }
                }
            }
        }
    }
    (dq, dkm, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(2, 2, &[1., 2., 3., 4.]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let a = g.constant(t(1, 2, &[1., 2.]));
        let b = g.constant(t(2, 1, &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(3, 3, &[0., 0., 0., 1., 2., 3., 1000., 0., 0.]));
        let s = g.softmax_rows(x);
        let v = g.value(s);
        for c in 0..3 {
            assert_abs_diff_eq!(v.get(0, c), 1.0 / 3.0, epsilon = 1e-12);
        }
        // exp/sum evaluated directly
        let e: Vec<f64> = [1f64, 2., 3.].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..3 {
            assert_abs_diff_eq!(v.get(1, c), e[c] / z, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(v.get(1, 0), 0.09003, epsilon = 1e-5);
        assert_abs_diff_eq!(v.get(1, 1), 0.24473, epsilon = 1e-5);
        assert_abs_diff_eq!(v.get(1, 2), 0.66524, epsilon = 1e-5);
        assert_eq!(v.get(2, 0), 1.0);
        assert!(v.get(2, 1) >= 0.0 && v.get(2, 1) < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(2, 2, &[5., 5., 1., 3.]));
        let gain = g.constant(Tensor::ones(1, 2));
        let bias = g.constant(Tensor::zeros(1, 2));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[0.0, 0.0]);
        assert_abs_diff_eq!(v.get(1, 0), -1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(v.get(1, 1), 1.0, epsilon = 1e-4);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 2, &[-1., 2.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 2.]);
        let m = g.constant(t(2, 2, &[1., 3., 3., 5.]));
        let mr = g.mean_rows(m);
        assert_eq!(g.value(mr).data(), &[2., 4.]);

        let mut g = Graph::<f64>::new();
        let z = g.param(t(1, 1, &[0.]));
        let e = g.exp(z);
        let l = g.sum(e);
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[1.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 3, &[4., 5., 6.]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 2, &[1., 2.]));
        let xx = g.mul(x, x).unwrap();
        let l = g.sum(xx);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(1, 3));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn fan_out_sums_both_paths() {
        // l = sum(x * 3) + sum(x²) ⇒ dl/dx = 3 + 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 2, &[1., -2.]));
        let a = g.scale(x, 3.0);
        let b = g.square(x);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5., -1.]);
    }

    #[test]
    fn constants_do_not_record_saved_state() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(3, 3));
        let b = g.softmax_rows(a);
        assert!(!g.requires_grad(b));
        let l = g.sum(b);
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none());
    }
}

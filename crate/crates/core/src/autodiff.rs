//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes; every op pushes one node whose
//! parents are already in the list, so insertion order is a topological order.
//! The graph is rebuilt for every forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
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
    AddColumn(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxColumns(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    /// Per-column max minus min; stores the selected (argmax, argmin) rows.
    ColumnRange(Var, Vec<(usize, usize)>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy(Var, Vec<usize>),
    BceWithLogits(Var, Tensor),
    Sum(Var),
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddColumn(a, b)
        | Op::MulRow(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::SoftmaxColumns(a)
        | Op::Transpose(a)
        | Op::GatherRows(a, _)
        | Op::GatherCols(a, _)
        | Op::ColumnRange(a, _)
        | Op::CrossEntropy(a, _)
        | Op::BceWithLogits(a, _)
        | Op::Sum(a) => vec![*a],
        Op::VStack(vs) | Op::HStack(vs) => vs.clone(),
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named trainable leaf.
    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parent indices of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        op_parents(&self.nodes[v.0].op)
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = op_parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Hash of which side of zero every ReLU input sits on. Equal signatures
    /// mean the graph was built on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for &v in self.nodes[a.0].value.data() {
                    h.write_u8(u8::from(v > 0.0));
                }
            }
        }
        h.finish()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named leaf; only `trainable` leaves receive gradients.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            name: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// `a (m×n) + b (m×1)` with `b` broadcast across columns.
    pub fn add_column(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = av.dims2()?;
        if bv.shape() != [m, 1] {
            return Err(dim_err("add_column", av, bv));
        }
        let mut out = av.clone();
        for i in 0..m {
            let bias = bv.data()[i];
            for x in &mut out.data_mut()[i * n..(i + 1) * n] {
                *x += bias;
            }
        }
        self.push(out, Op::AddColumn(a, b), "add_column")
    }

    /// `a (r×c) ⊙ row (1×c)` with `row` broadcast down the rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (r, c) = av.dims2()?;
        if rv.shape() != [1, c] {
            return Err(dim_err("mul_row", av, rv));
        }
        let mut out = av.clone();
        for i in 0..r {
            for (x, s) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(rv.data()) {
                *x *= s;
            }
        }
        self.push(out, Op::MulRow(a, row), "mul_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(Error::NonFinite("softmax_columns input"));
        }
        let v = softmax_columns(av)?;
        self.push(v, Op::SoftmaxColumns(a), "softmax_columns")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    /// Output row `r` is input row `indices[r]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row index {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(vec![indices.len(), c], data)?;
        self.push(v, Op::GatherRows(a, indices), "gather_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(a, (start..start + len).collect())
    }

    /// Output column `k` is input column `indices[k]`.
    pub fn gather_cols(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!("column index {bad} out of range for {c} columns")));
        }
        let k = indices.len();
        let mut data = vec![0.0; r * k];
        for i in 0..r {
            for (o, &j) in indices.iter().enumerate() {
                data[i * k + o] = av.data()[i * c + j];
            }
        }
        let v = Tensor::new(vec![r, k], data)?;
        self.push(v, Op::GatherCols(a, indices), "gather_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_cols(a, (start..start + len).collect())
    }

    /// Concatenate along rows (all parts share a column count).
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (pr, pc) = pv.dims2()?;
            if pc != c {
                return Err(dim_err("vstack", first, pv));
            }
            rows += pr;
            data.extend_from_slice(pv.data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        self.push(v, Op::VStack(parts.to_vec()), "vstack")
    }

    /// Concatenate along columns (all parts share a row count).
    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pr, pc) = pv.dims2()?;
            if pr != r {
                return Err(dim_err("hstack", first, pv));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let v = Tensor::new(vec![r, total], data)?;
        self.push(v, Op::HStack(parts.to_vec()), "hstack")
    }

    /// `1 × c` row of per-column `max - min`. Ties pick the first index.
    pub fn column_range(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut picks = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            let (mut imax, mut imin) = (0, 0);
            for i in 1..r {
                if av.get(i, j) > av.get(imax, j) {
                    imax = i;
                }
                if av.get(i, j) < av.get(imin, j) {
                    imin = i;
                }
            }
            out.push(av.get(imax, j) - av.get(imin, j));
            picks.push((imax, imin));
        }
        let v = Tensor::new(vec![1, c], out)?;
        self.push(v, Op::ColumnRange(a, picks), "column_range")
    }

    /// Per-column layer normalization over rows, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm_columns(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (d, n) = xv.dims2()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [d, 1] {
            return Err(dim_err("layer_norm gamma", xv, gv));
        }
        if bv.shape() != [d, 1] {
            return Err(dim_err("layer_norm beta", xv, bv));
        }
        let mut normalized = Tensor::zeros(&[d, n]);
        let mut out = Tensor::zeros(&[d, n]);
        let mut inv_std = Vec::with_capacity(n);
        for j in 0..n {
            let mean = (0..d).map(|i| xv.get(i, j)).sum::<f64>() / d as f64;
            let var = (0..d).map(|i| (xv.get(i, j) - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..d {
                let xh = (xv.get(i, j) - mean) * is;
                normalized.set(i, j, xh);
                out.set(i, j, gv.data()[i] * xh + bv.data()[i]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Summed softmax cross-entropy over the columns of `logits (c × b)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (c, b) = lv.dims2()?;
        if targets.len() != b {
            return Err(Error::Contract(format!(
                "cross_entropy: {b} logit columns but {} targets",
                targets.len()
            )));
        }
        let mut loss = 0.0;
        for (j, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Contract(format!("target {t} out of range for {c} classes")));
            }
            let col = lv.col(j);
            loss += log_sum_exp(&col) - col[t];
        }
        self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets.to_vec()), "cross_entropy")
    }

    /// `cross_entropy` minus `b·ln c`, its value at uniform logits. Same
    /// gradient, but the value is formed without passing through `ln c`, so
    /// small changes survive rounding. Finite-difference oracles use it.
    pub fn cross_entropy_excess(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, targets)?;
        self.nodes.pop();
        let lv = self.value(logits);
        let c = lv.rows();
        let mut loss = 0.0;
        for (j, &t) in targets.iter().enumerate() {
            let col = lv.col(j);
            let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = col.iter().map(|&z| (z - m).exp_m1()).sum::<f64>() / c as f64;
            loss += (m - col[t]) + mean.ln_1p();
        }
        self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets.to_vec()), "cross_entropy")
    }

    /// Summed sigmoid binary cross-entropy; `targets` has the shape of `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(dim_err("bce_with_logits", lv, &targets));
        }
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - y * z + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets), "bce_with_logits")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, true, Some(name)) = (&node.op, node.requires_grad, &node.name) {
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match by_name.get_mut(name) {
                    None => {
                        by_name.insert(name.clone(), g);
                    }
                    Some(acc) => Tensor::add_assign(acc, &g)?,
                }
            }
        }
        // Only leaves that asked for gradients keep them.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_name,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*b) {
                    let db = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.zip_with(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*b) {
                    let db = g.zip_with(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::AddColumn(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.requires_grad(*b) {
                    let (m, n) = g.dims2()?;
                    let db: Vec<f64> = (0..m).map(|i| g.data()[i * n..(i + 1) * n].iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::new(vec![m, 1], db)?)?;
                }
            }
            Op::MulRow(a, row) => {
                let (r, c) = g.dims2()?;
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for i in 0..r {
                        for (x, s) in da.data_mut()[i * c..(i + 1) * c].iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*row) {
                    let mut dr = vec![0.0; c];
                    for i in 0..r {
                        for (j, acc) in dr.iter_mut().enumerate() {
                            *acc += g.get(i, j) * av.get(i, j);
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new(vec![1, c], dr)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Relu(a) => {
                let da = g.zip_with(self.value(*a), "relu", |dy, x| if x > 0.0 { dy } else { 0.0 })?;
                self.accumulate(grads, *a, da)?;
            }
            Op::SoftmaxColumns(a) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut da = Tensor::zeros(&[r, c]);
                for j in 0..c {
                    let dot: f64 = (0..r).map(|i| g.get(i, j) * y.get(i, j)).sum();
                    for i in 0..r {
                        da.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let (_, c) = av.dims2()?;
                let mut da = Tensor::zeros(av.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        da.data_mut()[i * c + j] += g.data()[r * c + j];
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::GatherCols(a, indices) => {
                let av = self.value(*a);
                let (r, c) = av.dims2()?;
                let k = indices.len();
                let mut da = Tensor::zeros(av.shape());
                for i in 0..r {
                    for (o, &j) in indices.iter().enumerate() {
                        da.data_mut()[i * c + j] += g.data()[i * k + o];
                    }
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::VStack(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.requires_grad(p) {
                        let slice = g.data()[offset * c..(offset + pr) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![pr, c], slice)?)?;
                    }
                    offset += pr;
                }
            }
            Op::HStack(parts) => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![r, w], dp)?)?;
                    }
                    offset += w;
                }
            }
            Op::ColumnRange(a, picks) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.shape());
                for (j, &(imax, imin)) in picks.iter().enumerate() {
                    let gj = g.data()[j];
                    da.set(imax, j, da.get(imax, j) + gj);
                    da.set(imin, j, da.get(imin, j) - gj);
                }
                self.accumulate(grads, *a, da)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (d, n) = normalized.dims2()?;
                let gv = self.value(*gamma);
                if self.requires_grad(*beta) {
                    let db: Vec<f64> = (0..d).map(|i| (0..n).map(|j| g.get(i, j)).sum()).collect();
                    self.accumulate(grads, *beta, Tensor::new(vec![d, 1], db)?)?;
                }
                if self.requires_grad(*gamma) {
                    let dg: Vec<f64> = (0..d)
                        .map(|i| (0..n).map(|j| g.get(i, j) * normalized.get(i, j)).sum())
                        .collect();
                    self.accumulate(grads, *gamma, Tensor::new(vec![d, 1], dg)?)?;
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(&[d, n]);
                    for j in 0..n {
                        let dxh: Vec<f64> = (0..d).map(|i| g.get(i, j) * gv.data()[i]).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh =
                            (0..d).map(|i| dxh[i] * normalized.get(i, j)).sum::<f64>() / d as f64;
                        for i in 0..d {
                            let v = inv_std[j] * (dxh[i] - mean_dxh - normalized.get(i, j) * mean_dxh_xh);
                            dx.set(i, j, v);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let probs = softmax_columns(lv)?;
                let mut dl = probs;
                let scale = g.data()[0];
                for (j, &t) in targets.iter().enumerate() {
                    dl.set(t, j, dl.get(t, j) - 1.0);
                }
                self.accumulate(grads, *logits, dl.scale(scale))?;
            }
            Op::BceWithLogits(logits, targets) => {
                let scale = g.data()[0];
                let dl = self
                    .value(*logits)
                    .zip_with(targets, "bce", |z, y| scale * (sigmoid(z) - y))?;
                self.accumulate(grads, *logits, dl)?;
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s))?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Column-wise softmax with a per-column max shift.
pub fn softmax_columns(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    let mut out = Tensor::zeros(&[r, c]);
    for j in 0..c {
        let max = (0..r).map(|i| m.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..r {
            let e = (m.get(i, j) - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for i in 0..r {
            out.set(i, j, out.get(i, j) / total);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        let s = softmax_columns(&Tensor::column(&[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_columns(&Tensor::column(&[1.0, 2.0])).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(s.data()[0], e1 / (e1 + e2), epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[0], 0.268_941_421_369_995_1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.731_058_578_630_004_9, epsilon = 1e-15);
        let shifted = softmax_columns(&Tensor::column(&[6.0, 7.0])).unwrap();
        assert!(shifted.max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::column(&[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.named("x").unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::column(&[-3.0, -0.5]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]), true);
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.named("w").unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn half_square_norm_gradient_is_identity() {
        let w0 = Tensor::from_rows(&[&[1.0, -2.0, 0.25]]);
        let mut g = Graph::new();
        let w = g.param("w", w0.clone(), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.named("w").unwrap(), &w0);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::ones(&[2, 2]), false);
        let b = g.param("b", Tensor::ones(&[2, 2]), true);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.named("a").is_none());
        assert!(grads.get(a).is_none());
        assert_eq!(grads.named("b").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::ones(&[2, 2]), true);
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::ones(&[2, 3]), true);
        let b = g.constant(Tensor::ones(&[3, 2]));
        let c = g.matmul(a, b).unwrap();
        let d = g.softmax_columns(c).unwrap();
        let e = g.vstack(&[c, d]).unwrap();
        let _ = g.sum(e).unwrap();
        for i in 0..g.len() {
            for p in g.parents(Var(i)) {
                assert!(p.index() < i);
            }
        }
    }

    #[test]
    fn column_range_ties_cancel() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::from_rows(&[&[2.0, 1.0], &[2.0, 4.0], &[2.0, 2.0]]), true);
        let r = g.column_range(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
        let loss = g.sum(r).unwrap();
        let grads = g.backward(loss).unwrap();
        let ga = grads.named("a").unwrap();
        assert_eq!(ga.col(0), vec![0.0, 0.0, 0.0]);
        assert_eq!(ga.col(1), vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::column(&[f64::MAX, f64::MAX]));
        assert!(matches!(g.sum(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn excess_cross_entropy_is_shifted_by_ln_c() {
        let z = Tensor::from_rows(&[&[0.3, -1.0], &[0.1, 2.0], &[-0.4, 0.5]]);
        let mut g = Graph::new();
        let a = g.param("z", z.clone(), true);
        let full = g.cross_entropy(a, &[0, 2]).unwrap();
        let excess = g.cross_entropy_excess(a, &[0, 2]).unwrap();
        let shift = g.value(full).data()[0] - g.value(excess).data()[0];
        assert!((shift - 2.0 * 3f64.ln()).abs() < 1e-14);
        let ga = g.backward(full).unwrap().named("z").unwrap().clone();
        let gb = g.backward(excess).unwrap().named("z").unwrap().clone();
        assert!(ga.bit_eq(&gb));
        let mut u = Graph::new();
        let a = u.constant(Tensor::zeros(&[4, 1]));
        let e = u.cross_entropy_excess(a, &[1]).unwrap();
        assert_eq!(u.value(e).data()[0], 0.0);
    }
}
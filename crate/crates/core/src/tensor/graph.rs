//! The computation tape.
//!
//! A [`Graph`] is an append-only list of nodes. Nodes are created in
//! topological order, so the backward pass is a single reverse sweep.
//! Parameter leaves borrow their values from a [`ParamSet`] instead of
//! copying them.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, ParamSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Pick(Var, usize),
    LayerNorm(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    param: Option<ParamId>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(1024),
            param_nodes: vec![None; params.len()],
            grads: Vec::new(),
        }
    }

    /// A graph without parameters, for free-standing computations.
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        match n.param {
            Some(id) => self
                .params
                .expect("param node without params")
                .get(id)
                .data(),
            None => &n.value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let (r, c) = self.shape(v);
        assert!(r == 1 && c == 1, "scalar() on a {r}x{c} node");
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shapes are positive")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            param: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant or input tensor. Gradients flow into it when
    /// `tensor.requires_grad()` is set.
    pub fn input(&mut self, tensor: &Tensor) -> Var {
        let (r, c) = (tensor.rows(), tensor.cols());
        self.push(
            r,
            c,
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant of shape {rows}x{cols}");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let t = self.params.expect("graph has no parameter set").get(id);
        let (r, c) = (t.rows(), t.cols());
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: Vec::new(),
            param: Some(id),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(m, n, out, Op::MatMul(a, b), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "{what} of {sa:?} and {sb:?}");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(sa.0, sa.1, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m,n] + row[1,n]`, broadcasting the row over `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(
            self.shape(row),
            (1, n),
            "add_row of {m}x{n} and {:?}",
            self.shape(row)
        );
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        self.push(m, n, out, Op::AddRow(a, row), rg)
    }

    /// `a[m,n] * row[1,n]` elementwise, broadcasting the row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(
            self.shape(row),
            (1, n),
            "mul_row of {m}x{n} and {:?}",
            self.shape(row)
        );
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x * y))
            .collect();
        let rg = self.rg(&[a, row]);
        self.push(m, n, out, Op::MulRow(a, row), rg)
    }

    /// Multiplies every entry of `a` by the `1x1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by needs a scalar");
        let k = self.value(s)[0];
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let rg = self.rg(&[a, s]);
        self.push(m, n, out, Op::ScaleBy(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        let rg = self.rg(&[a]);
        self.push(m, n, out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x + k).collect();
        let rg = self.rg(&[a]);
        self.push(m, n, out, Op::AddScalar(a), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(m, n, out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax over all columns.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.masked_softmax(a, None)
            .expect("unmasked softmax cannot be degenerate")
    }

    /// Row-wise softmax restricted to positions where `mask` is true.
    /// Masked positions come out as exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::Shape(format!(
                    "mask of length {} for {m}x{n}",
                    mask.len()
                )));
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let keep = |c: usize| mask.is_none_or(|mk| mk[r * n + c]);
            let max = (0..n)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for c in 0..n {
                if keep(c) {
                    o[c] = (row[c] - max).exp();
                    total += o[c];
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(m, n, out, Op::Softmax(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = x[r * n + c];
            }
        }
        let rg = self.rg(&[a]);
        self.push(n, m, out, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|p| self.shape(*p).0 == m),
            "concat_cols row mismatch"
        );
        let n: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                let w = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(m, n, out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.shape(parts[0]).1;
        assert!(
            parts.iter().all(|p| self.shape(*p).1 == n),
            "concat_rows column mismatch"
        );
        let m: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut out = Vec::with_capacity(m * n);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let rg = self.rg(parts);
        self.push(m, n, out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; n];
        for chunk in self.value(a).chunks(n) {
            out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[a]);
        self.push(1, n, out, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    /// Selects rows of `a` (repeats allowed): `[m,n] -> [idx.len(),n]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.shape(a);
        assert!(!idx.is_empty(), "gather of no rows");
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "row {i} out of range for {m}x{n}");
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        self.push(idx.len(), n, out, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, &[i])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Scatter-adds the columns of a row vector: `out[idx[j]] += a[j]`,
    /// producing a `[1,width]` row.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], width: usize) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(m, 1, "scatter_cols needs a row vector");
        assert_eq!(n, idx.len(), "scatter_cols index length");
        let x = self.value(a);
        let mut out = vec![0.0; width];
        for (j, &t) in idx.iter().enumerate() {
            assert!(t < width, "scatter target {t} out of range {width}");
            out[t] += x[j];
        }
        let rg = self.rg(&[a]);
        self.push(1, width, out, Op::ScatterCols(a, idx.to_vec()), rg)
    }

    /// Flat element `i` of `a` as a `1x1` node.
    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a)[i];
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![v], Op::Pick(a, i), rg)
    }

    /// Row-wise normalisation to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for chunk in x.chunks(n) {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(chunk.iter().map(|v| (v - mean) * is));
        }
        let rg = self.rg(&[a]);
        self.push(m, n, out, Op::LayerNorm(a, inv_std), rg)
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar root. Returns the number of nodes whose
    /// backward rule ran.
    pub fn backward(&mut self, root: Var) -> Result<usize> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            visited += 1;
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(visited)
    }

    /// Collects parameter gradients after [`Graph::backward`].
    pub fn param_grads(&self) -> Gradients {
        let slots = self
            .param_nodes
            .iter()
            .map(|v| v.and_then(|v| self.grads.get(v.0).cloned().flatten()))
            .collect();
        Gradients::from_slots(slots)
    }

    fn backward_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, m * k);
                    for r in 0..m {
                        for j in 0..n {
                            let g = gout[r * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for t in 0..k {
                                ga[r * k + t] += g * bv[t * n + j];
                            }
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, k * n);
                    for r in 0..m {
                        for t in 0..k {
                            let x = av[r * k + t];
                            if x == 0.0 {
                                continue;
                            }
                            let grow = &gout[r * n..(r + 1) * n];
                            let brow = &mut gb[t * n..(t + 1) * n];
                            brow.iter_mut().zip(grow).for_each(|(d, g)| *d += x * g);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_same(grads, *a, gout, 1.0);
                self.acc_same(grads, *b, gout, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_same(grads, *a, gout, 1.0);
                self.acc_same(grads, *b, gout, -1.0);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, gout.len());
                    ga.iter_mut()
                        .zip(gout)
                        .zip(bv)
                        .for_each(|((d, g), y)| *d += g * y);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, gout.len());
                    gb.iter_mut()
                        .zip(gout)
                        .zip(av)
                        .for_each(|((d, g), x)| *d += g * x);
                }
            }
            Op::AddRow(a, row) => {
                self.acc_same(grads, *a, gout, 1.0);
                if self.requires_grad(*row) {
                    let gr = slot(grads, *row, cols);
                    for chunk in gout.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MulRow(a, row) => {
                if self.requires_grad(*a) {
                    let rv = self.value(*row);
                    let ga = slot(grads, *a, rows * cols);
                    for (dchunk, gchunk) in ga.chunks_mut(cols).zip(gout.chunks(cols)) {
                        dchunk
                            .iter_mut()
                            .zip(gchunk)
                            .zip(rv)
                            .for_each(|((d, g), y)| *d += g * y);
                    }
                }
                if self.requires_grad(*row) {
                    let av = self.value(*a);
                    let gr = slot(grads, *row, cols);
                    for (xchunk, gchunk) in av.chunks(cols).zip(gout.chunks(cols)) {
                        gr.iter_mut()
                            .zip(gchunk)
                            .zip(xchunk)
                            .for_each(|((d, g), x)| *d += g * x);
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s)[0];
                self.acc_same(grads, *a, gout, k);
                if self.requires_grad(*s) {
                    let dot: f64 = gout.iter().zip(self.value(*a)).map(|(g, x)| g * x).sum();
                    slot(grads, *s, 1)[0] += dot;
                }
            }
            Op::Scale(a, k) => self.acc_same(grads, *a, gout, *k),
            Op::AddScalar(a) => self.acc_same(grads, *a, gout, 1.0),
            Op::Tanh(a) => self.acc_map(grads, *a, gout, |j| 1.0 - out[j] * out[j]),
            Op::Sigmoid(a) => self.acc_map(grads, *a, gout, |j| out[j] * (1.0 - out[j])),
            Op::Exp(a) => self.acc_map(grads, *a, gout, |j| out[j]),
            Op::Log(a) => {
                let x = self.value(*a);
                self.acc_map(grads, *a, gout, |j| 1.0 / x[j])
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc_map(grads, *a, gout, |j| if x[j] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Softmax(a) => {
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, rows * cols);
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let g = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        let d = &mut ga[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            d[c] += y[c] * (g[c] - dot);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    // out is rows x cols; a is cols x rows
                    let ga = slot(grads, *a, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] += gout[r * cols + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.requires_grad(*p) {
                        let gp = slot(grads, *p, rows * w);
                        for r in 0..rows {
                            let src = &gout[r * cols + offset..r * cols + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p).0 * cols;
                    if self.requires_grad(*p) {
                        let gp = slot(grads, *p, len);
                        gp.iter_mut()
                            .zip(&gout[offset..offset + len])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += len;
                }
            }
            Op::MeanRows(a) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.shape(*a);
                    let ga = slot(grads, *a, m * n);
                    let inv = 1.0 / m as f64;
                    for chunk in ga.chunks_mut(n) {
                        chunk.iter_mut().zip(gout).for_each(|(d, g)| *d += g * inv);
                    }
                }
            }
            Op::Sum(a) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.shape(*a);
                    slot(grads, *a, m * n)
                        .iter_mut()
                        .for_each(|d| *d += gout[0]);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.shape(*a);
                    let ga = slot(grads, *a, m * n);
                    for (k, &i) in idx.iter().enumerate() {
                        ga[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&gout[k * n..(k + 1) * n])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ScatterCols(a, idx) => {
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, idx.len());
                    for (j, &t) in idx.iter().enumerate() {
                        ga[j] += gout[t];
                    }
                }
            }
            Op::Pick(a, i) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.shape(*a);
                    slot(grads, *a, m * n)[*i] += gout[0];
                }
            }
            Op::LayerNorm(a, inv_std) => {
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, rows * cols);
                    let nf = cols as f64;
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let g = &gout[r * cols..(r + 1) * cols];
                        let mean_g = g.iter().sum::<f64>() / nf;
                        let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / nf;
                        let d = &mut ga[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            d[c] += inv_std[r] * (g[c] - mean_g - y[c] * mean_gy);
                        }
                    }
                }
            }
        }
    }

    fn acc_same(&self, grads: &mut [Option<Vec<f64>>], a: Var, gout: &[f64], k: f64) {
        if !self.requires_grad(a) {
            return;
        }
        let ga = slot(grads, a, gout.len());
        if k == 1.0 {
            ga.iter_mut().zip(gout).for_each(|(d, g)| *d += g);
        } else {
            ga.iter_mut().zip(gout).for_each(|(d, g)| *d += g * k);
        }
    }

    fn acc_map(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        gout: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        if !self.requires_grad(a) {
            return;
        }
        let ga = slot(grads, a, gout.len());
        for (j, (d, g)) in ga.iter_mut().zip(gout).enumerate() {
            *d += g * local(j);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for t in 0..k {
            let x = a[r * k + t];
            if x == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::detached();
        let x = g.constant(1, 3, vec![0.0; 3]);
        let y = g.masked_softmax(x, Some(&[true, true, true])).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_unmasked_position() {
        for other in [-1e3, 0.0, 7.5, 1e3] {
            let mut g = Graph::detached();
            let x = g.constant(1, 2, vec![5.0, other]);
            let y = g.masked_softmax(x, Some(&[true, false])).unwrap();
            assert_eq!(g.value(y), &[1.0, 0.0]);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::detached();
        let x = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let err = g
            .masked_softmax(x, Some(&[true, false, false, false]))
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1 }));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::detached();
        let va = g.constant(3, 4, a.clone());
        let vb = g.constant(4, 2, b.clone());
        let c = g.matmul(va, vb);
        let expected = naive_matmul(&a, &b, 3, 4, 2);
        for (x, y) in g.value(c).iter().zip(&expected) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_of_linear_sum_is_outer_product() {
        let mut ps = ParamSet::new();
        let w = ps.add(
            "w",
            Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, 0.25]).unwrap(),
        );
        let x = [1.0, -2.0, 3.0];
        let mut g = Graph::new(&ps);
        let xv = g.constant(1, 3, x.to_vec());
        let wv = g.param(w);
        let y = g.matmul(xv, wv);
        let root = g.sum(y);
        g.backward(root).unwrap();
        let grads = g.param_grads();
        let gw = grads.get(w).unwrap();
        // d/dW sum(x W) = x^T 1
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(gw[r * 2 + c], x[r]);
            }
        }
    }

    #[test]
    fn constant_root_leaves_grads_empty() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::zeros(2, 2));
        let mut g = Graph::new(&ps);
        let _unused = g.param(w);
        let c = g.constant(1, 1, vec![4.0]);
        let visited = g.backward(c).unwrap();
        assert_eq!(visited, 0);
        assert!(g.param_grads().get(w).is_none());
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::detached();
        let x = g.constant(1, 2, vec![1.0, 2.0]);
        assert!(matches!(
            g.backward(x),
            Err(Error::NotScalar { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn every_differentiable_node_is_visited_once() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::scalar(0.3));
        let mut g = Graph::new(&ps);
        let wv = g.param(w);
        let a = g.tanh(wv);
        let b = g.mul(a, wv);
        let _dead = g.exp(wv);
        let c = g.add(b, a);
        // the exp branch never receives a gradient
        let visited = g.backward(c).unwrap();
        assert_eq!(visited, 4);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut g = Graph::detached();
        let x = g.constant(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]);
        let y = g.layer_norm(x, 0.0);
        for row in g.value(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::uniform(r, c, 1.0, rng)
    }

    /// Builds a one-primitive loss `sum(op(inputs) * weights)` and checks it.
    fn check_primitive(kind: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..4);
        let n = rng.gen_range(1..4);
        let k = rng.gen_range(1..4);
        let mut ps = ParamSet::new();
        let a = ps.add("a", random_tensor(&mut rng, m, n));
        let b = ps.add("b", random_tensor(&mut rng, m, n));
        let c = ps.add("c", random_tensor(&mut rng, n, k));
        let row = ps.add("row", random_tensor(&mut rng, 1, n));
        let s = ps.add("s", random_tensor(&mut rng, 1, 1));
        // keep log() away from zero
        let pos = ps.add("pos", Tensor::uniform(m, n, 1.0, &mut rng));
        for v in ps.get_mut(pos).data_mut() {
            *v = v.abs() + 0.5;
        }
        let mask: Vec<bool> = (0..m * n)
            .map(|i| i % n == 0 || rng.gen_bool(0.6))
            .collect();
        let mix_seed: u64 = rng.gen();
        let build = move |g: &mut Graph| {
            let (va, vb, vc, vrow, vs, vpos) = (
                g.param(a),
                g.param(b),
                g.param(c),
                g.param(row),
                g.param(s),
                g.param(pos),
            );
            let out = match kind {
                0 => g.matmul(va, vc),
                1 => g.add(va, vb),
                2 => g.sub(va, vb),
                3 => g.mul(va, vb),
                4 => g.add_row(va, vrow),
                5 => g.mul_row(va, vrow),
                6 => g.scale_by(va, vs),
                7 => g.scale(va, -1.7),
                8 => g.add_scalar(va, 0.3),
                9 => g.tanh(va),
                10 => g.sigmoid(va),
                11 => g.exp(va),
                12 => g.log(vpos),
                13 => g.masked_softmax(va, Some(&mask)).unwrap(),
                14 => g.transpose(va),
                15 => g.concat_cols(&[va, vb]),
                16 => g.concat_rows(&[va, vb]),
                17 => g.mean_rows(va),
                18 => g.sum(va),
                19 => g.gather_rows(va, &[m - 1, 0, m - 1]),
                20 => {
                    let r = g.row(vrow, 0);
                    g.scatter_cols(r, &(0..n).map(|j| j % 2).collect::<Vec<_>>(), 2)
                }
                21 => g.pick(va, (m * n) / 2),
                _ => g.layer_norm(va, 1e-5),
            };
            // random linear readout so every output entry matters
            let (r, cc) = g.shape(out);
            let mut wr = ChaCha8Rng::seed_from_u64(mix_seed);
            let w: Vec<f64> = (0..r * cc).map(|_| wr.gen_range(-1.0..1.0)).collect();
            let wv = g.constant(r, cc, w);
            let prod = g.mul(out, wv);
            g.sum(prod)
        };
        let report = gradient_check(&mut ps, build, &GradCheckOptions::default());
        report.max_rel_error
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for kind in 0..23 {
            for seed in 0..100 {
                let err = check_primitive(kind, seed * 31 + kind as u64);
                assert!(err <= 1e-4, "primitive {kind} seed {seed}: rel error {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn masked_softmax_is_a_distribution(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
            mask_bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let n = logits.len();
            let mut mask: Vec<bool> = mask_bits[..n].to_vec();
            mask[0] = true;
            let mut g = Graph::detached();
            let x = g.constant(1, n, logits);
            let y = g.masked_softmax(x, Some(&mask)).unwrap();
            let out = g.value(y);
            let total: f64 = out.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            for (v, keep) in out.iter().zip(&mask) {
                prop_assert!(*v >= 0.0);
                if !keep { prop_assert_eq!(*v, 0.0); }
            }
        }

        #[test]
        fn forward_is_bit_reproducible(seed in 0u64..1000) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Tensor::uniform(3, 3, 1.0, &mut rng);
                let mut g = Graph::detached();
                let x = g.input(&a);
                let y = g.matmul(x, x);
                let z = g.tanh(y);
                let s = g.softmax(z);
                g.value(s).to_vec()
            };
            prop_assert_eq!(run(), run());
        }
    }
}

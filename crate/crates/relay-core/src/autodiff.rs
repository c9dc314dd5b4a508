//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A `Graph` records one forward computation; `backward` walks the tape in
//! reverse and scatters gradients into the `ParamStore` entries that were
//! bound as leaves. Tapes are cheap and rebuilt every step.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    layer_norm_rows, log_softmax_rows, sigmoid, softmax_rows, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<T>,
        normed: Tensor<T>,
    },
    Silu(Var),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    SumAll(Var),
    PickSum {
        x: Var,
        picks: Vec<(usize, usize)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
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

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// Differentiable input with no parameter binding (for gradient probes).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf bound to a stored parameter; gradients flow back into the store.
    /// Frozen parameters join the tape as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Leaf, trainable, Some(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), ng, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng, None))
    }

    /// [m,n] plus a rank-1 (or [1,n]) bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "row broadcast of {:?} onto {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for i in 0..m {
            for j in 0..n {
                let v = out.data()[i * n + j] + bv.data()[j];
                out.data_mut()[i * n + j] = v;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "elementwise mul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng, None))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.scale(c);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, c), ng, None)
    }

    /// x plus a constant tensor (e.g. a causal mask); pass-through gradient.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let value = self.nodes[x.0].value.add(c)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::AddConst(x), ng, None))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.cols() == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let value = softmax_rows(xv);
        let ng = self.needs(x);
        Ok(self.push(value, Op::Softmax(x), ng, None))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.cols() == 0 {
            return Err(Error::shape("log_softmax over an empty axis"));
        }
        let value = log_softmax_rows(xv);
        let ng = self.needs(x);
        Ok(self.push(value, Op::LogSoftmax(x), ng, None))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.cols() < 2 {
            return Err(Error::shape(format!(
                "layer_norm needs width >= 2, got {:?}",
                xv.shape()
            )));
        }
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.numel() != xv.cols() || bv.numel() != xv.cols() {
            return Err(Error::shape(format!(
                "layer_norm gain/bias width {} / {} vs input {:?}",
                gv.numel(),
                bv.numel(),
                xv.shape()
            )));
        }
        let (value, inv_std, normed) = layer_norm_rows(xv, gv, bv, eps);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normed,
            },
            ng,
            None,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(crate::tensor::silu);
        let ng = self.needs(x);
        self.push(value, Op::Silu(x), ng, None)
    }

    /// Select rows of a table: embedding lookup / row gather.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (n, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Range(format!(
                "row index {bad} out of range for table with {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(tv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            ng,
            None,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts"));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.cols() != cols {
                return Err(Error::shape(format!(
                    "concat_rows width mismatch: {} vs {}",
                    pv.cols(),
                    cols
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng, None))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p.0].value.cols()).collect();
        for &p in parts {
            if self.nodes[p.0].value.rows() != rows {
                return Err(Error::shape("concat_cols height mismatch"));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.0].value;
            for i in 0..rows {
                let src = pv.row(i);
                out.data_mut()[i * total + offset..i * total + offset + w].copy_from_slice(src);
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng, None))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        if start + width > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} out of width {n}",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&xv.data()[i * n + start..i * n + start + width]);
        }
        let value = Tensor::new(vec![m, width], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, ng, None))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.transpose2d();
        let ng = self.needs(x);
        self.push(value, Op::Transpose(x), ng, None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.nodes[x.0].value.data() {
            s += v;
        }
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng, None)
    }

    /// Scalar: sum of x[r, c] over the given picks.
    pub fn pick_sum(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        let mut s = T::zero();
        for &(r, c) in picks {
            if r >= m || c >= n {
                return Err(Error::Range(format!(
                    "pick ({r},{c}) out of range for [{m},{n}]"
                )));
            }
            s += xv.at(r, c);
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::PickSum {
                x,
                picks: picks.to_vec(),
            },
            ng,
            None,
        ))
    }

    fn accum(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match self.nodes[v.0].grad.as_mut() {
            Some(slot) => slot.add_scaled(&g, T::one()),
            None => self.nodes[v.0].grad = Some(g),
        }
    }

    /// Populate gradients for every trainable parameter reachable from `loss`
    /// and scatter them into the store. `loss` must be a scalar.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(seed_shape, T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    if self.needs(a) {
                        let da = g.matmul_bt(&self.nodes[b.0].value)?;
                        self.accum(a, da);
                    }
                    if self.needs(b) {
                        let db = self.nodes[a.0].value.matmul_at(&g)?;
                        self.accum(b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.accum(a, g.clone());
                    self.accum(b, g);
                }
                Op::AddRow(x, bias) => {
                    if self.needs(bias) {
                        let (m, n) = (g.rows(), g.cols());
                        let bshape = self.nodes[bias.0].value.shape().to_vec();
                        let mut db = Tensor::zeros(bshape);
                        for i in 0..m {
                            for j in 0..n {
                                db.data_mut()[j] += g.at(i, j);
                            }
                        }
                        self.accum(bias, db);
                    }
                    self.accum(x, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let mut da = g.clone();
                        for (d, &bv) in da.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                            *d *= bv;
                        }
                        self.accum(a, da);
                    }
                    if self.needs(b) {
                        let mut db = g.clone();
                        for (d, &av) in db.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                            *d *= av;
                        }
                        self.accum(b, db);
                    }
                }
                Op::Scale(x, c) => {
                    self.accum(x, g.scale(c));
                }
                Op::AddConst(x) => {
                    self.accum(x, g);
                }
                Op::Softmax(x) => {
                    // dx = y .* (g - rowdot(g, y))
                    let y = &self.nodes[i].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mut dot = T::zero();
                        for (yv, gv) in yr.iter().zip(gr.iter()) {
                            dot += *yv * *gv;
                        }
                        for j in 0..n {
                            dx.data_mut()[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accum(x, dx);
                }
                Op::LogSoftmax(x) => {
                    // dx = g - softmax(x) * rowsum(g)
                    let y = &self.nodes[i].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        let gr = g.row(r);
                        let mut gsum = T::zero();
                        for &gv in gr {
                            gsum += gv;
                        }
                        let yr = y.row(r);
                        for j in 0..n {
                            dx.data_mut()[r * n + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    self.accum(x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    inv_std,
                    normed,
                } => {
                    let (m, n) = (g.rows(), g.cols());
                    let gv = self.nodes[gain.0].value.clone();
                    let nf = T::from_f64(n as f64);
                    if self.needs(gain) {
                        let mut dg = Tensor::zeros(gv.shape().to_vec());
                        for r in 0..m {
                            for j in 0..n {
                                dg.data_mut()[j] += g.at(r, j) * normed.at(r, j);
                            }
                        }
                        self.accum(gain, dg);
                    }
                    if self.needs(bias) {
                        let bshape = self.nodes[bias.0].value.shape().to_vec();
                        let mut db = Tensor::zeros(bshape);
                        for r in 0..m {
                            for j in 0..n {
                                db.data_mut()[j] += g.at(r, j);
                            }
                        }
                        self.accum(bias, db);
                    }
                    if self.needs(x) {
                        let mut dx = Tensor::zeros(vec![m, n]);
                        for r in 0..m {
                            let mut mean_d = T::zero();
                            let mut mean_dn = T::zero();
                            for j in 0..n {
                                let d = g.at(r, j) * gv.data()[j];
                                mean_d += d;
                                mean_dn += d * normed.at(r, j);
                            }
                            mean_d = mean_d / nf;
                            mean_dn = mean_dn / nf;
                            for j in 0..n {
                                let d = g.at(r, j) * gv.data()[j];
                                dx.data_mut()[r * n + j] =
                                    inv_std[r] * (d - mean_d - normed.at(r, j) * mean_dn);
                            }
                        }
                        self.accum(x, dx);
                    }
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *d *= s * (T::one() + v * (T::one() - s));
                    }
                    self.accum(x, dx);
                }
                Op::GatherRows { table, rows } => {
                    let tshape = self.nodes[table.0].value.shape().to_vec();
                    let d = self.nodes[table.0].value.cols();
                    let mut dt = Tensor::zeros(tshape);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dt.data_mut()[r * d + j] += g.at(k, j);
                        }
                    }
                    self.accum(table, dt);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut row = 0;
                    for p in parts {
                        let pr = self.nodes[p.0].value.rows();
                        if self.needs(p) {
                            let mut dp = Tensor::zeros(vec![pr, cols]);
                            dp.data_mut()
                                .copy_from_slice(&g.data()[row * cols..(row + pr) * cols]);
                            self.accum(p, dp);
                        }
                        row += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        if self.needs(p) {
                            let mut dp = Tensor::zeros(vec![rows, w]);
                            for r in 0..rows {
                                dp.data_mut()[r * w..(r + 1) * w]
                                    .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            self.accum(p, dp);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = (
                        self.nodes[x.0].value.rows(),
                        self.nodes[x.0].value.cols(),
                    );
                    let w = g.cols();
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        dx.data_mut()[r * n + start..r * n + start + w]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    self.accum(x, dx);
                }
                Op::Transpose(x) => {
                    self.accum(x, g.transpose2d());
                }
                Op::SumAll(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    self.accum(x, Tensor::full(shape, g.data()[0]));
                }
                Op::PickSum { x, picks } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let n = self.nodes[x.0].value.cols();
                    let mut dx = Tensor::zeros(shape);
                    for (r, c) in picks {
                        dx.data_mut()[r * n + c] += g.data()[0];
                    }
                    self.accum(x, dx);
                }
            }
        }

        for node in &self.nodes {
            if let (Some(pid), Some(g)) = (node.param, node.grad.as_ref()) {
                if store.is_trainable(pid) {
                    store.accumulate_grad(pid, g);
                }
            }
        }
        Ok(())
    }
}

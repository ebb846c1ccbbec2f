//! Reverse-mode differentiation tape over dense matrices.
//!
//! Every forward operation appends a node; `backward` walks the node list in
//! reverse and accumulates gradients. Parameters are registered by name so a
//! single backward pass yields gradients for the embedding, the recurrent
//! layers, and every classifier head at once, regardless of which of them the
//! loss actually touched.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::matrix::{Matrix, PROB_FLOOR};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddN(Vec<NodeId>),
    /// matrix (r, c) plus a (r, 1) vector added to every column
    AddBroadcastCol(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    SelectCol(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    /// rows of a table gathered into columns of the output
    Gather(NodeId, Vec<usize>),
    /// column-wise softmax
    SoftmaxCols(NodeId),
    /// summed -ln p[target_c] over columns; saves the probability matrix
    SoftmaxCrossEntropyCols(NodeId, Vec<usize>),
    /// per-column layer normalization: (x, gain, bias); saves x_hat and inv_std
    LayerNormCols(NodeId, NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
    saved: Vec<Matrix>,
}

/// Gradients for named parameters, produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct NamedGrads {
    entries: Vec<(String, Matrix)>,
}

impl NamedGrads {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

const LN_EPS: f64 = 1e-5;

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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.nodes[id].value.as_scalar()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value, saved: Vec::new() });
        self.nodes.len() - 1
    }

    fn push_saved(&mut self, op: Op, value: Matrix, saved: Vec<Matrix>) -> NodeId {
        self.nodes.push(Node { op, value, saved });
        self.nodes.len() - 1
    }

    /// Constant input; receives no exported gradient.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Named trainable parameter; its gradient appears in the backward result.
    pub fn param(&mut self, name: &str, value: Matrix) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push((name.to_string(), id));
        id
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.nodes[a].value.clone();
        value.add_scaled(&self.nodes[b].value, 1.0)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = *ids.first().ok_or_else(|| Error::Domain("add_n of no nodes".into()))?;
        let mut value = self.nodes[first].value.clone();
        for &id in &ids[1..] {
            if self.shape(id) != value.shape() {
                return Err(Error::Dimension(format!(
                    "add_n {:?} with {:?}",
                    value.shape(),
                    self.shape(id)
                )));
            }
            value.add_scaled(&self.nodes[id].value, 1.0)?;
        }
        Ok(self.push(Op::AddN(ids.to_vec()), value))
    }

    pub fn add_broadcast_col(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(m);
        if self.shape(v) != (rows, 1) {
            return Err(Error::Dimension(format!(
                "broadcast add of {:?} onto {:?}",
                self.shape(v),
                (rows, cols)
            )));
        }
        let mut value = self.nodes[m].value.clone();
        let vec = &self.nodes[v].value;
        for r in 0..rows {
            let add = vec.get(r, 0);
            for c in 0..cols {
                value.set(r, c, value.get(r, c) + add);
            }
        }
        Ok(self.push(Op::AddBroadcastCol(m, v), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "elementwise mul {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (rows, cols) = self.shape(a);
        let mut value = Matrix::zeros(rows, cols);
        for (o, (x, y)) in value
            .data_mut()
            .iter_mut()
            .zip(self.nodes[a].value.data().iter().zip(self.nodes[b].value.data().iter()))
        {
            *o = x * y;
        }
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.nodes[a].value.map(|v| k * v);
        self.push(Op::Scale(a, k), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = *ids.first().ok_or_else(|| Error::Domain("concat of no nodes".into()))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &id in ids {
            let (r, c) = self.shape(id);
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols rows {} with rows {}",
                    rows, r
                )));
            }
            cols += c;
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &id in ids {
            let m = &self.nodes[id].value;
            for r in 0..rows {
                for c in 0..m.cols() {
                    value.set(r, at + c, m.get(r, c));
                }
            }
            at += m.cols();
        }
        Ok(self.push(Op::ConcatCols(ids.to_vec()), value))
    }

    pub fn select_col(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let value = self.nodes[a].value.col_vector(col)?;
        Ok(self.push(Op::SelectCol(a, col), value))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if start + len > cols || len == 0 {
            return Err(Error::Index(format!(
                "column slice [{start}, {}) of a {rows}x{cols} matrix",
                start + len
            )));
        }
        let mut value = Matrix::zeros(rows, len);
        for r in 0..rows {
            for c in 0..len {
                value.set(r, c, self.nodes[a].value.get(r, start + c));
            }
        }
        Ok(self.push(Op::SliceCols(a, start, len), value))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if start + len > rows || len == 0 {
            return Err(Error::Index(format!(
                "row slice [{start}, {}) of a {rows}x{cols} matrix",
                start + len
            )));
        }
        let mut value = Matrix::zeros(len, cols);
        for r in 0..len {
            for c in 0..cols {
                value.set(r, c, self.nodes[a].value.get(start + r, c));
            }
        }
        Ok(self.push(Op::SliceRows(a, start, len), value))
    }

    /// Gather rows `ids` of a table into columns of a (table_cols, ids.len()) output.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Domain("gather of no rows".into()));
        }
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("gather row {id} of a {rows}x{cols} table")));
            }
        }
        let mut value = Matrix::zeros(cols, ids.len());
        for (j, &id) in ids.iter().enumerate() {
            for c in 0..cols {
                value.set(c, j, self.nodes[table].value.get(id, c));
            }
        }
        Ok(self.push(Op::Gather(table, ids.to_vec()), value))
    }

    pub fn softmax_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        let mut value = Matrix::zeros(rows, cols);
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| self.nodes[a].value.get(r, c)).collect();
            let p = crate::numeric::matrix::softmax(&col)?;
            for (r, &v) in p.iter().enumerate() {
                value.set(r, c, v);
            }
        }
        Ok(self.push(Op::SoftmaxCols(a), value))
    }

    /// Fused softmax + cross-entropy, one target class per column; the output
    /// is a 1x1 node holding the summed loss across columns.
    pub fn softmax_cross_entropy_cols(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != cols {
            return Err(Error::Dimension(format!(
                "{} targets for {} logit columns",
                targets.len(),
                cols
            )));
        }
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for c in 0..cols {
            let target = targets[c];
            if target >= rows {
                return Err(Error::Index(format!("target {target} with {rows} classes")));
            }
            let col: Vec<f64> = (0..rows).map(|r| self.nodes[logits].value.get(r, c)).collect();
            let p = crate::numeric::matrix::softmax(&col)?;
            total += -(p[target].max(PROB_FLOOR)).ln();
            for (r, &v) in p.iter().enumerate() {
                probs.set(r, c, v);
            }
        }
        Ok(self.push_saved(
            Op::SoftmaxCrossEntropyCols(logits, targets.to_vec()),
            Matrix::scalar(total),
            vec![probs],
        ))
    }

    /// Per-column layer normalization with learned gain and bias.
    pub fn layer_norm_cols(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (rows, 1) || self.shape(bias) != (rows, 1) {
            return Err(Error::Dimension(format!(
                "layer_norm gain {:?} / bias {:?} for input {:?}",
                self.shape(gain),
                self.shape(bias),
                (rows, cols)
            )));
        }
        if rows < 2 {
            return Err(Error::Domain(format!("layer_norm over {rows} feature(s)")));
        }
        let mut x_hat = Matrix::zeros(rows, cols);
        let mut inv_std = Matrix::zeros(1, cols);
        let mut value = Matrix::zeros(rows, cols);
        for c in 0..cols {
            let mut mean = 0.0;
            for r in 0..rows {
                mean += self.nodes[x].value.get(r, c);
            }
            mean /= rows as f64;
            let mut var = 0.0;
            for r in 0..rows {
                let d = self.nodes[x].value.get(r, c) - mean;
                var += d * d;
            }
            var /= rows as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std.set(0, c, istd);
            for r in 0..rows {
                let xh = (self.nodes[x].value.get(r, c) - mean) * istd;
                x_hat.set(r, c, xh);
                value.set(
                    r,
                    c,
                    self.nodes[gain].value.get(r, 0) * xh + self.nodes[bias].value.get(r, 0),
                );
            }
        }
        Ok(self.push_saved(Op::LayerNormCols(x, gain, bias), value, vec![x_hat, inv_std]))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// registered parameter (zero matrices for parameters the loss never saw).
    pub fn backward(&self, loss: NodeId) -> Result<NamedGrads> {
        if loss >= self.nodes.len() {
            return Err(Error::Index(format!("backward from node {loss} of {}", self.nodes.len())));
        }
        if self.nodes[loss].value.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Matrix::scalar(1.0));

        for id in (0..=loss).rev() {
            let dy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Put the gradient back for parameter export before propagating.
            grads[id] = Some(dy.clone());
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let bt = self.nodes[*b].value.transpose();
                    let da = dy.matmul(&bt)?;
                    accumulate(&mut grads, *a, da)?;
                    let at = self.nodes[*a].value.transpose();
                    let db = at.matmul(&dy)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone())?;
                    accumulate(&mut grads, *b, dy)?;
                }
                Op::AddN(ids) => {
                    for &i in ids {
                        accumulate(&mut grads, i, dy.clone())?;
                    }
                }
                Op::AddBroadcastCol(m, v) => {
                    accumulate(&mut grads, *m, dy.clone())?;
                    let mut dv = Matrix::zeros(dy.rows(), 1);
                    for r in 0..dy.rows() {
                        let mut s = 0.0;
                        for c in 0..dy.cols() {
                            s += dy.get(r, c);
                        }
                        dv.set(r, 0, s);
                    }
                    accumulate(&mut grads, *v, dv)?;
                }
                Op::Mul(a, b) => {
                    let mut da = dy.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.nodes[*b].value.data()) {
                        *x *= y;
                    }
                    accumulate(&mut grads, *a, da)?;
                    let mut db = dy;
                    for (x, y) in db.data_mut().iter_mut().zip(self.nodes[*a].value.data()) {
                        *x *= y;
                    }
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, dy.map(|v| v * k))?;
                }
                Op::Sigmoid(a) => {
                    let mut da = dy;
                    for (x, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Tanh(a) => {
                    let mut da = dy;
                    for (x, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, dy.transpose())?;
                }
                Op::ConcatCols(ids) => {
                    let mut at = 0;
                    for &i in ids {
                        let (rows, cols) = self.nodes[i].value.shape();
                        let mut di = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                di.set(r, c, dy.get(r, at + c));
                            }
                        }
                        accumulate(&mut grads, i, di)?;
                        at += cols;
                    }
                }
                Op::SelectCol(a, col) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut da = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        da.set(r, *col, dy.get(r, 0));
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SliceCols(a, start, len) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut da = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..*len {
                            da.set(r, start + c, dy.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SliceRows(a, start, len) => {
                    let (rows, cols) = self.nodes[*a].value.shape();
                    let mut da = Matrix::zeros(rows, cols);
                    for r in 0..*len {
                        for c in 0..cols {
                            da.set(start + r, c, dy.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.nodes[*table].value.shape();
                    let mut dt = Matrix::zeros(rows, cols);
                    for (j, &row) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt.set(row, c, dt.get(row, c) + dy.get(c, j));
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::SoftmaxCols(a) => {
                    // d logits = p .* (dy - sum(p .* dy)) per column
                    let p = &node.value;
                    let (rows, cols) = p.shape();
                    let mut da = Matrix::zeros(rows, cols);
                    for c in 0..cols {
                        let mut dot = 0.0;
                        for r in 0..rows {
                            dot += p.get(r, c) * dy.get(r, c);
                        }
                        for r in 0..rows {
                            da.set(r, c, p.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SoftmaxCrossEntropyCols(logits, targets) => {
                    let scale = dy.as_scalar()?;
                    let probs = &node.saved[0];
                    let (rows, cols) = probs.shape();
                    let mut da = Matrix::zeros(rows, cols);
                    for c in 0..cols {
                        for r in 0..rows {
                            let indicator = if r == targets[c] { 1.0 } else { 0.0 };
                            da.set(r, c, scale * (probs.get(r, c) - indicator));
                        }
                    }
                    accumulate(&mut grads, *logits, da)?;
                }
                Op::LayerNormCols(x, gain, bias) => {
                    let x_hat = &node.saved[0];
                    let inv_std = &node.saved[1];
                    let (rows, cols) = x_hat.shape();
                    let g = &self.nodes[*gain].value;
                    let mut dgain = Matrix::zeros(rows, 1);
                    let mut dbias = Matrix::zeros(rows, 1);
                    let mut dx = Matrix::zeros(rows, cols);
                    for c in 0..cols {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for r in 0..rows {
                            let d = dy.get(r, c);
                            dgain.set(r, 0, dgain.get(r, 0) + d * x_hat.get(r, c));
                            dbias.set(r, 0, dbias.get(r, 0) + d);
                            let dxhat = d * g.get(r, 0);
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * x_hat.get(r, c);
                        }
                        mean_dxhat /= rows as f64;
                        mean_dxhat_xhat /= rows as f64;
                        let istd = inv_std.get(0, c);
                        for r in 0..rows {
                            let dxhat = dy.get(r, c) * g.get(r, 0);
                            dx.set(
                                r,
                                c,
                                istd * (dxhat - mean_dxhat - x_hat.get(r, c) * mean_dxhat_xhat),
                            );
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dgain)?;
                    accumulate(&mut grads, *bias, dbias)?;
                }
            }
        }

        let mut entries = Vec::with_capacity(self.params.len());
        for (name, id) in &self.params {
            let g = match &grads[*id] {
                Some(g) => g.clone(),
                None => Matrix::zeros(self.nodes[*id].value.rows(), self.nodes[*id].value.cols()),
            };
            entries.push((name.clone(), g));
        }
        Ok(NamedGrads { entries })
    }

    /// Parameter node ids by name, for callers that registered params directly.
    pub fn param_ids(&self) -> HashMap<String, NodeId> {
        self.params.iter().cloned().collect()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) -> Result<()> {
    match &mut grads[id] {
        Some(g) => g.add_scaled(&delta, 1.0),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// One step of a standard LSTM cell, composed from tape primitives.
///
/// `w_input` is (4H, in), `w_hidden` is (4H, H), `bias` is (4H, 1); the gate
/// rows are ordered input, forget, output, candidate. Returns (h, c).
pub fn lstm_step(
    tape: &mut Tape,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    w_input: NodeId,
    w_hidden: NodeId,
    bias: NodeId,
) -> Result<(NodeId, NodeId)> {
    let four_h = tape.value(w_input).rows();
    if four_h % 4 != 0 {
        return Err(Error::Dimension(format!("lstm gate matrix with {four_h} rows")));
    }
    let h = four_h / 4;
    let from_x = tape.matmul(w_input, x)?;
    let from_h = tape.matmul(w_hidden, h_prev)?;
    let pre = tape.add_n(&[from_x, from_h, bias])?;
    let i_pre = tape.slice_rows(pre, 0, h)?;
    let f_pre = tape.slice_rows(pre, h, h)?;
    let o_pre = tape.slice_rows(pre, 2 * h, h)?;
    let g_pre = tape.slice_rows(pre, 3 * h, h)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h_out = tape.mul(o, c_act)?;
    Ok((h_out, c))
}

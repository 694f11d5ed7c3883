//! Reverse-mode autodiff on a per-step tape.
//!
//! A [`Tape`] records every forward op into a linear list of nodes, then
//! replays the list in reverse to propagate gradients. The tape is cheap to
//! build and is discarded after each training step; no graph survives across
//! steps. Matrix products go through `matrixmultiply::dgemm`, everything else
//! is straightforward elementwise code.

use crate::{Error, Result};

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddRow(ValueId, ValueId),
    Relu(ValueId),
    // y = c * tanh(x / c)
    SoftClamp(ValueId, f64),
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    },
    SoftmaxRows(ValueId),
    Embed {
        table: ValueId,
        ids: Vec<u32>,
    },
    MeanCrossEntropy {
        logits: ValueId,
        targets: Vec<usize>,
    },
    Sum(ValueId),
    Mean(ValueId),
    SumRows(ValueId),
    ConcatCols(ValueId, ValueId),
    Reshape(ValueId),
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    // xhat per element plus 1/sqrt(var + eps) per row
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    // row-wise softmax probabilities of the logits
    Probs(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    aux: Aux,
}

/// Row-major matrix product c += alpha * a @ b.
fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// The autodiff tape. Create one per step, record the forward pass, call
/// [`Tape::backward`] on a scalar, then read gradients with [`Tape::grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, aux: Aux) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            aux,
        });
        ValueId(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: ValueId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: ValueId) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: ValueId) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// Zero for nodes the loss does not reach.
    pub fn grad(&self, v: ValueId) -> &[f64] {
        static EMPTY: [f64; 0] = [];
        match &self.grads.get(v.0) {
            Some(Some(g)) => g,
            _ => &EMPTY,
        }
    }

    /// Gradient of `v`, or a zero vector when the loss does not reach it.
    pub fn grad_or_zeros(&self, v: ValueId) -> Vec<f64> {
        let n = self.nodes[v.0].data.len();
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; n],
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "leaf shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, Aux::None))
    }

    pub fn leaf_tensor(&mut self, t: &super::Tensor) -> ValueId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            Aux::None,
        )
    }

    fn dims2(&self, v: ValueId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        dgemm_rowmajor(
            m,
            ka,
            n,
            1.0,
            &self.nodes[a.0].data,
            false,
            &self.nodes[b.0].data,
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), Aux::None))
    }

    fn same_shape(&self, a: ValueId, b: ValueId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), Aux::None))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), Aux::None))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), Aux::None))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), Aux::None)
    }

    /// Adds a length-n bias row to every row of an [m, n] matrix.
    pub fn add_row(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += b[j];
            }
        }
        Ok(self.push(vec![m, n], data, Op::AddRow(a, bias), Aux::None))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), Aux::None)
    }

    /// Smoothly bounds values to (-c, c) via `c * tanh(x / c)`.
    pub fn soft_clamp(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "soft_clamp bound {c} must be positive"
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|x| c * (x / c).tanh())
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::SoftClamp(a, c), Aux::None))
    }

    /// Row-wise layer normalization with affine scale and shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = g[j] * xh + b[j];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm { x, gamma, beta },
            Aux::LayerNorm { xhat, inv_std },
        ))
    }

    /// Row-wise softmax, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let xd = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[r * n + j] /= denom;
            }
        }
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(a), Aux::None))
    }

    /// Gathers rows of an embedding table: output row i is `table[ids[i]]`.
    pub fn embed(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let (vocab, dim) = self.dims2(table, "embed")?;
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for vocab {vocab}"
                )));
            }
        }
        let td = &self.nodes[table.0].data;
        let mut out = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            out[i * dim..(i + 1) * dim]
                .copy_from_slice(&td[id as usize * dim..(id as usize + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            Aux::None,
        ))
    }

    /// Mean over rows of the cross-entropy between row-softmax(logits) and
    /// integer targets. Produces a scalar.
    pub fn mean_cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (m, n) = self.dims2(logits, "mean_cross_entropy")?;
        if targets.len() != m {
            return Err(Error::InvalidArgument(format!(
                "{m} logit rows but {} targets",
                targets.len()
            )));
        }
        let xd = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let t = targets[r];
            if t >= n {
                return Err(Error::InvalidArgument(format!(
                    "target {t} out of range for {n} classes"
                )));
            }
            let row = &xd[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                probs[r * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                probs[r * n + j] /= denom;
            }
            loss -= (row[t] - max - denom.ln()) / m as f64;
        }
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MeanCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Aux::Probs(probs),
        ))
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let s = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), Aux::None)
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let n = self.nodes[a.0].data.len().max(1);
        let s = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], Op::Mean(a), Aux::None)
    }

    /// Sums each row of an [m, n] matrix into an [m, 1] column.
    pub fn sum_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims2(a, "sum_rows")?;
        let xd = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..m).map(|r| xd[r * n..(r + 1) * n].iter().sum()).collect();
        Ok(self.push(vec![m, 1], data, Op::SumRows(a), Aux::None))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ma, na) = self.dims2(a, "concat_cols")?;
        let (mb, nb) = self.dims2(b, "concat_cols")?;
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let n = na + nb;
        let mut data = vec![0.0; ma * n];
        for r in 0..ma {
            data[r * n..r * n + na].copy_from_slice(&ad[r * na..(r + 1) * na]);
            data[r * n + na..(r + 1) * n].copy_from_slice(&bd[r * nb..(r + 1) * nb]);
        }
        Ok(self.push(vec![ma, n], data, Op::ConcatCols(a, b), Aux::None))
    }

    /// Reinterprets a value with a new shape of equal element count.
    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape(a), Aux::None))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn add_grad(grads: &mut [Option<Vec<f64>>], v: ValueId, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Propagates gradients from a scalar loss back through the tape.
    /// Rejects non-scalar targets.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward target must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let bd = self.nodes[b.0].data.clone();
                    let ad = self.nodes[a.0].data.clone();
                    let (a, b) = (*a, *b);
                    {
                        let ga = Self::add_grad(&mut grads, a, m * k);
                        dgemm_rowmajor(m, n, k, 1.0, &dy, false, &bd, true, 1.0, ga);
                    }
                    {
                        let gb = Self::add_grad(&mut grads, b, k * n);
                        dgemm_rowmajor(k, m, n, 1.0, &ad, true, &dy, false, 1.0, gb);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = Self::add_grad(&mut grads, a, dy.len());
                    for (g, d) in ga.iter_mut().zip(&dy) {
                        *g += d;
                    }
                    let gb = Self::add_grad(&mut grads, b, dy.len());
                    for (g, d) in gb.iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = Self::add_grad(&mut grads, a, dy.len());
                    for (g, d) in ga.iter_mut().zip(&dy) {
                        *g += d;
                    }
                    let gb = Self::add_grad(&mut grads, b, dy.len());
                    for (g, d) in gb.iter_mut().zip(&dy) {
                        *g -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ad = self.nodes[a.0].data.clone();
                    let bd = self.nodes[b.0].data.clone();
                    let ga = Self::add_grad(&mut grads, a, dy.len());
                    for j in 0..dy.len() {
                        ga[j] += dy[j] * bd[j];
                    }
                    let gb = Self::add_grad(&mut grads, b, dy.len());
                    for j in 0..dy.len() {
                        gb[j] += dy[j] * ad[j];
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let ga = Self::add_grad(&mut grads, a, dy.len());
                    for j in 0..dy.len() {
                        ga[j] += c * dy[j];
                    }
                }
                Op::AddRow(a, bias) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let (a, bias) = (*a, *bias);
                    let ga = Self::add_grad(&mut grads, a, m * n);
                    for j in 0..dy.len() {
                        ga[j] += dy[j];
                    }
                    let gb = Self::add_grad(&mut grads, bias, n);
                    for r in 0..m {
                        for j in 0..n {
                            gb[j] += dy[r * n + j];
                        }
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let xd = self.nodes[a.0].data.clone();
                    let ga = Self::add_grad(&mut grads, a, dy.len());
                    for j in 0..dy.len() {
                        if xd[j] > 0.0 {
                            ga[j] += dy[j];
                        }
                    }
                }
                Op::SoftClamp(a, c) => {
                    let (a, c) = (*a, *c);
                    let y = node.data.clone();
                    let ga = Self::add_grad(&mut grads, a, dy.len());
                    for j in 0..dy.len() {
                        let t = y[j] / c;
                        ga[j] += dy[j] * (1.0 - t * t);
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (xhat, inv_std) = match &node.aux {
                        Aux::LayerNorm { xhat, inv_std } => (xhat.clone(), inv_std.clone()),
                        _ => unreachable!("layer_norm aux missing"),
                    };
                    let gd = self.nodes[gamma.0].data.clone();
                    {
                        let gg = Self::add_grad(&mut grads, gamma, n);
                        for r in 0..m {
                            for j in 0..n {
                                gg[j] += dy[r * n + j] * xhat[r * n + j];
                            }
                        }
                    }
                    {
                        let gb = Self::add_grad(&mut grads, beta, n);
                        for r in 0..m {
                            for j in 0..n {
                                gb[j] += dy[r * n + j];
                            }
                        }
                    }
                    {
                        let gx = Self::add_grad(&mut grads, x, m * n);
                        for r in 0..m {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for j in 0..n {
                                let gj = dy[r * n + j] * gd[j];
                                mean_g += gj;
                                mean_gx += gj * xhat[r * n + j];
                            }
                            mean_g /= n as f64;
                            mean_gx /= n as f64;
                            for j in 0..n {
                                let gj = dy[r * n + j] * gd[j];
                                gx[r * n + j] +=
                                    inv_std[r] * (gj - mean_g - xhat[r * n + j] * mean_gx);
                            }
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let a = *a;
                    let y = node.data.clone();
                    let ga = Self::add_grad(&mut grads, a, m * n);
                    for r in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += dy[r * n + j] * y[r * n + j];
                        }
                        for j in 0..n {
                            ga[r * n + j] += y[r * n + j] * (dy[r * n + j] - dot);
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let dim = node.shape[1];
                    let (table, ids) = (*table, ids.clone());
                    let tlen = self.nodes[table.0].data.len();
                    let gt = Self::add_grad(&mut grads, table, tlen);
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = id as usize * dim;
                        for j in 0..dim {
                            gt[dst + j] += dy[i * dim + j];
                        }
                    }
                }
                Op::MeanCrossEntropy { logits, targets } => {
                    let (m, n) = (
                        self.nodes[logits.0].shape[0],
                        self.nodes[logits.0].shape[1],
                    );
                    let (logits, targets) = (*logits, targets.clone());
                    let probs = match &node.aux {
                        Aux::Probs(p) => p.clone(),
                        _ => unreachable!("cross-entropy aux missing"),
                    };
                    let up = dy[0] / m as f64;
                    let gl = Self::add_grad(&mut grads, logits, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                            gl[r * n + j] += up * (probs[r * n + j] - indicator);
                        }
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    let len = self.nodes[a.0].data.len();
                    let ga = Self::add_grad(&mut grads, a, len);
                    for g in ga.iter_mut() {
                        *g += dy[0];
                    }
                }
                Op::Mean(a) => {
                    let a = *a;
                    let len = self.nodes[a.0].data.len();
                    let up = dy[0] / len.max(1) as f64;
                    let ga = Self::add_grad(&mut grads, a, len);
                    for g in ga.iter_mut() {
                        *g += up;
                    }
                }
                Op::SumRows(a) => {
                    let a = *a;
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let ga = Self::add_grad(&mut grads, a, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] += dy[r];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let m = node.shape[0];
                    let na = self.nodes[a.0].shape[1];
                    let nb = self.nodes[b.0].shape[1];
                    let n = na + nb;
                    {
                        let ga = Self::add_grad(&mut grads, a, m * na);
                        for r in 0..m {
                            for j in 0..na {
                                ga[r * na + j] += dy[r * n + j];
                            }
                        }
                    }
                    {
                        let gb = Self::add_grad(&mut grads, b, m * nb);
                        for r in 0..m {
                            for j in 0..nb {
                                gb[r * nb + j] += dy[r * n + na + j];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let ga = Self::add_grad(&mut grads, a, dy.len());
                    for (g, d) in ga.iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
            }
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }
}

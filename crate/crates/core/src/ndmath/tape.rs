//! Wengert tape: primitives are recorded during the forward pass and replayed
//! in exact reverse order by [`Tape::backward`].
//!
//! Gradients accumulate (add, never overwrite) into the grad slot of every
//! tensor that was registered with `requires_grad`; clearing is an explicit
//! [`Tape::zero_grads`] step.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Loss probabilities are clamped to `[EPS_PROB, 1 - EPS_PROB]` before logs.
pub const EPS_PROB: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// C = A B
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    /// Y = A^T
    Transpose {
        a: TensorId,
    },
    /// y = 1 / (1 + exp(-x)), elementwise
    Sigmoid {
        a: TensorId,
    },
    /// c * A
    Scale {
        a: TensorId,
        c: f64,
    },
    /// A + B, same shape
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// A + broadcast row, row is 1 x cols
    AddRowBroadcast {
        a: TensorId,
        row: TensorId,
    },
    /// Row-wise masked softmax with max-subtraction; masked entries are exactly 0.
    /// `exclude_diag` additionally bans column i in row i (square input), falling
    /// back to the diagonal when it is the only admissible entry in its row.
    SoftmaxRow {
        a: TensorId,
        mask: Option<Vec<bool>>,
        exclude_diag: bool,
    },
    /// out[i] = table[indices[i]], scatter-add backward
    GatherRows {
        table: TensorId,
        indices: Vec<usize>,
    },
    /// [A | B] along columns
    ConcatCols {
        a: TensorId,
        b: TensorId,
    },
    /// alpha_i = (1/t_valid) * sum_{j valid, j != i} C[i][j]; 0 on masked rows
    MaskedMeanOffDiag {
        c: TensorId,
        mask: Vec<bool>,
    },
    /// scores[j] = z . table[j + 1]; row 0 of the table (padding) is skipped
    CandidateScores {
        z: TensorId,
        table: TensorId,
    },
    /// Scalar sum of all entries
    Sum {
        a: TensorId,
    },
    /// Mean of scalar inputs
    MeanScalars {
        items: Vec<TensorId>,
    },
    /// Binary cross-entropy against a one-hot target, summed over all entries
    BceLoss {
        probs: TensorId,
        target: usize,
    },
    /// Negative log-likelihood of the target entry
    NllLoss {
        probs: TensorId,
        target: usize,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications in order; replaying backward visits them in
/// exact reverse order of recording.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients are produced for it iff it was
    /// marked `with_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn out(
        &mut self,
        op: &'static str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        parents_need: bool,
        node_op: Op,
    ) -> Result<TensorId> {
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op,
                index: idx,
                value: data[idx],
            });
        }
        let tensor = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(tensor, node_op, parents_need))
    }

    // ── Primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left_rows: ta.rows(),
                left_cols: ta.cols(),
                right_rows: tb.rows(),
                right_cols: tb.cols(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.out("matmul", m, n, data, needs, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.out("transpose", n, m, data, needs, Op::Transpose { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let (m, n) = (ta.rows(), ta.cols());
        let needs = self.needs(a);
        self.out("sigmoid", m, n, data, needs, Op::Sigmoid { a })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| c * x).collect();
        let (m, n) = (ta.rows(), ta.cols());
        let needs = self.needs(a);
        self.out("scale", m, n, data, needs, Op::Scale { a, c })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(Error::Shape {
                op: "add",
                left_rows: ta.rows(),
                left_cols: ta.cols(),
                right_rows: tb.rows(),
                right_cols: tb.cols(),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let (m, n) = (ta.rows(), ta.cols());
        let needs = self.needs(a) || self.needs(b);
        self.out("add", m, n, data, needs, Op::Add { a, b })
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left_rows: ta.rows(),
                left_cols: ta.cols(),
                right_rows: tr.rows(),
                right_cols: tr.cols(),
            });
        }
        let n = ta.cols();
        let mut data = Vec::with_capacity(ta.numel());
        for i in 0..ta.rows() {
            for j in 0..n {
                data.push(ta.data()[i * n + j] + tr.data()[j]);
            }
        }
        let (m, _) = (ta.rows(), ta.cols());
        let needs = self.needs(a) || self.needs(row);
        self.out(
            "add_row_broadcast",
            m,
            n,
            data,
            needs,
            Op::AddRowBroadcast { a, row },
        )
    }

    /// Masked row softmax. `mask[j] == false` forces probability exactly 0 in
    /// column j of every row. Requires at least one admissible entry per row.
    pub fn softmax_row(&mut self, a: TensorId, mask: Option<&[bool]>) -> Result<TensorId> {
        self.softmax_row_impl(a, mask, false)
    }

    /// Row softmax that additionally masks the diagonal, for self-affinity
    /// attention. A row whose only admissible entry is its own diagonal keeps
    /// it (a one-item session can only attend to itself).
    pub fn softmax_row_no_diag(&mut self, a: TensorId, mask: Option<&[bool]>) -> Result<TensorId> {
        self.softmax_row_impl(a, mask, true)
    }

    fn softmax_row_impl(
        &mut self,
        a: TensorId,
        mask: Option<&[bool]>,
        exclude_diag: bool,
    ) -> Result<TensorId> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if let Some(mk) = mask {
            if mk.len() != n {
                return Err(Error::contract(format!(
                    "softmax mask length {} does not match {} columns",
                    mk.len(),
                    n
                )));
            }
        }
        if exclude_diag && m != n {
            return Err(Error::contract(format!(
                "diagonal masking requires a square matrix, got {m}x{n}"
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let admissible = |j: usize| -> bool {
                mask.map(|mk| mk[j]).unwrap_or(true)
                    && !(exclude_diag && j == i && !diag_fallback(mask, n, i))
            };
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if admissible(j) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return Err(Error::DegenerateRow { row: i });
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if admissible(j) {
                    let e = (v - max).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let needs = self.needs(a);
        self.out(
            "softmax_row",
            m,
            n,
            data,
            needs,
            Op::SoftmaxRow {
                a,
                mask: mask.map(|m| m.to_vec()),
                exclude_diag,
            },
        )
    }

    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let tt = self.value(table);
        let (rows, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            data.extend_from_slice(&tt.data()[idx * d..(idx + 1) * d]);
        }
        let needs = self.needs(table);
        self.out(
            "gather_rows",
            indices.len(),
            d,
            data,
            needs,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                left_rows: ta.rows(),
                left_cols: ta.cols(),
                right_rows: tb.rows(),
                right_cols: tb.cols(),
            });
        }
        let (m, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.out(
            "concat_cols",
            m,
            ca + cb,
            data,
            needs,
            Op::ConcatCols { a, b },
        )
    }

    /// Average off-diagonal affinity per row: the mean over the valid columns
    /// j != i, divided by the count of valid positions. Masked rows yield 0.
    pub fn masked_mean_offdiag(&mut self, c: TensorId, mask: &[bool]) -> Result<TensorId> {
        let tc = self.value(c);
        let t = tc.rows();
        if tc.cols() != t {
            return Err(Error::contract(format!(
                "affinity matrix must be square, got {}x{}",
                tc.rows(),
                tc.cols()
            )));
        }
        if mask.len() != t {
            return Err(Error::contract(format!(
                "mask length {} does not match affinity size {t}",
                mask.len()
            )));
        }
        let t_valid = mask.iter().filter(|&&v| v).count();
        if t_valid == 0 {
            return Err(Error::DegenerateRow { row: 0 });
        }
        let mut data = vec![0.0; t];
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &tc.data()[i * t..(i + 1) * t];
            let s: f64 = row
                .iter()
                .zip(mask)
                .enumerate()
                .filter(|(j, (_, &valid))| valid && *j != i)
                .map(|(_, (&v, _))| v)
                .sum();
            data[i] = s / t_valid as f64;
        }
        let needs = self.needs(c);
        self.out(
            "masked_mean_offdiag",
            1,
            t,
            data,
            needs,
            Op::MaskedMeanOffDiag {
                c,
                mask: mask.to_vec(),
            },
        )
    }

    /// Preference score of every candidate item: dot of `z` with each row of
    /// the table except row 0, which is the padding row.
    pub fn candidate_scores(&mut self, z: TensorId, table: TensorId) -> Result<TensorId> {
        let (tz, tt) = (self.value(z), self.value(table));
        if tz.rows() != 1 || tz.cols() != tt.cols() {
            return Err(Error::Shape {
                op: "candidate_scores",
                left_rows: tz.rows(),
                left_cols: tz.cols(),
                right_rows: tt.rows(),
                right_cols: tt.cols(),
            });
        }
        if tt.rows() < 2 {
            return Err(Error::contract(
                "embedding table needs a padding row plus at least one item",
            ));
        }
        let d = tt.cols();
        let n = tt.rows() - 1;
        let data: Vec<f64> = tt.data()[d..]
            .chunks_exact(d)
            .map(|row| tz.data().iter().zip(row).map(|(a, b)| a * b).sum())
            .collect();
        debug_assert_eq!(data.len(), n);
        let needs = self.needs(z) || self.needs(table);
        self.out(
            "candidate_scores",
            1,
            n,
            data,
            needs,
            Op::CandidateScores { z, table },
        )
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum();
        let needs = self.needs(a);
        self.out("sum", 1, 1, vec![s], needs, Op::Sum { a })
    }

    pub fn mean_scalars(&mut self, items: &[TensorId]) -> Result<TensorId> {
        if items.is_empty() {
            return Err(Error::contract("mean of zero scalars"));
        }
        let mut s = 0.0;
        let mut needs = false;
        for &id in items {
            let t = self.value(id);
            if t.numel() != 1 {
                return Err(Error::contract(format!(
                    "mean_scalars expects 1x1 inputs, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            s += t.data()[0];
            needs |= self.needs(id);
        }
        let mean = s / items.len() as f64;
        self.out(
            "mean_scalars",
            1,
            1,
            vec![mean],
            needs,
            Op::MeanScalars {
                items: items.to_vec(),
            },
        )
    }

    /// Binary cross-entropy against a one-hot target over a probability row:
    /// `-sum_i [y_i ln p_i + (1 - y_i) ln (1 - p_i)]` with clamped probabilities.
    pub fn bce_loss(&mut self, probs: TensorId, target: usize) -> Result<TensorId> {
        let tp = self.value(probs);
        check_loss_input(tp, target)?;
        let mut loss = 0.0;
        for (j, &p) in tp.data().iter().enumerate() {
            let p = p.clamp(EPS_PROB, 1.0 - EPS_PROB);
            if j == target {
                loss -= p.ln();
            } else {
                loss -= (1.0 - p).ln();
            }
        }
        let needs = self.needs(probs);
        self.out(
            "bce_loss",
            1,
            1,
            vec![loss],
            needs,
            Op::BceLoss { probs, target },
        )
    }

    /// Categorical cross-entropy: `-ln p_target` with clamping.
    pub fn nll_loss(&mut self, probs: TensorId, target: usize) -> Result<TensorId> {
        let tp = self.value(probs);
        check_loss_input(tp, target)?;
        let p = tp.data()[target].clamp(EPS_PROB, 1.0 - EPS_PROB);
        let needs = self.needs(probs);
        self.out(
            "nll_loss",
            1,
            1,
            vec![-p.ln()],
            needs,
            Op::NllLoss { probs, target },
        )
    }

    // ── Reverse pass ────────────────────────────────────────────────────

    /// Backpropagate from a scalar loss. Gradients are added into the grad
    /// slot of every `requires_grad` tensor on the tape; calling twice
    /// without `zero_grads` doubles them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss tensor is not on this tape"));
        }
        {
            let t = self.value(loss);
            if t.rows() != 1 || t.cols() != 1 {
                return Err(Error::contract(format!(
                    "backward requires a 1x1 loss, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
        }

        // Fresh per-call propagation buffers; only the final per-leaf results
        // accumulate into the persistent grad slots.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[i].tensor.requires_grad() {
                        self.nodes[i].tensor.accumulate_grad(&g);
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).cols();
                    if self.needs(a) {
                        // dA = G B^T
                        let bd = self.value(b).data();
                        let mut da = vec![0.0; m * k];
                        for i2 in 0..m {
                            for j in 0..n {
                                let gv = g[i2 * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i2 * k + p] += gv * bd[p * n + j];
                                }
                            }
                        }
                        accumulate(&mut adj, a.0, da);
                    }
                    if self.needs(b) {
                        // dB = A^T G
                        let ad = self.value(a).data();
                        let mut db = vec![0.0; k * n];
                        for i2 in 0..m {
                            for p in 0..k {
                                let av = ad[i2 * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += av * g[i2 * n + j];
                                }
                            }
                        }
                        accumulate(&mut adj, b.0, db);
                    }
                }
                Op::Transpose { a } => {
                    if self.needs(a) {
                        let (m, n) = (self.value(a).rows(), self.value(a).cols());
                        let mut da = vec![0.0; m * n];
                        for r in 0..n {
                            for c in 0..m {
                                da[c * n + r] = g[r * m + c];
                            }
                        }
                        accumulate(&mut adj, a.0, da);
                    }
                }
                Op::Sigmoid { a } => {
                    if self.needs(a) {
                        let y = self.nodes[i].tensor.data();
                        let da: Vec<f64> =
                            y.iter().zip(&g).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                        accumulate(&mut adj, a.0, da);
                    }
                }
                Op::Scale { a, c } => {
                    if self.needs(a) {
                        accumulate(&mut adj, a.0, g.iter().map(|&v| c * v).collect());
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut adj, a.0, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut adj, b.0, g);
                    }
                }
                Op::AddRowBroadcast { a, row } => {
                    let n = self.value(row).cols();
                    if self.needs(row) {
                        let mut dr = vec![0.0; n];
                        for (idx, &gv) in g.iter().enumerate() {
                            dr[idx % n] += gv;
                        }
                        accumulate(&mut adj, row.0, dr);
                    }
                    if self.needs(a) {
                        accumulate(&mut adj, a.0, g);
                    }
                }
                Op::SoftmaxRow { a, .. } => {
                    if self.needs(a) {
                        let y = self.nodes[i].tensor.data();
                        let n = self.nodes[i].tensor.cols();
                        let rows = self.nodes[i].tensor.rows();
                        let mut da = vec![0.0; rows * n];
                        for r in 0..rows {
                            let base = r * n;
                            let dot: f64 = (0..n).map(|j| g[base + j] * y[base + j]).sum();
                            for j in 0..n {
                                // y is exactly 0 on masked entries, which also
                                // zeroes their gradient.
                                da[base + j] = y[base + j] * (g[base + j] - dot);
                            }
                        }
                        accumulate(&mut adj, a.0, da);
                    }
                }
                Op::GatherRows { table, indices } => {
                    if self.needs(table) {
                        let d = self.value(table).cols();
                        let rows = self.value(table).rows();
                        let mut dt = vec![0.0; rows * d];
                        for (r, &idx) in indices.iter().enumerate() {
                            for c in 0..d {
                                dt[idx * d + c] += g[r * d + c];
                            }
                        }
                        accumulate(&mut adj, table.0, dt);
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (m, ca) = (self.value(a).rows(), self.value(a).cols());
                    let cb = self.value(b).cols();
                    let w = ca + cb;
                    if self.needs(a) {
                        let mut da = vec![0.0; m * ca];
                        for r in 0..m {
                            da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * w..r * w + ca]);
                        }
                        accumulate(&mut adj, a.0, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; m * cb];
                        for r in 0..m {
                            db[r * cb..(r + 1) * cb].copy_from_slice(&g[r * w + ca..(r + 1) * w]);
                        }
                        accumulate(&mut adj, b.0, db);
                    }
                }
                Op::MaskedMeanOffDiag { c, mask } => {
                    if self.needs(c) {
                        let t = mask.len();
                        let t_valid = mask.iter().filter(|&&v| v).count() as f64;
                        let mut dc = vec![0.0; t * t];
                        for i2 in 0..t {
                            if !mask[i2] {
                                continue;
                            }
                            let gv = g[i2] / t_valid;
                            for j in 0..t {
                                if j != i2 && mask[j] {
                                    dc[i2 * t + j] = gv;
                                }
                            }
                        }
                        accumulate(&mut adj, c.0, dc);
                    }
                }
                Op::CandidateScores { z, table } => {
                    let d = self.value(table).cols();
                    let n = self.value(table).rows() - 1;
                    if self.needs(z) {
                        let td = self.value(table).data();
                        let mut dz = vec![0.0; d];
                        for j in 0..n {
                            let gv = g[j];
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &td[(j + 1) * d..(j + 2) * d];
                            for c in 0..d {
                                dz[c] += gv * row[c];
                            }
                        }
                        accumulate(&mut adj, z.0, dz);
                    }
                    if self.needs(table) {
                        let zd = self.value(z).data().to_vec();
                        let rows = self.value(table).rows();
                        let mut dt = vec![0.0; rows * d];
                        for j in 0..n {
                            let gv = g[j];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                dt[(j + 1) * d + c] += gv * zd[c];
                            }
                        }
                        accumulate(&mut adj, table.0, dt);
                    }
                }
                Op::Sum { a } => {
                    if self.needs(a) {
                        let numel = self.value(a).numel();
                        accumulate(&mut adj, a.0, vec![g[0]; numel]);
                    }
                }
                Op::MeanScalars { items } => {
                    let share = g[0] / items.len() as f64;
                    for id in items {
                        if self.needs(id) {
                            accumulate(&mut adj, id.0, vec![share]);
                        }
                    }
                }
                Op::BceLoss { probs, target } => {
                    if self.needs(probs) {
                        let pd = self.value(probs).data();
                        let mut dp = vec![0.0; pd.len()];
                        for (j, &p) in pd.iter().enumerate() {
                            if p <= EPS_PROB || p >= 1.0 - EPS_PROB {
                                continue; // clamped region: flat
                            }
                            dp[j] = if j == target {
                                -1.0 / p
                            } else {
                                1.0 / (1.0 - p)
                            };
                            dp[j] *= g[0];
                        }
                        accumulate(&mut adj, probs.0, dp);
                    }
                }
                Op::NllLoss { probs, target } => {
                    if self.needs(probs) {
                        let pd = self.value(probs).data();
                        let mut dp = vec![0.0; pd.len()];
                        let p = pd[target];
                        if p > EPS_PROB && p < 1.0 - EPS_PROB {
                            dp[target] = -g[0] / p;
                        }
                        accumulate(&mut adj, probs.0, dp);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, delta: Vec<f64>) {
    match &mut adj[idx] {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(&delta) {
                *b += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Whether row `i`'s diagonal must be kept because nothing else is admissible.
fn diag_fallback(mask: Option<&[bool]>, n: usize, i: usize) -> bool {
    match mask {
        None => n == 1,
        Some(mk) => !mk.iter().enumerate().any(|(j, &v)| v && j != i),
    }
}

fn check_loss_input(t: &Tensor, target: usize) -> Result<()> {
    if t.rows() != 1 {
        return Err(Error::contract(format!(
            "loss expects a 1xn probability row, got {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    if target >= t.cols() {
        return Err(Error::contract(format!(
            "target index {target} out of range for {} candidates",
            t.cols()
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

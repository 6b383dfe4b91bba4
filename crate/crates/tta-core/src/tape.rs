//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Define-by-run: each forward op appends a node to the tape, so node ids
//! are already in topological order and `backward` is a single reverse
//! sweep. A tape lives for one batch and is dropped afterwards.
//!
//! The op set is exactly what the adaptation pipeline needs; there is no
//! general broadcasting and no graph reuse.

use crate::error::{Result, TtaError};
use crate::tensor::{
    check_probability_rows, matmul_kernel, softmax_kernel, Tensor, PROB_FLOOR,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// How a normalization op obtains its statistics.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Per-feature mean/var of the current batch (gradient flows through
    /// the statistics).
    PerBatch,
    /// Per-sample mean/var over features (layer norm).
    PerRow,
    /// Frozen per-feature statistics (running estimates); treated as
    /// constants by the backward pass.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

/// Forward-pass values a normalization node keeps for its backward rule.
#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    /// Per feature for batch/fixed statistics, per row for layer norm.
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    per_row: bool,
    fixed: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        trainable: bool,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
        /// b is a rank-1 bias added to every row of a.
        row_broadcast: bool,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Normalization {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: NormCache,
    },
    Softmax {
        x: usize,
    },
    LogSoftmax {
        x: usize,
    },
    SoftmaxXent {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Entropy {
        probs: usize,
    },
    KlDiv {
        p: usize,
        q: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Detach {
        x: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node[id.0].take()
    }
}

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, check: &'static str) -> Result<NodeId> {
        value.check_finite(check)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant input: participates in values, never in the gradient map.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf { trainable: false }, value, "constant")
    }

    /// Trainable leaf: `backward` reports its gradient.
    pub fn trainable(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf { trainable: true }, value, "trainable")
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// A[m,k] · B[k,n] -> [m,n], or A[m,k] · v[k] -> [m].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        let (m, k) = match ash {
            [m, k] => (*m, *k),
            _ => {
                return Err(TtaError::ShapeMismatch {
                    op: "matmul",
                    expected: "rank-2 lhs".into(),
                    got: format!("{ash:?}"),
                })
            }
        };
        let (n, vec_rhs) = match bsh {
            [kk, n] if *kk == k => (*n, false),
            [kk] if *kk == k => (1, true),
            _ => {
                return Err(TtaError::ShapeMismatch {
                    op: "matmul",
                    expected: format!("[{k}, n] or [{k}]"),
                    got: format!("{bsh:?}"),
                })
            }
        };
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        self.push(Op::Matmul { a: a.0, b: b.0, m, k, n }, Tensor::new(shape, data)?, "matmul")
    }

    /// Elementwise add of equal shapes, or bias add of a rank-1 [n] onto
    /// every row of a [B,n] matrix.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            let t = Tensor::new(av.shape().to_vec(), data)?;
            return self.push(Op::Add { a: a.0, b: b.0, row_broadcast: false }, t, "add");
        }
        if av.shape().len() == 2 && bv.shape() == [av.cols()] {
            let (rows, cols) = (av.rows(), av.cols());
            let mut data = av.data().to_vec();
            for r in 0..rows {
                for j in 0..cols {
                    data[r * cols + j] += bv.data()[j];
                }
            }
            let t = Tensor::new(vec![rows, cols], data)?;
            return self.push(Op::Add { a: a.0, b: b.0, row_broadcast: true }, t, "add");
        }
        Err(TtaError::ShapeMismatch {
            op: "add",
            expected: format!("{:?}", av.shape()),
            got: format!("{:?}", bv.shape()),
        })
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TtaError::ShapeMismatch {
                op: "mul",
                expected: format!("{:?}", av.shape()),
                got: format!("{:?}", bv.shape()),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Mul { a: a.0, b: b.0 }, t, "mul")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(Op::Relu { x: x.0 }, t, "relu")
    }

    /// gamma ⊙ normalize(x) + beta over a [B,d] activation matrix.
    pub fn normalization(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(TtaError::ShapeMismatch {
                op: "normalization",
                expected: "rank-2 input".into(),
                got: format!("{:?}", xv.shape()),
            });
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [cols] {
                return Err(TtaError::ShapeMismatch {
                    op: "normalization",
                    expected: format!("{name} of shape [{cols}]"),
                    got: format!("{:?}", self.value(id).shape()),
                });
            }
        }

        let xd = xv.data();
        let mut xhat = vec![0.0; rows * cols];
        let (mean, var, inv_std, per_row, fixed);
        match stats {
            NormStats::PerBatch => {
                let mut m = vec![0.0; cols];
                let mut v = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        m[j] += xd[r * cols + j];
                    }
                }
                for mj in m.iter_mut() {
                    *mj /= rows as f64;
                }
                for r in 0..rows {
                    for j in 0..cols {
                        let d = xd[r * cols + j] - m[j];
                        v[j] += d * d;
                    }
                }
                for vj in v.iter_mut() {
                    *vj /= rows as f64;
                }
                let istd: Vec<f64> = v.iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();
                for r in 0..rows {
                    for j in 0..cols {
                        xhat[r * cols + j] = (xd[r * cols + j] - m[j]) * istd[j];
                    }
                }
                mean = m;
                var = v;
                inv_std = istd;
                per_row = false;
                fixed = false;
            }
            NormStats::Fixed { mean: m, var: v } => {
                if m.len() != cols || v.len() != cols {
                    return Err(TtaError::ShapeMismatch {
                        op: "normalization",
                        expected: format!("fixed stats of length {cols}"),
                        got: format!("{}/{}", m.len(), v.len()),
                    });
                }
                let istd: Vec<f64> = v.iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();
                for r in 0..rows {
                    for j in 0..cols {
                        xhat[r * cols + j] = (xd[r * cols + j] - m[j]) * istd[j];
                    }
                }
                mean = m;
                var = v;
                inv_std = istd;
                per_row = false;
                fixed = true;
            }
            NormStats::PerRow => {
                let mut m = vec![0.0; rows];
                let mut v = vec![0.0; rows];
                let mut istd = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let mu = row.iter().sum::<f64>() / cols as f64;
                    let va = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / cols as f64;
                    m[r] = mu;
                    v[r] = va;
                    istd[r] = 1.0 / (va + eps).sqrt();
                    for j in 0..cols {
                        xhat[r * cols + j] = (row[j] - mu) * istd[r];
                    }
                }
                mean = m;
                var = v;
                inv_std = istd;
                per_row = true;
                fixed = false;
            }
        }

        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = gd[j] * xhat[r * cols + j] + bd[j];
            }
        }
        let cache = NormCache { xhat, inv_std, mean, var, per_row, fixed };
        self.push(
            Op::Normalization { x: x.0, gamma: gamma.0, beta: beta.0, cache },
            Tensor::new(vec![rows, cols], out)?,
            "normalization",
        )
    }

    /// Batch statistics computed by a `PerBatch` normalization node
    /// (per-feature mean, per-feature variance). Used by source training to
    /// maintain running estimates.
    pub fn norm_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::Normalization { cache, .. } if !cache.per_row && !cache.fixed => {
                Some((&cache.mean, &cache.var))
            }
            _ => None,
        }
    }

    /// Row-wise max-shifted softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows * cols];
        softmax_kernel(rows, cols, v.data(), &mut out);
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Softmax { x: x.0 }, t, "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln() + max;
            for j in 0..cols {
                out[r * cols + j] = row[j] - lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::LogSoftmax { x: x.0 }, t, "log_softmax")
    }

    /// Mean cross-entropy of hard labels against softmax(logits); scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (rows, cols) = (v.rows(), v.cols());
        if labels.len() != rows {
            return Err(TtaError::ShapeMismatch {
                op: "softmax_cross_entropy",
                expected: format!("{rows} labels"),
                got: format!("{}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(TtaError::invalid(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut probs = vec![0.0; rows * cols];
        softmax_kernel(rows, cols, v.data(), &mut probs);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&a| (a - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y];
        }
        loss /= rows as f64;
        self.push(
            Op::SoftmaxXent { logits: logits.0, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
            "softmax_cross_entropy",
        )
    }

    /// Per-row Shannon entropy of a probability matrix: [B,C] -> [B]
    /// (a single row yields a scalar).
    pub fn entropy(&mut self, probs: NodeId) -> Result<NodeId> {
        let v = self.value(probs);
        check_probability_rows(v, "entropy")?;
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = crate::tensor::entropy_of_probs(&v.data()[r * cols..(r + 1) * cols]);
        }
        self.push(Op::Entropy { probs: probs.0 }, Tensor::new(vec![rows], out)?, "entropy")
    }

    /// Per-row KL(p || q) of two probability matrices; gradient flows into
    /// both arguments.
    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(TtaError::ShapeMismatch {
                op: "kl_divergence",
                expected: format!("{:?}", pv.shape()),
                got: format!("{:?}", qv.shape()),
            });
        }
        check_probability_rows(pv, "kl_divergence")?;
        check_probability_rows(qv, "kl_divergence")?;
        let (rows, cols) = (pv.rows(), pv.cols());
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = crate::tensor::kl_of_probs(
                &pv.data()[r * cols..(r + 1) * cols],
                &qv.data()[r * cols..(r + 1) * cols],
            );
        }
        self.push(Op::KlDiv { p: p.0, q: q.0 }, Tensor::new(vec![rows], out)?, "kl_divergence")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(Op::Scale { x: x.0, c }, t, "scale")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TtaError::EmptyInput { what: "mean" });
        }
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean { x: x.0 }, Tensor::scalar(s), "mean")
    }

    /// Propagates the value, blocks the gradient.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.push(Op::Detach { x: x.0 }, v, "detach")
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns per-node gradients; leaves
    /// behind a detach barrier receive none.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(TtaError::NotScalar { len: root_val.numel() });
        }
        let mut by_node: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        by_node[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = by_node[i].take() else { continue };
            self.step_backward(i, &g, &mut by_node)?;
            by_node[i] = Some(g);
        }
        Ok(Grads { by_node })
    }

    fn accumulate(&self, by_node: &mut [Option<Tensor>], idx: usize, add: &[f64]) {
        // Constants never feed an optimizer; skip their gradient buffers.
        if matches!(self.nodes[idx].op, Op::Leaf { trainable: false }) {
            return;
        }
        let slot = &mut by_node[idx];
        match slot {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(add) {
                    *a += b;
                }
            }
            None => {
                let mut t = Tensor::zeros(self.nodes[idx].value.shape().to_vec());
                t.data_mut().copy_from_slice(add);
                *slot = Some(t);
            }
        }
    }

    /// Node references feeding `id`; a leaf has none. Inputs always precede
    /// their consumer, which keeps the tape acyclic.
    pub fn op_inputs(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf { .. } => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b } => {
                vec![NodeId(*a), NodeId(*b)]
            }
            Op::Relu { x }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Detach { x } => vec![NodeId(*x)],
            Op::Normalization { x, gamma, beta, .. } => {
                vec![NodeId(*x), NodeId(*gamma), NodeId(*beta)]
            }
            Op::SoftmaxXent { logits, .. } => vec![NodeId(*logits)],
            Op::Entropy { probs } => vec![NodeId(*probs)],
            Op::KlDiv { p, q } => vec![NodeId(*p), NodeId(*q)],
        }
    }

    fn step_backward(&self, i: usize, g: &Tensor, by_node: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Detach { .. } => {}

            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                // dA = g · Bᵀ
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bd[p * n + j];
                    }
                }
                let da = matmul_kernel(gd, &bt, m, n, k);
                // dB = Aᵀ · g
                let mut at = vec![0.0; k * m];
                for r in 0..m {
                    for p in 0..k {
                        at[p * m + r] = ad[r * k + p];
                    }
                }
                let db = matmul_kernel(&at, gd, k, m, n);
                self.accumulate(by_node, *a, &da);
                self.accumulate(by_node, *b, &db);
            }

            Op::Add { a, b, row_broadcast } => {
                self.accumulate(by_node, *a, gd);
                if *row_broadcast {
                    let cols = self.nodes[*b].value.numel();
                    let rows = gd.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += gd[r * cols + j];
                        }
                    }
                    self.accumulate(by_node, *b, &db);
                } else {
                    self.accumulate(by_node, *b, gd);
                }
            }

            Op::Mul { a, b } => {
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                let da: Vec<f64> = gd.iter().zip(bd).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = gd.iter().zip(ad).map(|(g, a)| g * a).collect();
                self.accumulate(by_node, *a, &da);
                self.accumulate(by_node, *b, &db);
            }

            Op::Relu { x } => {
                let xd = self.nodes[*x].value.data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(by_node, *x, &dx);
            }

            Op::Normalization { x, gamma, beta, cache } => {
                let xv = &self.nodes[*x].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let idx = r * cols + j;
                        dgamma[j] += gd[idx] * cache.xhat[idx];
                        dbeta[j] += gd[idx];
                    }
                }
                let mut dx = vec![0.0; rows * cols];
                if cache.fixed {
                    for r in 0..rows {
                        for j in 0..cols {
                            let idx = r * cols + j;
                            dx[idx] = gd[idx] * gam[j] * cache.inv_std[j];
                        }
                    }
                } else if cache.per_row {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..cols {
                            let idx = r * cols + j;
                            let dxh = gd[idx] * gam[j];
                            s1 += dxh;
                            s2 += dxh * cache.xhat[idx];
                        }
                        for j in 0..cols {
                            let idx = r * cols + j;
                            let dxh = gd[idx] * gam[j];
                            dx[idx] = cache.inv_std[r] / nf
                                * (nf * dxh - s1 - cache.xhat[idx] * s2);
                        }
                    }
                } else {
                    let nb = rows as f64;
                    for j in 0..cols {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for r in 0..rows {
                            let idx = r * cols + j;
                            let dxh = gd[idx] * gam[j];
                            s1 += dxh;
                            s2 += dxh * cache.xhat[idx];
                        }
                        for r in 0..rows {
                            let idx = r * cols + j;
                            let dxh = gd[idx] * gam[j];
                            dx[idx] = cache.inv_std[j] / nb
                                * (nb * dxh - s1 - cache.xhat[idx] * s2);
                        }
                    }
                }
                self.accumulate(by_node, *x, &dx);
                self.accumulate(by_node, *gamma, &dgamma);
                self.accumulate(by_node, *beta, &dbeta);
            }

            Op::Softmax { x } => {
                let sv = &self.nodes[i].value;
                let (rows, cols) = (sv.rows(), sv.cols());
                let sd = sv.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dot += gd[r * cols + j] * sd[r * cols + j];
                    }
                    for j in 0..cols {
                        let idx = r * cols + j;
                        dx[idx] = sd[idx] * (gd[idx] - dot);
                    }
                }
                self.accumulate(by_node, *x, &dx);
            }

            Op::LogSoftmax { x } => {
                let lv = &self.nodes[i].value;
                let (rows, cols) = (lv.rows(), lv.cols());
                let ld = lv.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gsum: f64 = gd[r * cols..(r + 1) * cols].iter().sum();
                    for j in 0..cols {
                        let idx = r * cols + j;
                        dx[idx] = gd[idx] - ld[idx].exp() * gsum;
                    }
                }
                self.accumulate(by_node, *x, &dx);
            }

            Op::SoftmaxXent { logits, labels, probs } => {
                let lv = &self.nodes[*logits].value;
                let (rows, cols) = (lv.rows(), lv.cols());
                let scale = gd[0] / rows as f64;
                let mut dx = vec![0.0; rows * cols];
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..cols {
                        let idx = r * cols + j;
                        let target = if j == y { 1.0 } else { 0.0 };
                        dx[idx] = scale * (probs[idx] - target);
                    }
                }
                self.accumulate(by_node, *logits, &dx);
            }

            Op::Entropy { probs } => {
                let pv = &self.nodes[*probs].value;
                let (rows, cols) = (pv.rows(), pv.cols());
                let pd = pv.data();
                let mut dp = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let idx = r * cols + j;
                        let p = pd[idx];
                        let above = if p > PROB_FLOOR { 1.0 } else { 0.0 };
                        dp[idx] = -gd[r] * (p.max(PROB_FLOOR).ln() + above);
                    }
                }
                self.accumulate(by_node, *probs, &dp);
            }

            Op::KlDiv { p, q } => {
                let pv = &self.nodes[*p].value;
                let qv = &self.nodes[*q].value;
                let (rows, cols) = (pv.rows(), pv.cols());
                let (pd, qd) = (pv.data(), qv.data());
                let mut dp = vec![0.0; rows * cols];
                let mut dq = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let idx = r * cols + j;
                        let (pp, qq) = (pd[idx], qd[idx]);
                        let p_above = if pp > PROB_FLOOR { 1.0 } else { 0.0 };
                        dp[idx] = gd[r]
                            * (pp.max(PROB_FLOOR).ln() - qq.max(PROB_FLOOR).ln() + p_above);
                        dq[idx] = if qq > PROB_FLOOR {
                            -gd[r] * pp / qq
                        } else {
                            0.0
                        };
                    }
                }
                self.accumulate(by_node, *p, &dp);
                self.accumulate(by_node, *q, &dq);
            }

            Op::Scale { x, c } => {
                let dx: Vec<f64> = gd.iter().map(|g| g * c).collect();
                self.accumulate(by_node, *x, &dx);
            }

            Op::Sum { x } => {
                let n = self.nodes[*x].value.numel();
                let dx = vec![gd[0]; n];
                self.accumulate(by_node, *x, &dx);
            }

            Op::Mean { x } => {
                let n = self.nodes[*x].value.numel();
                let dx = vec![gd[0] / n as f64; n];
                self.accumulate(by_node, *x, &dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity_preserves_vector() {
        let mut tape = Tape::new();
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let a = tape.constant(eye).unwrap();
        let v = tape.constant(t1(&[0.3, -0.7, 2.5])).unwrap();
        let y = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -0.7, 2.5]);
        assert_eq!(tape.value(y).shape(), &[3]);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let z = tape.constant(t1(&[0.0, 0.0, 0.0])).unwrap();
        let s = tape.softmax(z).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let z1 = tape.constant(t1(&[1.0, 2.0, 3.0])).unwrap();
        let z2 = tape.constant(t1(&[101.0, 102.0, 103.0])).unwrap();
        let s1 = tape.softmax(z1).unwrap();
        let s2 = tape.softmax(z2).unwrap();
        let sum: f64 = tape.value(s1).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for (a, b) in tape.value(s1).data().iter().zip(tape.value(s2).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(t1(&[0.1; 10])).unwrap();
        let e = tape.entropy(u).unwrap();
        assert!((tape.value(e).data()[0] - 2.302585).abs() < 1e-6);

        let onehot = tape.constant(t1(&[0.0, 1.0, 0.0])).unwrap();
        let e2 = tape.entropy(onehot).unwrap();
        assert_eq!(tape.value(e2).data()[0], 0.0);

        let p = tape.constant(t1(&[0.7, 0.2, 0.1])).unwrap();
        let e3 = tape.entropy(p).unwrap();
        assert!((tape.value(e3).data()[0] - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        let mut tape = Tape::new();
        let bad = tape.constant(t1(&[0.7, 0.7])).unwrap();
        assert!(matches!(
            tape.entropy(bad),
            Err(TtaError::NotNormalized { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(t1(&[0.25, 0.25, 0.5])).unwrap();
        let kl = tape.kl_divergence(p, p).unwrap();
        assert_eq!(tape.value(kl).data()[0], 0.0);

        let a = tape.constant(t1(&[1.0, 0.0])).unwrap();
        let b = tape.constant(t1(&[0.5, 0.5])).unwrap();
        let kl2 = tape.kl_divergence(a, b).unwrap();
        assert!((tape.value(kl2).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape
            .trainable(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.trainable(t1(&[1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TtaError::NotScalar { len: 2 })
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        // loss = sum(x ⊙ detach(x)); d/dx = detach(x) only.
        let mut tape = Tape::new();
        let x = tape.trainable(t1(&[2.0, 3.0])).unwrap();
        let d = tape.detach(x).unwrap();
        let prod = tape.mul(x, d).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 3.0]);

        // Fully detached expression: no gradient reaches the leaf at all.
        let mut tape = Tape::new();
        let x = tape.trainable(t1(&[2.0, 3.0])).unwrap();
        let d = tape.detach(x).unwrap();
        let loss = tape.sum(d).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn kl_to_detached_self_has_zero_logit_gradient() {
        // grad of kl(softmax(z), detach(softmax(z))) at uniform z is zero.
        let mut tape = Tape::new();
        let z = tape.trainable(t1(&[0.4, 0.4, 0.4])).unwrap();
        let p = tape.softmax(z).unwrap();
        let pd = tape.detach(p).unwrap();
        let kl = tape.kl_divergence(p, pd).unwrap();
        let grads = tape.backward(kl).unwrap();
        for &v in grads.get(z).unwrap().data() {
            assert!(v.abs() < 1e-12, "expected zero gradient, got {v}");
        }
    }

    #[test]
    fn entropy_of_softmax_matches_finite_differences() {
        let z0 = [1.0, 2.0, 3.0];
        let eval = |z: &[f64]| {
            let mut tape = Tape::new();
            let zn = tape.constant(t1(z)).unwrap();
            let p = tape.softmax(zn).unwrap();
            let e = tape.entropy(p).unwrap();
            tape.value(e).data()[0]
        };
        let mut tape = Tape::new();
        let z = tape.trainable(t1(&z0)).unwrap();
        let p = tape.softmax(z).unwrap();
        let e = tape.entropy(p).unwrap();
        let grads = tape.backward(e).unwrap();
        let g = grads.get(z).unwrap().data();

        let h = 1e-5;
        for i in 0..3 {
            let mut zp = z0;
            zp[i] += h;
            let mut zm = z0;
            zm[i] -= h;
            let fd = (eval(&zp) - eval(&zm)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-12);
            assert!(rel < 1e-6, "component {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn inputs_always_precede_consumers() {
        let mut tape = Tape::new();
        let z = tape.trainable(t1(&[0.5, -0.2, 0.1])).unwrap();
        let p = tape.softmax(z).unwrap();
        let d = tape.detach(p).unwrap();
        let kl = tape.kl_divergence(p, d).unwrap();
        let loss = tape.sum(kl).unwrap();
        for id in [z, p, d, kl, loss] {
            for input in tape.op_inputs(id) {
                assert!(input.0 < id.0, "node {} consumes later node {}", id.0, input.0);
            }
        }
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let big = tape.constant(t1(&[1e308, 1e308])).unwrap();
        assert!(matches!(
            tape.add(big, big),
            Err(TtaError::NonFinite { .. })
        ));
    }
}

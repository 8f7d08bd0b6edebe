//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward ops are recorded as nodes in a flat arena; [`Tape::backward`]
//! replays them in reverse, accumulating gradients per node. Values are
//! [`Tensor`]s (cheap to clone), so inserting model parameters as leaves
//! does not copy weights.
//!
//! A tape built with `Tape::no_grad()` runs the same forward arithmetic
//! without retaining anything needed for backward; inference paths use
//! this mode. Forward results are bit-identical between the two modes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive mask value treated as "disallowed". Probabilities at masked
/// slots are snapped to exactly 0 after softmax.
pub const MASK_SENTINEL: f64 = -1e30;
const MASK_SNAP_THRESHOLD: f64 = -1e29;

const RMS_NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10000.0;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Attention masking rule.
#[derive(Clone, Debug)]
pub enum Mask {
    /// Every query may attend every key.
    None,
    /// Query row `i` may attend key slots `0..=q_offset + i`.
    Causal { q_offset: usize },
    /// Explicit additive mask of shape `[q_len, kv_len]`.
    Additive(Tensor),
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRowVec(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ChunkMeanRows(Var, usize),
    Rope {
        x: Var,
        n_heads: usize,
        positions: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
    },
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        mask: Mask,
        /// Post-softmax probabilities `[n_heads, q_len, kv_len]`, retained
        /// only when gradients are enabled.
        probs: Option<Tensor>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropyMean {
        logits: Var,
        targets: Vec<usize>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that records values only; backward is unavailable.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    /// Gradient of the last `backward` call with respect to `v`.
    ///
    /// `None` when the node does not require gradients; a zero buffer when
    /// it requires gradients but was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    // ── Elementwise and linear ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_row_vec(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(format!(
                "add_row_vec: bias {:?} does not match row width {}",
                self.value(bias).shape(),
                c
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, self.rg(x) || self.rg(bias), Op::AddRowVec(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, self.rg(x), Op::Scale(x, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let (c2, p) = self.value(b).dims2()?;
        if c != c2 {
            return Err(Error::shape(format!(
                "matmul: inner dims differ, [{r}x{c}] x [{c2}x{p}]"
            )));
        }
        let data = mm_nn(self.value(a).data(), self.value(b).data(), r, c, p);
        let out = Tensor::new(vec![r, p], data)?;
        Ok(self.push(out, self.rg(a) || self.rg(b), Op::MatMul(a, b)))
    }

    // ── Row selection / concatenation ───────────────────────────────────

    pub fn select_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!(
                "select_rows: index {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(out, self.rg(x), Op::SelectRows(x, indices)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows: no parts".to_string()));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::shape(format!(
                    "concat_rows: column mismatch {pc} vs {c}"
                )));
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Mean-pool contiguous row chunks of `x` into `m` rows. The last chunk
    /// absorbs any remainder when the row count is not divisible by `m`.
    pub fn chunk_mean_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if m == 0 || m > r {
            return Err(Error::shape(format!(
                "chunk_mean_rows: cannot pool {r} rows into {m} chunks"
            )));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; m * c];
        for (ci, (start, end)) in chunk_bounds(r, m).into_iter().enumerate() {
            let inv = 1.0 / (end - start) as f64;
            for i in start..end {
                for j in 0..c {
                    data[ci * c + j] += src[i * c + j] * inv;
                }
            }
        }
        let out = Tensor::new(vec![m, c], data)?;
        Ok(self.push(out, self.rg(x), Op::ChunkMeanRows(x, m)))
    }

    // ── Transformer primitives ──────────────────────────────────────────

    /// Rotary position embedding over `[len, n_heads * head_dim]` with an
    /// explicit, possibly noncontiguous position id per row.
    pub fn rope(&mut self, x: Var, n_heads: usize, positions: &[usize]) -> Result<Var> {
        let (len, d) = self.value(x).dims2()?;
        let head_dim = check_heads(d, n_heads)?;
        if positions.len() != len {
            return Err(Error::shape(format!(
                "rope: {} positions for {} rows",
                positions.len(),
                len
            )));
        }
        let data = rope_apply(self.value(x).data(), d, n_heads, head_dim, positions, false);
        let out = Tensor::new(vec![len, d], data)?;
        Ok(self.push(
            out,
            self.rg(x),
            Op::Rope {
                x,
                n_heads,
                positions: positions.to_vec(),
            },
        ))
    }

    /// RMS normalization with a learned per-channel gain (no bias).
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).shape() != [c] {
            return Err(Error::shape(format!(
                "rms_norm: gain {:?} does not match width {}",
                self.value(gain).shape(),
                c
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            for j in 0..c {
                data[i * c + j] = row[j] * inv * g[j];
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, self.rg(x) || self.rg(gain), Op::RmsNorm { x, gain }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, self.rg(x), Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, self.rg(x), Op::Gelu(x))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push(out, self.rg(x), Op::SoftmaxRows(x)))
    }

    /// Scaled dot-product attention over sequence-major tensors.
    ///
    /// `q: [q_len, d]`, `k, v: [kv_len, d]` with heads laid out as column
    /// blocks of width `d / n_heads`. Returns the attention output and,
    /// when `capture` is set, a deep copy of the post-softmax probabilities
    /// `[n_heads, q_len, kv_len]`. Capturing never changes the output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        mask: Mask,
        capture: bool,
    ) -> Result<(Var, Option<Tensor>)> {
        let (q_len, d) = self.value(q).dims2()?;
        let (kv_len, dk) = self.value(k).dims2()?;
        let (kv_len2, dv) = self.value(v).dims2()?;
        if dk != d || dv != d {
            return Err(Error::shape(format!(
                "attention: width mismatch q={d} k={dk} v={dv}"
            )));
        }
        if kv_len != kv_len2 {
            return Err(Error::shape(format!(
                "attention: key/value lengths differ, {kv_len} vs {kv_len2}"
            )));
        }
        let head_dim = check_heads(d, n_heads)?;
        if let Mask::Additive(m) = &mask {
            if m.dims2()? != (q_len, kv_len) {
                return Err(Error::shape(format!(
                    "attention: mask {:?} does not match [{q_len}, {kv_len}]",
                    m.shape()
                )));
            }
        }
        if let Mask::Causal { q_offset } = mask {
            if q_offset + q_len > kv_len {
                return Err(Error::contract(format!(
                    "attention: causal offset {q_offset} + q_len {q_len} exceeds kv_len {kv_len}"
                )));
            }
        }

        let keep_probs = self.grad_enabled && self.rg(q);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = vec![0.0; q_len * d];
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();

        let mut probs_full: Option<Vec<f64>> = if keep_probs || capture {
            Some(vec![0.0; n_heads * q_len * kv_len])
        } else {
            None
        };
        let mut scratch = vec![0.0; kv_len];

        for h in 0..n_heads {
            let hb = h * head_dim;
            for i in 0..q_len {
                let row: &mut [f64] = match probs_full.as_mut() {
                    Some(buf) => {
                        let base = (h * q_len + i) * kv_len;
                        &mut buf[base..base + kv_len]
                    }
                    None => &mut scratch,
                };
                attention_row(
                    qd, kd, vd, &mut out, &mask, scale, d, head_dim, hb, i, kv_len, row,
                );
            }
        }

        let value = Tensor::new(vec![q_len, d], out)?;
        let (stored, captured) = match probs_full {
            Some(buf) => {
                let probs = Tensor::new(vec![n_heads, q_len, kv_len], buf)?;
                if keep_probs && capture {
                    // Record copies must outlive the tape independently.
                    let copy = Tensor::new(probs.shape().to_vec(), probs.data().to_vec())?;
                    (Some(probs), Some(copy))
                } else if keep_probs {
                    (Some(probs), None)
                } else {
                    (None, Some(probs))
                }
            }
            None => (None, None),
        };
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let var = self.push(
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                mask,
                probs: stored,
            },
        );
        Ok((var, captured))
    }

    // ── Embedding / loss / reductions ───────────────────────────────────

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(format!(
                "embedding: id {bad} out of vocab {vocab}"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            self.rg(table),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean token-level cross entropy between `logits: [rows, vocab]` and
    /// integer targets.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, vocab) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::shape(format!(
                "cross_entropy: target {bad} out of vocab {vocab}"
            )));
        }
        let src = self.value(logits).data();
        let mut loss = 0.0;
        for i in 0..r {
            let row = &src[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        loss /= r as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            self.rg(logits),
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), self.rg(x), Op::Sum(x))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients for every node reachable from the scalar `loss`.
    /// Leaves that require gradients but are unreachable get zero buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.grad_enabled {
            return Err(Error::contract(
                "backward on a no-grad tape".to_string(),
            ));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![1.0]);
            for id in (0..=loss.0).rev() {
                if !self.nodes[id].requires_grad {
                    continue;
                }
                let Some(g) = self.grads[id].take() else {
                    continue;
                };
                self.propagate(id, &g);
                self.grads[id] = Some(g);
            }
        }
        // Unreachable trainable leaves report zero gradients.
        for id in 0..self.nodes.len() {
            if self.nodes[id].requires_grad && self.grads[id].is_none() {
                if let Op::Leaf = self.nodes[id].op {
                    self.grads[id] = Some(vec![0.0; self.nodes[id].value.numel()]);
                }
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&mut self, id: usize, upstream: &[f64]) {
        // Split borrows: the op description is read-only while gradients
        // are accumulated into the side table.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, nodes, *a, |g| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi += ui;
                    }
                });
                Self::accumulate(grads, nodes, *b, |g| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi += ui;
                    }
                });
            }
            Op::AddRowVec(x, bias) => {
                Self::accumulate(grads, nodes, *x, |g| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi += ui;
                    }
                });
                let (r, c) = nodes[x.0].value.dims2().expect("checked at forward");
                Self::accumulate(grads, nodes, *bias, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += upstream[i * c + j];
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                Self::accumulate(grads, nodes, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += upstream[i] * db[i];
                    }
                });
                Self::accumulate(grads, nodes, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += upstream[i] * da[i];
                    }
                });
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                Self::accumulate(grads, nodes, *x, |g| {
                    for (gi, ui) in g.iter_mut().zip(upstream) {
                        *gi += ui * f;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (r, c) = nodes[a.0].value.dims2().expect("checked");
                let (_, p) = nodes[b.0].value.dims2().expect("checked");
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                Self::accumulate(grads, nodes, *a, |g| {
                    mm_nt_acc(upstream, db, r, p, c, g);
                });
                Self::accumulate(grads, nodes, *b, |g| {
                    mm_tn_acc(da, upstream, r, c, p, g);
                });
            }
            Op::SelectRows(x, indices) => {
                let (_, c) = nodes[x.0].value.dims2().expect("checked");
                Self::accumulate(grads, nodes, *x, |g| {
                    for (m, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += upstream[m * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    Self::accumulate(grads, nodes, p, |g| {
                        for i in 0..n {
                            g[i] += upstream[offset + i];
                        }
                    });
                    offset += n;
                }
            }
            Op::ChunkMeanRows(x, m) => {
                let (r, c) = nodes[x.0].value.dims2().expect("checked");
                let bounds = chunk_bounds(r, *m);
                Self::accumulate(grads, nodes, *x, |g| {
                    for (ci, (start, end)) in bounds.into_iter().enumerate() {
                        let inv = 1.0 / (end - start) as f64;
                        for i in start..end {
                            for j in 0..c {
                                g[i * c + j] += upstream[ci * c + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Rope {
                x,
                n_heads,
                positions,
            } => {
                let (_, d) = nodes[x.0].value.dims2().expect("checked");
                let head_dim = d / n_heads;
                let da = rope_apply(upstream, d, *n_heads, head_dim, positions, true);
                Self::accumulate(grads, nodes, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += da[i];
                    }
                });
            }
            Op::RmsNorm { x, gain } => {
                let (r, c) = nodes[x.0].value.dims2().expect("checked");
                let xd = nodes[x.0].value.data();
                let gd = nodes[gain.0].value.data();
                Self::accumulate(grads, nodes, *x, |g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let up = &upstream[i * c..(i + 1) * c];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
                        let dot: f64 = (0..c).map(|j| up[j] * gd[j] * row[j]).sum();
                        let coef = inv * inv * inv / c as f64;
                        for j in 0..c {
                            g[i * c + j] += up[j] * gd[j] * inv - coef * dot * row[j];
                        }
                    }
                });
                Self::accumulate(grads, nodes, *gain, |g| {
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let up = &upstream[i * c..(i + 1) * c];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
                        for j in 0..c {
                            g[j] += up[j] * row[j] * inv;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xd = nodes[x.0].value.data();
                Self::accumulate(grads, nodes, *x, |g| {
                    for i in 0..g.len() {
                        let s = sigmoid(xd[i]);
                        g[i] += upstream[i] * s * (1.0 + xd[i] * (1.0 - s));
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = nodes[x.0].value.data();
                Self::accumulate(grads, nodes, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += upstream[i] * gelu_bwd(xd[i]);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = nodes[x.0].value.dims2().expect("checked");
                let pd = nodes[id].value.data();
                Self::accumulate(grads, nodes, *x, |g| {
                    for i in 0..r {
                        let p = &pd[i * c..(i + 1) * c];
                        let up = &upstream[i * c..(i + 1) * c];
                        let dot: f64 = p.iter().zip(up).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] += p[j] * (up[j] - dot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                mask,
                probs,
            } => {
                let probs = probs
                    .as_ref()
                    .expect("attention probs retained when gradients are enabled");
                let (q_len, d) = nodes[q.0].value.dims2().expect("checked");
                let (kv_len, _) = nodes[k.0].value.dims2().expect("checked");
                let head_dim = d / n_heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let qd = nodes[q.0].value.data();
                let kd = nodes[k.0].value.data();
                let vd = nodes[v.0].value.data();
                let pd = probs.data();

                let mut dq = vec![0.0; q_len * d];
                let mut dk = vec![0.0; kv_len * d];
                let mut dv = vec![0.0; kv_len * d];
                let mut dp = vec![0.0; kv_len];
                for h in 0..*n_heads {
                    let hb = h * head_dim;
                    for i in 0..q_len {
                        let end = allowed_end(mask, i, kv_len);
                        let p = &pd[(h * q_len + i) * kv_len..(h * q_len + i) * kv_len + kv_len];
                        let up = &upstream[i * d + hb..i * d + hb + head_dim];
                        // dP = dOut . V^T ; dS = P * (dP - sum(P*dP))
                        let mut pdp = 0.0;
                        for (j, dpj) in dp.iter_mut().enumerate().take(end) {
                            let vrow = &vd[j * d + hb..j * d + hb + head_dim];
                            let dot: f64 = up.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            *dpj = dot;
                            pdp += p[j] * dot;
                        }
                        let qrow = &qd[i * d + hb..i * d + hb + head_dim];
                        for j in 0..end {
                            let ds = p[j] * (dp[j] - pdp) * scale;
                            let krow = &kd[j * d + hb..j * d + hb + head_dim];
                            for t in 0..head_dim {
                                dq[i * d + hb + t] += ds * krow[t];
                                dk[j * d + hb + t] += ds * qrow[t];
                                dv[j * d + hb + t] += p[j] * up[t];
                            }
                        }
                    }
                }
                Self::accumulate(grads, nodes, *q, |g| {
                    for i in 0..g.len() {
                        g[i] += dq[i];
                    }
                });
                Self::accumulate(grads, nodes, *k, |g| {
                    for i in 0..g.len() {
                        g[i] += dk[i];
                    }
                });
                Self::accumulate(grads, nodes, *v, |g| {
                    for i in 0..g.len() {
                        g[i] += dv[i];
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (_, d) = nodes[table.0].value.dims2().expect("checked");
                Self::accumulate(grads, nodes, *table, |g| {
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += upstream[row * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropyMean { logits, targets } => {
                let (r, vocab) = nodes[logits.0].value.dims2().expect("checked");
                let ld = nodes[logits.0].value.data();
                let scale = upstream[0] / r as f64;
                Self::accumulate(grads, nodes, *logits, |g| {
                    let mut p = vec![0.0; vocab];
                    for i in 0..r {
                        softmax_row(&ld[i * vocab..(i + 1) * vocab], &mut p);
                        for j in 0..vocab {
                            g[i * vocab + j] += scale * p[j];
                        }
                        g[i * vocab + targets[i]] -= scale;
                    }
                });
            }
            Op::Sum(x) => {
                Self::accumulate(grads, nodes, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi += upstream[0];
                    }
                });
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// out[r, p] = a[r, c] . b[c, p]
fn mm_nn(a: &[f64], b: &[f64], r: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * p];
    for i in 0..r {
        let orow = &mut out[i * p..(i + 1) * p];
        for t in 0..c {
            let coef = a[i * c + t];
            if coef == 0.0 {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    }
    out
}

/// out[m, n] += a[m, k] . b[n, k]^T
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out[m, n] += a[k, m]^T . b[k, n]
fn mm_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for t in 0..k {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let coef = a[t * m + i];
            if coef == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += coef * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

fn check_heads(d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!(
            "head count {n_heads} does not divide width {d}"
        )));
    }
    let head_dim = d / n_heads;
    if head_dim % 2 != 0 {
        return Err(Error::config(format!(
            "head dim {head_dim} must be even for rotary embedding"
        )));
    }
    Ok(head_dim)
}

fn rope_apply(
    x: &[f64],
    d: usize,
    n_heads: usize,
    head_dim: usize,
    positions: &[usize],
    inverse: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let half = head_dim / 2;
    for (i, &pos) in positions.iter().enumerate() {
        for h in 0..n_heads {
            let hb = i * d + h * head_dim;
            for p in 0..half {
                let theta = (pos as f64) * ROPE_BASE.powf(-2.0 * p as f64 / head_dim as f64);
                let (sin, cos) = theta.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let (a, b) = (x[hb + 2 * p], x[hb + 2 * p + 1]);
                out[hb + 2 * p] = a * cos - b * sin;
                out[hb + 2 * p + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

fn allowed_end(mask: &Mask, i: usize, kv_len: usize) -> usize {
    match mask {
        Mask::Causal { q_offset } => (q_offset + i + 1).min(kv_len),
        _ => kv_len,
    }
}

/// One query row of attention: scores, stabilized softmax, weighted sum.
/// `row` receives the post-softmax probabilities over `kv_len` slots
/// (exactly 0 at masked slots).
#[allow(clippy::too_many_arguments)]
fn attention_row(
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    out: &mut [f64],
    mask: &Mask,
    scale: f64,
    d: usize,
    head_dim: usize,
    hb: usize,
    i: usize,
    kv_len: usize,
    row: &mut [f64],
) {
    let end = allowed_end(mask, i, kv_len);
    let qrow = &qd[i * d + hb..i * d + hb + head_dim];
    for (j, slot) in row.iter_mut().enumerate() {
        if j >= end {
            *slot = 0.0;
            continue;
        }
        let krow = &kd[j * d + hb..j * d + hb + head_dim];
        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
        let mut s = dot * scale;
        if let Mask::Additive(m) = mask {
            s += m.data()[i * kv_len + j];
        }
        *slot = s;
    }
    // Softmax over the allowed prefix.
    let scores = &mut row[..end];
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        let e = (*s - max).exp();
        *s = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for s in scores.iter_mut() {
        *s *= inv;
    }
    if let Mask::Additive(m) = mask {
        for (j, slot) in row.iter_mut().enumerate().take(end) {
            if m.data()[i * kv_len + j] <= MASK_SNAP_THRESHOLD {
                *slot = 0.0;
            }
        }
    }
    let orow_start = i * d + hb;
    for (j, &p) in row.iter().enumerate().take(end) {
        if p == 0.0 {
            continue;
        }
        let vrow = &vd[j * d + hb..j * d + hb + head_dim];
        for t in 0..head_dim {
            out[orow_start + t] += p * vrow[t];
        }
    }
}

pub(crate) fn chunk_bounds(n: usize, m: usize) -> Vec<(usize, usize)> {
    let size = n / m;
    (0..m)
        .map(|i| {
            let start = i * size;
            let end = if i + 1 == m { n } else { start + size };
            (start, end)
        })
        .collect()
}

// ── Finite differences ──────────────────────────────────────────────────

/// Central-difference gradient estimate of a scalar function, used as the
/// independent oracle against [`Tape::backward`].
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::contract("finite_diff_grad: eps must be > 0".to_string()));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops append nodes to a [`Graph`]; node creation order is a topological
//! order, so [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients into every parent. Values are computed eagerly at
//! op-construction time and stay finite (checked in debug builds).
//!
//! The op catalog is exactly what the encoder stack and the distillation
//! objective need: matmul (plain and `a · b^T`), add, broadcast bias add,
//! scale, concat, row/column slices, reshape, embedding lookup, layernorm,
//! exact GELU, mask-aware row softmax, seeded dropout, masked MSE, fused
//! softmax cross-entropy, and KL divergence against a fixed target
//! distribution.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Real, Tensor};

/// Layer normalization epsilon, matching the convention of the encoder
/// family this crate reimplements.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Real> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// `a (m,k) · b (n,k)^T -> (m,n)`
    MatmulNt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Row-broadcast bias add: `(m,n) + (n,)`.
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        factor: T,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    Reshape {
        a: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: NodeId,
    },
    /// Row-wise softmax; `mask[j] == 0` columns get probability exactly 0.
    SoftmaxRows {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        keep: Vec<bool>,
        scale: T,
    },
    /// Mean squared error over elements of rows with `row_mask != 0`.
    MseMasked {
        a: NodeId,
        b: NodeId,
        row_mask: Option<Vec<u8>>,
        denom: usize,
    },
    /// `-log softmax(logits)[target]`, softmax over unmasked positions.
    SoftmaxCe {
        logits: NodeId,
        target: usize,
        probs: Vec<T>,
    },
    /// `KL(target || softmax(logits))` with a constant target distribution.
    KlFromLogits {
        logits: NodeId,
        target_probs: Vec<T>,
        probs: Vec<T>,
    },
    /// Weighted sum of same-shaped nodes.
    Lincomb {
        terms: Vec<(T, NodeId)>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A computation tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, zeros if the node was never reached.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Parameter nodes in creation order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        debug_assert!(
            value.is_finite(),
            "non-finite value out of node {}",
            self.nodes.len()
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Constant/input leaf; receives a gradient slot but is not a parameter.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf; `param_nodes()` lists these in creation order.
    pub fn param(&mut self, value: &Tensor<T>) -> NodeId {
        let id = self.push(value.clone(), Op::Leaf);
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// `a · b^T`; `b` is `(n, k)`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nt_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.rank() != 2 || bv.rank() != 1 || av.cols() != bv.cols() {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let bias_data = bv.data().to_vec();
        let mut out = av.clone();
        for row in 0..out.rows() {
            for (o, &b) in out.row_mut(row).iter_mut().zip(&bias_data) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale { a, factor })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows with no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], v.shape()));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis: 0,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols with no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows, cols], v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p).clone();
            let w = v.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + off..r * cols + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis: 1,
            },
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 2 || start >= end || end > v.rows() {
            return Err(Error::invalid(format!(
                "slice_rows {}..{} of {}",
                start,
                end,
                v.fmt_dims()
            )));
        }
        let cols = v.cols();
        let data = v.data()[start * cols..end * cols].to_vec();
        let out = Tensor::from_vec(&[end - start, cols], data)?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 2 || start >= end || end > v.cols() {
            return Err(Error::invalid(format!(
                "slice_cols {}..{} of {}",
                start,
                end,
                v.fmt_dims()
            )));
        }
        let rows = v.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let out = Tensor::from_vec(&[rows, w], data)?;
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Rows of `table` gathered by id; ids must be in range.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[ids.len()]));
        }
        let (rows, d) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::invalid(format!(
                "embedding id {} out of range for table with {} rows",
                bad, rows
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization with gain `gamma` and shift `beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if xv.rank() != 2 || gv.rank() != 1 || gv.cols() != xv.cols() {
            return Err(Error::shape("layernorm", xv.shape(), gv.shape()));
        }
        if bv.shape() != gv.shape() {
            return Err(Error::shape("layernorm", gv.shape(), bv.shape()));
        }
        let (rows, d) = (xv.rows(), xv.cols());
        let dn = T::from_f64(d as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut xhat = Tensor::zeros(&[rows, d]);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(&[rows, d]);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            let xh = xhat.row_mut(r);
            let o = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xh[j] = h;
                o[j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF via `erf`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .map(|v| v * half * (T::one() + (v * inv_sqrt2).erf()));
        self.push(out, Op::Gelu { x })
    }

    /// Row-wise softmax over unmasked columns; masked columns get exactly 0.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&[u8]>) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape("softmax mask", xv.shape(), &[m.len()]));
            }
            if !m.iter().any(|&b| b != 0) {
                return Err(Error::invalid("softmax over a fully masked row"));
            }
        }
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = if xv.rank() == 1 { xv.data() } else { xv.row(r) };
            let o = &mut out.data_mut()[r * cols..(r + 1) * cols];
            softmax_masked_into(row, mask, o);
        }
        Ok(self.push(out, Op::SoftmaxRows { x }))
    }

    /// Inverted dropout. `rng: None` (eval) or `rate == 0` is the identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: Option<&mut StreamRng>) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let xv = self.value(x);
        let keep: Vec<bool> = (0..xv.numel()).map(|_| rng.next_f64() >= rate).collect();
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let data = xv
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x, keep, scale }))
    }

    /// Mean squared error over all elements of rows with `row_mask != 0`.
    pub fn mse(&mut self, a: NodeId, b: NodeId, row_mask: Option<&[u8]>) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        let rows = av.rows();
        let cols = av.cols();
        if let Some(m) = row_mask {
            if m.len() != rows {
                return Err(Error::shape("mse row mask", av.shape(), &[m.len()]));
            }
        }
        let included = |r: usize| row_mask.map_or(true, |m| m[r] != 0);
        let denom = (0..rows).filter(|&r| included(r)).count() * cols;
        if denom == 0 {
            return Err(Error::invalid("mse over zero included elements"));
        }
        let mut sum = T::zero();
        for r in 0..rows {
            if !included(r) {
                continue;
            }
            for (&x, &y) in av.data()[r * cols..(r + 1) * cols]
                .iter()
                .zip(&bv.data()[r * cols..(r + 1) * cols])
            {
                let d = x - y;
                sum += d * d;
            }
        }
        let out = Tensor::scalar(sum / T::from_f64(denom as f64));
        Ok(self.push(
            out,
            Op::MseMasked {
                a,
                b,
                row_mask: row_mask.map(<[u8]>::to_vec),
                denom,
            },
        ))
    }

    /// Fused `softmax + cross-entropy` over a rank-1 logit vector.
    pub fn softmax_ce(
        &mut self,
        logits: NodeId,
        target: usize,
        mask: Option<&[u8]>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(Error::invalid(format!(
                "softmax_ce expects a rank-1 logit vector, got {}",
                lv.fmt_dims()
            )));
        }
        let n = lv.cols();
        if target >= n {
            return Err(Error::invalid(format!(
                "cross-entropy target {} outside sequence of length {}",
                target, n
            )));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("softmax_ce mask", lv.shape(), &[m.len()]));
            }
            if m[target] == 0 {
                return Err(Error::invalid(format!(
                    "cross-entropy target {target} is masked"
                )));
            }
        }
        let mut probs = vec![T::zero(); n];
        softmax_masked_into(lv.data(), mask, &mut probs);
        let p = probs[target].max(T::from_f64(f64::MIN_POSITIVE));
        let out = Tensor::scalar(-p.ln());
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            },
        ))
    }

    /// `KL(target || softmax(logits))` for a constant target distribution
    /// over the unmasked positions of a rank-1 logit vector.
    pub fn kl_from_logits(
        &mut self,
        target_probs: &[T],
        logits: NodeId,
        mask: Option<&[u8]>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 1 || lv.cols() != target_probs.len() {
            return Err(Error::shape(
                "kl_from_logits",
                lv.shape(),
                &[target_probs.len()],
            ));
        }
        let n = lv.cols();
        let mut probs = vec![T::zero(); n];
        softmax_masked_into(lv.data(), mask, &mut probs);
        let tiny = T::from_f64(f64::MIN_POSITIVE);
        let mut kl = T::zero();
        for j in 0..n {
            if mask.map_or(false, |m| m[j] == 0) {
                continue;
            }
            let p = target_probs[j];
            if p > T::zero() {
                kl += p * (p.ln() - probs[j].max(tiny).ln());
            }
        }
        // Clamp tiny negative rounding residue; KL is nonnegative.
        let out = Tensor::scalar(kl.max(T::zero()));
        Ok(self.push(
            out,
            Op::KlFromLogits {
                logits,
                target_probs: target_probs.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted sum of same-shaped nodes: `sum_i w_i * t_i`.
    pub fn lincomb(&mut self, terms: &[(T, NodeId)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::invalid("lincomb with no terms"));
        }
        let shape = self.value(terms[0].1).shape().to_vec();
        let mut data = vec![T::zero(); self.value(terms[0].1).numel()];
        for &(w, id) in terms {
            let v = self.value(id);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("lincomb", &shape, v.shape()));
            }
            for (o, &x) in data.iter_mut().zip(v.data()) {
                *o += w * x;
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            out,
            Op::Lincomb {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss node. Visits each node exactly once
    /// in reverse creation (topological) order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got {}",
                self.value(loss).fmt_dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                {
                    let da = slot(grads, *a, av.shape());
                    matmul_nt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                }
                let db = slot(grads, *b, bv.shape());
                matmul_tn_acc(av.data(), g.data(), db.data_mut(), k, m, n);
            }
            Op::MatmulNt { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                {
                    let da = slot(grads, *a, av.shape());
                    matmul_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                }
                let db = slot(grads, *b, bv.shape());
                matmul_tn_acc(g.data(), av.data(), db.data_mut(), n, m, k);
            }
            Op::Add { a, b } => {
                add_into(slot(grads, *a, g.shape()), g.data());
                add_into(slot(grads, *b, g.shape()), g.data());
            }
            Op::AddRow { a, bias } => {
                add_into(slot(grads, *a, g.shape()), g.data());
                let n = self.value(*bias).cols();
                let db = slot(grads, *bias, &[n]);
                for r in 0..g.rows() {
                    add_into_slice(db.data_mut(), g.row(r));
                }
            }
            Op::Scale { a, factor } => {
                let da = slot(grads, *a, g.shape());
                for (o, &x) in da.data_mut().iter_mut().zip(g.data()) {
                    *o += *factor * x;
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut row = 0;
                    for &p in parts {
                        let pv_shape = self.value(p).shape().to_vec();
                        let rows = self.value(p).rows();
                        let cols = self.value(p).cols();
                        let dp = slot(grads, p, &pv_shape);
                        add_into_slice(
                            dp.data_mut(),
                            &g.data()[row * cols..(row + rows) * cols],
                        );
                        row += rows;
                    }
                } else {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pv_shape = self.value(p).shape().to_vec();
                        let rows = self.value(p).rows();
                        let w = self.value(p).cols();
                        let dp = slot(grads, p, &pv_shape);
                        for r in 0..rows {
                            add_into_slice(
                                &mut dp.data_mut()[r * w..(r + 1) * w],
                                &g.data()[r * cols + off..r * cols + off + w],
                            );
                        }
                        off += w;
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let av_shape = self.value(*a).shape().to_vec();
                let cols = self.value(*a).cols();
                let da = slot(grads, *a, &av_shape);
                add_into_slice(
                    &mut da.data_mut()[start * cols..start * cols + g.numel()],
                    g.data(),
                );
            }
            Op::SliceCols { a, start } => {
                let av_shape = self.value(*a).shape().to_vec();
                let cols = self.value(*a).cols();
                let w = g.cols();
                let da = slot(grads, *a, &av_shape);
                for r in 0..g.rows() {
                    add_into_slice(
                        &mut da.data_mut()[r * cols + start..r * cols + start + w],
                        g.row(r),
                    );
                }
            }
            Op::Reshape { a } => {
                let av_shape = self.value(*a).shape().to_vec();
                add_into(slot(grads, *a, &av_shape), g.data());
            }
            Op::Embedding { table, ids } => {
                let t_shape = self.value(*table).shape().to_vec();
                let d = t_shape[1];
                let dt = slot(grads, *table, &t_shape);
                for (r, &id) in ids.iter().enumerate() {
                    add_into_slice(&mut dt.data_mut()[id * d..(id + 1) * d], g.row(r));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = xhat.cols();
                let dn = T::from_f64(d as f64);
                let gammav = self.value(*gamma).data().to_vec();
                {
                    let dg = slot(grads, *gamma, &[d]);
                    for r in 0..g.rows() {
                        for j in 0..d {
                            dg.data_mut()[j] += g.row(r)[j] * xhat.row(r)[j];
                        }
                    }
                }
                {
                    let dbeta = slot(grads, *beta, &[d]);
                    for r in 0..g.rows() {
                        add_into_slice(dbeta.data_mut(), g.row(r));
                    }
                }
                let x_shape = self.value(*x).shape().to_vec();
                let dx = slot(grads, *x, &x_shape);
                for r in 0..g.rows() {
                    let gy = g.row(r);
                    let xh = xhat.row(r);
                    let s = inv_std[r];
                    let mut mean_t = T::zero();
                    let mut mean_tx = T::zero();
                    for j in 0..d {
                        let t = gy[j] * gammav[j];
                        mean_t += t;
                        mean_tx += t * xh[j];
                    }
                    mean_t /= dn;
                    mean_tx /= dn;
                    let row = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let t = gy[j] * gammav[j];
                        row[j] += s * (t - mean_t - xh[j] * mean_tx);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_tau = T::from_f64(1.0 / (std::f64::consts::TAU).sqrt());
                let dx = slot(grads, *x, xv.shape());
                for ((o, &v), &up) in dx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    let phi_cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = (-(v * v) * half).exp() * inv_sqrt_tau;
                    *o += up * (phi_cdf + v * pdf);
                }
            }
            Op::SoftmaxRows { x } => {
                let probs = &node.value;
                let cols = probs.cols();
                let x_shape = self.value(*x).shape().to_vec();
                let dx = slot(grads, *x, &x_shape);
                for r in 0..probs.rows() {
                    let p = &probs.data()[r * cols..(r + 1) * cols];
                    let gy = &g.data()[r * cols..(r + 1) * cols];
                    let dot: T = p.iter().zip(gy).map(|(&pi, &gi)| pi * gi).sum();
                    let row = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        row[j] += p[j] * (gy[j] - dot);
                    }
                }
            }
            Op::Dropout { x, keep, scale } => {
                let x_shape = self.value(*x).shape().to_vec();
                let dx = slot(grads, *x, &x_shape);
                for ((o, &k), &up) in dx.data_mut().iter_mut().zip(keep).zip(g.data()) {
                    if k {
                        *o += up * *scale;
                    }
                }
            }
            Op::MseMasked {
                a,
                b,
                row_mask,
                denom,
            } => {
                let up = g.item();
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                let cols = av.cols();
                let coef = T::from_f64(2.0 / *denom as f64) * up;
                let included =
                    |r: usize| row_mask.as_ref().map_or(true, |m| m[r] != 0);
                {
                    let da = slot(grads, *a, av.shape());
                    for r in 0..av.rows() {
                        if !included(r) {
                            continue;
                        }
                        let row = &mut da.data_mut()[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            row[j] += coef * (av.data()[r * cols + j] - bv.data()[r * cols + j]);
                        }
                    }
                }
                let db = slot(grads, *b, bv.shape());
                for r in 0..av.rows() {
                    if !included(r) {
                        continue;
                    }
                    let row = &mut db.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        row[j] -= coef * (av.data()[r * cols + j] - bv.data()[r * cols + j]);
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            } => {
                let up = g.item();
                let l_shape = self.value(*logits).shape().to_vec();
                let dl = slot(grads, *logits, &l_shape);
                for (j, (o, &p)) in dl.data_mut().iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *target { T::one() } else { T::zero() };
                    *o += up * (p - onehot);
                }
            }
            Op::KlFromLogits {
                logits,
                target_probs,
                probs,
            } => {
                let up = g.item();
                let l_shape = self.value(*logits).shape().to_vec();
                let dl = slot(grads, *logits, &l_shape);
                for ((o, &q), &p) in dl.data_mut().iter_mut().zip(probs).zip(target_probs) {
                    *o += up * (q - p);
                }
            }
            Op::Lincomb { terms } => {
                for &(w, id) in terms {
                    let shape = self.value(id).shape().to_vec();
                    let dt = slot(grads, id, &shape);
                    for (o, &x) in dt.data_mut().iter_mut().zip(g.data()) {
                        *o += w * x;
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Real>(
    grads: &'g mut [Option<Tensor<T>>],
    id: NodeId,
    shape: &[usize],
) -> &'g mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<T: Real>(dst: &mut Tensor<T>, src: &[T]) {
    add_into_slice(dst.data_mut(), src);
}

fn add_into_slice<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// Numerically stable masked softmax of one row into `out`.
pub(crate) fn softmax_masked_into<T: Real>(row: &[T], mask: Option<&[u8]>, out: &mut [T]) {
    let live = |j: usize| mask.map_or(true, |m| m[j] != 0);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if live(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, &v) in row.iter().enumerate() {
        if live(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = T::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let s = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_normalizes_rest() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[2, 3], vec![5.0, 1.0, 100.0, 0.0, 0.0, -50.0]).unwrap());
        let s = g.softmax_rows(x, Some(&[1, 1, 0])).unwrap();
        let v = g.value(s);
        assert_eq!(v.row(0)[2], 0.0);
        assert_eq!(v.row(1)[2], 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.softmax_rows(x, Some(&[0, 0, 0])).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t1(&[0.0, 10.0]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn layernorm_of_constant_row_is_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 4], vec![1.0; 4]).unwrap());
        let gamma = g.input(t1(&[1.0; 4]));
        let beta = g.input(t1(&[0.0; 4]));
        let y = g.layernorm(x, gamma, beta).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut g = Graph::<f64>::new();
        let p: [f64; 3] = [0.2, 0.5, 0.3];
        let logits = g.input(t1(&[p[0].ln(), p[1].ln(), p[2].ln()]));
        let kl = g.kl_from_logits(&p, logits, None).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn square_gradient_matches_hand_value() {
        // d/dx (x . x) at x = 3 is 6, via matmul of 1x1 matrices.
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let y = g.matmul(x, x).unwrap();
        let loss = g.reshape(y, &[]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_ce_gradient_at_uniform_two_classes() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(&t1(&[0.0, 0.0]));
        let loss = g.softmax_ce(logits, 0, None).unwrap();
        let grads = g.backward(loss).unwrap();
        let got = grads.get(logits).unwrap().data();
        assert!((got[0] - (-0.5)).abs() < 1e-12);
        assert!((got[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t1(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x5"), "{err}");
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t1(&[1.0; 64]));
        let eval = g.dropout(x, 0.5, None).unwrap();
        assert_eq!(eval, x);

        let run = |seed: u64| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let x = g.input(t1(&[1.0; 64]));
            let mut rng = StreamRng::new(seed);
            let y = g.dropout(x, 0.5, Some(&mut rng)).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
        let v = run(9);
        assert!(v.iter().any(|&x| x == 0.0) && v.iter().any(|&x| x == 2.0));
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::<f64>::new();
        let table = g.input(Tensor::zeros(&[4, 2]));
        assert!(g.embedding(table, &[0, 4]).is_err());
        assert!(g.embedding(table, &[3, 0]).is_ok());
    }
}

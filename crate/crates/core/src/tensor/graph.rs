//! Reverse-mode autodiff on a flat tape.
//!
//! Every operation appends one node holding its output value plus enough
//! information to produce local input gradients. `backward` seeds a scalar
//! output with 1 and sweeps the tape in reverse; node order is construction
//! order, which is topological by construction.
//!
//! Forward rules enforced everywhere:
//! - every output is checked for NaN/Inf and rejected with a hard error,
//! - a softmax row with no unmasked entry is an error, not a uniform fallback,
//! - broadcasting exists only as "bias over leading dimensions" (`add_bias`).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::tensor::{lit, PadMode, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node inside one [`Graph`]. Ids are not transferable between
/// graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(usize, usize),
    AddBias { x: usize, bias: usize },
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale { x: usize, c: S },
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Swish(usize),
    Glu(usize),
    Sqrt(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    MaskedSoftmax { x: usize, mask: Arc<Vec<bool>> },
    LogSoftmax(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Conv1d { x: usize, kernel: usize, stride: usize, pad: PadMode },
    DepthwiseConv1d { x: usize, kernel: usize },
    SumAll(usize),
    MeanAll(usize),
    Dot(usize, usize),
    Row { x: usize, index: usize },
    NarrowCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    Stack(Vec<usize>),
    Index { x: usize, index: usize },
    Detach(usize),
    /// Scalar-valued operation whose gradient w.r.t. its single input was
    /// precomputed at forward time (used by the CTC loss).
    CustomScalar { x: usize, grad: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// The ordered record of primitive operations applied in one forward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` output w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<S>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Result<NodeId> {
        if self.backward_done {
            return Err(Error::invalid("graph is finalized: backward has already run"));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ---- inputs ------------------------------------------------------------

    /// Record an input that does not need gradients.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<NodeId> {
        self.push("leaf", t, false, Op::Leaf)
    }

    /// Record an input that accumulates gradients during `backward`.
    pub fn param(&mut self, t: Tensor<S>) -> Result<NodeId> {
        self.push("param", t, true, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: S) -> Result<NodeId> {
        self.leaf(Tensor::scalar(v))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, self.req(&[a.0, b.0]), Op::Add(a.0, b.0))
    }

    /// `x + bias` where `bias` has the extent of `x`'s last dimension and is
    /// broadcast over all leading dimensions.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let d = tb.numel();
        if tb.shape().len() != 1 || tx.last_dim() != d {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % d])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", value, self.req(&[x.0, bias.0]), Op::AddBias { x: x.0, bias: bias.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", value, self.req(&[a.0, b.0]), Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, self.req(&[a.0, b.0]), Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("div", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x / y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("div", value, self.req(&[a.0, b.0]), Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale", value, self.req(&[x.0]), Op::Scale { x: x.0, c })
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -S::one())
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let value = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], value)?;
        self.push("matmul", value, self.req(&[a.0, b.0]), Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = tx.dims2()?;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, self.req(&[x.0]), Op::Transpose(x.0))
    }

    /// Inner product of two equal-length vectors; returns a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() || ta.shape().len() != 1 {
            return Err(Error::shape("dot", format!("{:?} . {:?}", ta.shape(), tb.shape())));
        }
        let v = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        self.push("dot", Tensor::scalar(v), self.req(&[a.0, b.0]), Op::Dot(a.0, b.0))
    }

    // ---- activations -------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v.max(S::zero())).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("relu", value, self.req(&[x.0]), Op::Relu(x.0))
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("swish", value, self.req(&[x.0]), Op::Swish(x.0))
    }

    /// Gated linear unit over the last dimension: splits `[.., 2h]` into
    /// `(a, b)` and returns `a * sigmoid(b)`.
    pub fn glu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let d = tx.last_dim();
        if d % 2 != 0 {
            return Err(Error::shape("glu", format!("odd last dim {d}")));
        }
        let h = d / 2;
        let rows = tx.rows_of(d);
        let mut data = vec![S::zero(); rows * h];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            for j in 0..h {
                data[r * h + j] = row[j] * sigmoid(row[h + j]);
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let value = Tensor::new(shape, data)?;
        self.push("glu", value, self.req(&[x.0]), Op::Glu(x.0))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v.sqrt()).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("sqrt", value, self.req(&[x.0]), Op::Sqrt(x.0))
    }

    // ---- normalization and softmax ------------------------------------------

    /// Layer normalization over the last dimension with learned gain/offset.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.rows_of(d);
        let eps = lit::<S>(LN_EPS);
        let dn = lit::<S>(d as f64);
        let mut data = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            value,
            self.req(&[x.0, gamma.0, beta.0]),
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 },
        )
    }

    /// Softmax over the last dimension where only `mask`-true positions
    /// participate; masked positions get probability exactly zero. The row
    /// max is taken over unmasked entries only. A row with no unmasked entry
    /// is an error.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if mask.len() != tx.numel() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask len {} vs {} values", mask.len(), tx.numel()),
            ));
        }
        let d = tx.last_dim();
        let rows = tx.rows_of(d);
        let mut data = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mrow = &mask[r * d..(r + 1) * d];
            let mut max = S::neg_infinity();
            for j in 0..d {
                if mrow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::FullyMaskedRow);
            }
            let mut sum = S::zero();
            for j in 0..d {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    data[r * d + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..d {
                data[r * d + j] = data[r * d + j] / sum;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            "masked_softmax",
            value,
            self.req(&[x.0]),
            Op::MaskedSoftmax { x: x.0, mask: Arc::new(mask.to_vec()) },
        )
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let d = tx.last_dim();
        let rows = tx.rows_of(d);
        let mut data = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for j in 0..d {
                data[r * d + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("log_softmax", value, self.req(&[x.0]), Op::LogSoftmax(x.0))
    }

    // ---- lookup and convolution ----------------------------------------------

    /// Row lookup into `table` (`[vocab, d]`) for each id; output `[len(ids), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].value;
        let (vocab, d) = tt.dims2()?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::invalid(format!("token ID out of range: {bad} >= {vocab}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            value,
            self.req(&[table.0]),
            Op::Embedding { table: table.0, ids: ids.to_vec() },
        )
    }

    /// 1-d convolution along the first axis. `x` is `[T, C_in]`, `kernel` is
    /// `[K, C_in, C_out]`. Causal mode left-pads with K-1 zero frames
    /// (stride must be 1); `PadMode::None` requires `T >= K`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: PadMode) -> Result<NodeId> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let (t_in, c_in) = tx.dims2()?;
        let kshape = tk.shape();
        if kshape.len() != 3 || kshape[1] != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {:?} for input {:?}", kshape, tx.shape()),
            ));
        }
        let (k, c_out) = (kshape[0], kshape[2]);
        if stride == 0 {
            return Err(Error::invalid("conv1d: stride must be >= 1"));
        }
        let (t_out, offset) = match pad {
            PadMode::Causal => {
                if stride != 1 {
                    return Err(Error::invalid("conv1d: causal padding requires stride 1"));
                }
                (t_in, k - 1)
            }
            PadMode::None => {
                if t_in < k {
                    return Err(Error::SequenceTooShort { t: t_in, k });
                }
                ((t_in - k) / stride + 1, 0)
            }
        };
        let mut data = vec![S::zero(); t_out * c_out];
        for t in 0..t_out {
            for kk in 0..k {
                let src = (t * stride + kk).checked_sub(offset);
                let Some(src) = src else { continue };
                if src >= t_in {
                    continue;
                }
                for c in 0..c_in {
                    let xv = tx.data()[src * c_in + c];
                    let wrow = &tk.data()[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                    for o in 0..c_out {
                        data[t * c_out + o] = data[t * c_out + o] + xv * wrow[o];
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_out, c_out], data)?;
        self.push(
            "conv1d",
            value,
            self.req(&[x.0, kernel.0]),
            Op::Conv1d { x: x.0, kernel: kernel.0, stride, pad },
        )
    }

    /// Depthwise causal convolution: `x` is `[T, C]`, `kernel` is `[K, C]`,
    /// each channel convolved independently with K-1 left zero padding.
    pub fn depthwise_conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let (t_in, c) = tx.dims2()?;
        let (k, kc) = tk.dims2()?;
        if kc != c {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("kernel {:?} for input {:?}", tk.shape(), tx.shape()),
            ));
        }
        let mut data = vec![S::zero(); t_in * c];
        for t in 0..t_in {
            for kk in 0..k {
                let Some(src) = (t + kk).checked_sub(k - 1) else { continue };
                for ch in 0..c {
                    data[t * c + ch] = data[t * c + ch] + tx.data()[src * c + ch] * tk.data()[kk * c + ch];
                }
            }
        }
        let value = Tensor::new(vec![t_in, c], data)?;
        self.push(
            "depthwise_conv1d",
            value,
            self.req(&[x.0, kernel.0]),
            Op::DepthwiseConv1d { x: x.0, kernel: kernel.0 },
        )
    }

    // ---- reductions and reshaping ---------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x.0].value.data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(v), self.req(&[x.0]), Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let v = tx.data().iter().copied().sum::<S>() / lit::<S>(tx.numel() as f64);
        self.push("mean_all", Tensor::scalar(v), self.req(&[x.0]), Op::MeanAll(x.0))
    }

    /// Extract row `index` of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (r, _c) = tx.dims2()?;
        if index >= r {
            return Err(Error::invalid(format!("row {index} out of {r}")));
        }
        let value = Tensor::vector(tx.row(index).to_vec());
        self.push("row", value, self.req(&[x.0]), Op::Row { x: x.0, index })
    }

    /// Column slice `[.., start..start+len]` of a matrix.
    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = tx.dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::shape("narrow_cols", format!("{start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push(
            "narrow_cols",
            value,
            self.req(&[x.0]),
            Op::NarrowCols { x: x.0, start, len },
        )
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let r = self.nodes[xs[0].0].value.dims2()?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, ci) = self.nodes[x.0].value.dims2()?;
            if ri != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {ri}")));
            }
            widths.push(ci);
        }
        let c_total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c_total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.nodes[x.0].value.row(i));
            }
        }
        let value = Tensor::new(vec![r, c_total], data)?;
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let req = self.req(&ids);
        self.push("concat_cols", value, req, Op::ConcatCols(ids))
    }

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("stack: no inputs"));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = &self.nodes[x.0].value;
            if t.numel() != 1 {
                return Err(Error::shape("stack", format!("non-scalar input {:?}", t.shape())));
            }
            data.push(t.item());
        }
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let req = self.req(&ids);
        self.push("stack", Tensor::vector(data), req, Op::Stack(ids))
    }

    /// Pick one element (by flat index) as a scalar node.
    pub fn index(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if index >= tx.numel() {
            return Err(Error::invalid(format!("index {index} out of {}", tx.numel())));
        }
        let v = tx.data()[index];
        self.push("index", Tensor::scalar(v), self.req(&[x.0]), Op::Index { x: x.0, index })
    }

    /// Same value, but gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.nodes[x.0].value.clone();
        self.push("detach", value, false, Op::Detach(x.0))
    }

    /// Record a scalar-valued op with an externally computed value and
    /// gradient w.r.t. `x` (`grad` must have `x`'s element count).
    pub fn custom_scalar(&mut self, name: &'static str, x: NodeId, value: S, grad: Vec<S>) -> Result<NodeId> {
        if grad.len() != self.nodes[x.0].value.numel() {
            return Err(Error::shape("custom_scalar", "gradient size mismatch"));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.push(name, Tensor::scalar(value), self.req(&[x.0]), Op::CustomScalar { x: x.0, grad })
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar output. May run once per graph.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.nodes[out.0].value.numel() != 1 {
            return Err(Error::shape("backward", "output must be scalar"));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![S::one()]);

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let acc = |grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], j: usize, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![S::zero(); nodes[j].value.numel()]);
            f(slot);
        };

        match &self.nodes[i].op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                acc(grads, &self.nodes, *a, &mut |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
                acc(grads, &self.nodes, *b, &mut |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
                let d = self.nodes[*bias].value.numel();
                acc(grads, &self.nodes, *bias, &mut |dst| {
                    for (idx, &gv) in g.iter().enumerate() {
                        dst[idx % d] = dst[idx % d] + gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(grads, &self.nodes, *a, &mut |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
                acc(grads, &self.nodes, *b, &mut |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(grads, &self.nodes, *a, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] + g[j] * vb[j];
                    }
                });
                acc(grads, &self.nodes, *b, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] + g[j] * va[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                acc(grads, &self.nodes, *a, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] + g[j] / vb[j];
                    }
                });
                acc(grads, &self.nodes, *b, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] - g[j] * va[j] / (vb[j] * vb[j]);
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2().unwrap();
                let n = self.nodes[*b].value.dims2().unwrap().1;
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                // dA[i,p] += sum_j g[i,j] * B[p,j]
                acc(grads, &self.nodes, *a, &mut |dst| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = S::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * vb[p * n + j];
                            }
                            dst[i * k + p] = dst[i * k + p] + s;
                        }
                    }
                });
                // dB[p,j] += sum_i A[i,p] * g[i,j]
                acc(grads, &self.nodes, *b, &mut |dst| {
                    for p in 0..k {
                        for i in 0..m {
                            let a_ip = va[i * k + p];
                            for j in 0..n {
                                dst[p * n + j] = dst[p * n + j] + a_ip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (c, r) = self.nodes[i].value.dims2().unwrap();
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for j in 0..c {
                        for ii in 0..r {
                            dst[ii * c + j] = dst[ii * c + j] + g[j * r + ii];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.nodes[*x].value.data();
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for j in 0..dst.len() {
                        if vx[j] > S::zero() {
                            dst[j] = dst[j] + g[j];
                        }
                    }
                });
            }
            Op::Swish(x) => {
                let vx = self.nodes[*x].value.data();
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for j in 0..dst.len() {
                        let s = sigmoid(vx[j]);
                        let d = s * (S::one() + vx[j] * (S::one() - s));
                        dst[j] = dst[j] + g[j] * d;
                    }
                });
            }
            Op::Glu(x) => {
                let vx = self.nodes[*x].value.data();
                let d2 = self.nodes[*x].value.last_dim();
                let h = d2 / 2;
                let rows = self.nodes[*x].value.rows_of(d2);
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for r in 0..rows {
                        for j in 0..h {
                            let a = vx[r * d2 + j];
                            let s = sigmoid(vx[r * d2 + h + j]);
                            let gv = g[r * h + j];
                            dst[r * d2 + j] = dst[r * d2 + j] + gv * s;
                            dst[r * d2 + h + j] = dst[r * d2 + h + j] + gv * a * s * (S::one() - s);
                        }
                    }
                });
            }
            Op::Sqrt(x) => {
                let vy = self.nodes[i].value.data();
                let half = lit::<S>(0.5);
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] + g[j] * half / vy[j];
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let vx = self.nodes[*x].value.data();
                let vg = self.nodes[*gamma].value.data();
                let d = self.nodes[*gamma].value.numel();
                let rows = self.nodes[*x].value.rows_of(d);
                let eps = lit::<S>(LN_EPS);
                let dn = lit::<S>(d as f64);
                // Recompute per-row statistics; rows are short.
                let mut xhat = vec![S::zero(); rows * d];
                let mut inv = vec![S::zero(); rows];
                for r in 0..rows {
                    let row = &vx[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<S>() / dn;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                    inv[r] = S::one() / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * inv[r];
                    }
                }
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * vg[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = g[r * d + j] * vg[j];
                            dst[r * d + j] = dst[r * d + j] + inv[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
                acc(grads, &self.nodes, *gamma, &mut |dst| {
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] = dst[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(grads, &self.nodes, *beta, &mut |dst| {
                    for r in 0..rows {
                        for j in 0..d {
                            dst[j] = dst[j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, .. } => {
                let vy = self.nodes[i].value.data();
                let d = self.nodes[i].value.last_dim();
                let rows = self.nodes[i].value.rows_of(d);
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for r in 0..rows {
                        let mut dotp = S::zero();
                        for j in 0..d {
                            dotp = dotp + g[r * d + j] * vy[r * d + j];
                        }
                        for j in 0..d {
                            dst[r * d + j] = dst[r * d + j] + vy[r * d + j] * (g[r * d + j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let vy = self.nodes[i].value.data();
                let d = self.nodes[i].value.last_dim();
                let rows = self.nodes[i].value.rows_of(d);
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for r in 0..rows {
                        let gsum = g[r * d..(r + 1) * d].iter().copied().sum::<S>();
                        for j in 0..d {
                            dst[r * d + j] = dst[r * d + j] + g[r * d + j] - vy[r * d + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].value.dims2().unwrap().1;
                acc(grads, &self.nodes, *table, &mut |dst| {
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dst[id * d + j] = dst[id * d + j] + g[pos * d + j];
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, stride, pad } => {
                let (t_in, c_in) = self.nodes[*x].value.dims2().unwrap();
                let kshape = self.nodes[*kernel].value.shape();
                let (k, c_out) = (kshape[0], kshape[2]);
                let t_out = self.nodes[i].value.dims2().unwrap().0;
                let offset = match pad {
                    PadMode::Causal => k - 1,
                    PadMode::None => 0,
                };
                let vx = self.nodes[*x].value.data();
                let vw = self.nodes[*kernel].value.data();
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for t in 0..t_out {
                        for kk in 0..k {
                            let Some(src) = (t * stride + kk).checked_sub(offset) else { continue };
                            if src >= t_in {
                                continue;
                            }
                            for c in 0..c_in {
                                let mut s = S::zero();
                                for o in 0..c_out {
                                    s = s + g[t * c_out + o] * vw[(kk * c_in + c) * c_out + o];
                                }
                                dst[src * c_in + c] = dst[src * c_in + c] + s;
                            }
                        }
                    }
                });
                acc(grads, &self.nodes, *kernel, &mut |dst| {
                    for t in 0..t_out {
                        for kk in 0..k {
                            let Some(src) = (t * stride + kk).checked_sub(offset) else { continue };
                            if src >= t_in {
                                continue;
                            }
                            for c in 0..c_in {
                                let xv = vx[src * c_in + c];
                                for o in 0..c_out {
                                    dst[(kk * c_in + c) * c_out + o] =
                                        dst[(kk * c_in + c) * c_out + o] + xv * g[t * c_out + o];
                                }
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let (t_in, c) = self.nodes[*x].value.dims2().unwrap();
                let k = self.nodes[*kernel].value.dims2().unwrap().0;
                let vx = self.nodes[*x].value.data();
                let vw = self.nodes[*kernel].value.data();
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for t in 0..t_in {
                        for kk in 0..k {
                            let Some(src) = (t + kk).checked_sub(k - 1) else { continue };
                            for ch in 0..c {
                                dst[src * c + ch] = dst[src * c + ch] + g[t * c + ch] * vw[kk * c + ch];
                            }
                        }
                    }
                });
                acc(grads, &self.nodes, *kernel, &mut |dst| {
                    for t in 0..t_in {
                        for kk in 0..k {
                            let Some(src) = (t + kk).checked_sub(k - 1) else { continue };
                            for ch in 0..c {
                                dst[kk * c + ch] = dst[kk * c + ch] + vx[src * c + ch] * g[t * c + ch];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = lit::<S>(self.nodes[*x].value.numel() as f64);
                let gv = g[0] / n;
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let gv = g[0];
                acc(grads, &self.nodes, *a, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] + gv * vb[j];
                    }
                });
                acc(grads, &self.nodes, *b, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] + gv * va[j];
                    }
                });
            }
            Op::Row { x, index } => {
                let c = self.nodes[i].value.numel();
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for j in 0..c {
                        dst[index * c + j] = dst[index * c + j] + g[j];
                    }
                });
            }
            Op::NarrowCols { x, start, len } => {
                let (r, c) = self.nodes[*x].value.dims2().unwrap();
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for ii in 0..r {
                        for j in 0..*len {
                            dst[ii * c + start + j] = dst[ii * c + start + j] + g[ii * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let r = self.nodes[i].value.dims2().unwrap().0;
                let c_total = self.nodes[i].value.dims2().unwrap().1;
                let mut col0 = 0;
                for &x in xs {
                    let ci = self.nodes[x].value.dims2().unwrap().1;
                    acc(grads, &self.nodes, x, &mut |dst| {
                        for ii in 0..r {
                            for j in 0..ci {
                                dst[ii * ci + j] = dst[ii * ci + j] + g[ii * c_total + col0 + j];
                            }
                        }
                    });
                    col0 += ci;
                }
            }
            Op::Stack(xs) => {
                for (pos, &x) in xs.iter().enumerate() {
                    acc(grads, &self.nodes, x, &mut |dst| {
                        dst[0] = dst[0] + g[pos];
                    });
                }
            }
            Op::Index { x, index } => {
                let gv = g[0];
                acc(grads, &self.nodes, *x, &mut |dst| {
                    dst[*index] = dst[*index] + gv;
                });
            }
            Op::CustomScalar { x, grad } => {
                let gv = g[0];
                acc(grads, &self.nodes, *x, &mut |dst| {
                    for j in 0..dst.len() {
                        dst[j] = dst[j] + gv * grad[j];
                    }
                });
            }
        }
    }
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + a_ip * brow[j];
            }
        }
    }
    out
}

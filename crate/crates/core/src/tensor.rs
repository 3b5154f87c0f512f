//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Every operation on a [`Graph`] evaluates eagerly and appends a node, so the
//! node list is already in topological order. [`Graph::backward`] walks it in
//! reverse. Leaf gradients persist across calls and accumulate; intermediate
//! gradients are rebuilt each time.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Variance floor used by layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch("gradient length".into()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Relu,
    Tanh,
    Abs,
    Softmax,
    LayerNorm,
    EmbeddingLookup,
    DropoutMask,
    CrossEntropy,
    Reshape,
    Transpose,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Mean(Var),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Abs(_) => OpKind::Abs,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::EmbeddingLookup,
            Op::Dropout { .. } => OpKind::DropoutMask,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Transpose,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Gradients of the requires-grad leaves after a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(&var).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &[f64])> {
        self.grads.iter().map(|(v, g)| (*v, g.as_slice()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    released: bool,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn add_into(dst: &mut Vec<f64>, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n
    // and m×n views; c does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the layout of `shape` permuted by `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let rank = out_shape.len();
    if rank == 0 {
        return src.to_vec();
    }
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    loop {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&src_strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        // odometer over the leading axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; `tensor.requires_grad()` decides whether backward reaches it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(Op::Leaf, tensor.shape, tensor.data, rg)
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_requires_grad(true)))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// The node's output as an owned tensor.
    pub fn eval(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drops intermediate values; further backward calls fail.
    pub fn release(&mut self) {
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.value = Vec::new();
                n.grad = None;
            }
        }
        self.released = true;
    }

    // ---- primitive ops ----

    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    k as isize,
                    1,
                    &bv[i * k * n..],
                    n as isize,
                    1,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        check_finite(&out, "matmul")?;
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, batch, m, k, n }, shape, out, rg))
    }

    /// Elementwise sum; `b` may also match the trailing dimensions of `a`
    /// (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::ShapeMismatch(format!("add {sa:?} + {sb:?}")));
        }
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(bv.len().max(1)) {
            for (o, y) in row.iter_mut().zip(bv) {
                *o += y;
            }
        }
        check_finite(&out, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, sa, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&out, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, shape, out, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        check_finite(&out, "scale")?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Scale { a, c }, shape, out, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `|x|`, with subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the last axis of `[.., T, T]` scores where query `i` only
    /// sees keys `j <= i`. Masked entries come out as exact zeros.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::ShapeMismatch("softmax of a scalar".into()))?;
        if causal && (shape.len() < 2 || shape[shape.len() - 2] != cols) {
            return Err(Error::ShapeMismatch(format!("causal softmax needs square scores, got {shape:?}")));
        }
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; x.len()];
        for (r, (row, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let visible = if causal { r % cols + 1 } else { cols };
            let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &v) in dst[..visible].iter_mut().zip(&row[..visible]) {
                *d = (v - max).exp();
                total += *d;
            }
            for d in &mut dst[..visible] {
                *d /= total;
            }
        }
        check_finite(&out, "softmax")?;
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax { a }, shape, out, rg))
    }

    /// Layer normalisation over the last axis with gain and bias of that length.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::ShapeMismatch("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch("layer_norm gain/bias".into()));
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        check_finite(&out, "layer_norm")?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            shape,
            out,
            rg,
        ))
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => return Err(Error::ShapeMismatch(format!("embedding table {s:?}"))),
        };
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::VocabOverflow { id, vocab });
        }
        let t = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Embedding { table, ids: ids.to_vec() },
            vec![ids.len(), dim],
            out,
            rg,
        ))
    }

    /// Multiplies by a recorded mask (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.nodes[a.0].value.len() {
            return Err(Error::ShapeMismatch("dropout mask length".into()));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Dropout { a, mask }, shape, out, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = match self.shape(logits) {
            [n, c] => (*n, *c),
            s => return Err(Error::ShapeMismatch(format!("cross_entropy logits {s:?}"))),
        };
        if targets.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::VocabOverflow { id, vocab: c });
        }
        let x = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= z;
            }
            total += z.ln() + max - row[targets[r]];
        }
        let loss = total / n as f64;
        check_finite(&[loss], "cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            vec![],
            vec![loss],
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), shape, out, rg))
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::ShapeMismatch(format!("permutation {perm:?} of {shape:?}")));
        }
        let out = permute_data(&self.nodes[a.0].value, &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Permute { a, perm: perm.to_vec() }, out_shape, out, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::ShapeMismatch("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), vec![], vec![m], rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![], vec![s], rg)
    }

    // ---- reverse pass ----

    /// Propagates d(loss)/d(node) to every requires-grad leaf. Leaf gradients
    /// accumulate over repeated calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.released {
            return Err(Error::GraphConsumed);
        }
        if !self.shape(loss).is_empty() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        let mut upstream: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        upstream[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = upstream[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(g) => add_into(g, &dy),
                    slot => *slot = Some(dy),
                }
                continue;
            }
            for (input, g) in self.local_grads(i, dy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut upstream[input.0] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut out = Gradients::default();
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                let g = n.grad.clone().unwrap_or_else(|| vec![0.0; n.value.len()]);
                out.grads.insert(Var(i), g);
            }
        }
        Ok(out)
    }

    fn local_grads(&self, i: usize, dy: Vec<f64>) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, batch, m, k, n } => {
                let mut out = Vec::with_capacity(2);
                if self.rg(a) {
                    let bv = val(b);
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        // dA = dY · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &dy[t * m * n..],
                            n as isize,
                            1,
                            &bv[t * k * n..],
                            1,
                            n as isize,
                            &mut da[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let av = val(a);
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        // dB = Aᵀ · dY
                        gemm(
                            k,
                            m,
                            n,
                            &av[t * m * k..],
                            1,
                            k as isize,
                            &dy[t * m * n..],
                            n as isize,
                            1,
                            &mut db[t * k * n..(t + 1) * k * n],
                            false,
                        );
                    }
                    out.push((b, db));
                }
                out
            }
            &Op::Add { a, b } => {
                let period = val(b).len().max(1);
                let mut db = vec![0.0; period];
                for row in dy.chunks(period) {
                    add_into(&mut db, row);
                }
                vec![(a, dy), (b, db)]
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                vec![
                    (a, dy.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (b, dy.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            &Op::Scale { a, c } => vec![(a, dy.iter().map(|g| g * c).collect())],
            &Op::Relu(a) => vec![(
                a,
                dy.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            &Op::Tanh(a) => vec![(
                a,
                dy.iter()
                    .zip(&node.value)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            )],
            &Op::Abs(a) => vec![(
                a,
                dy.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -*g } else { 0.0 })
                    .collect(),
            )],
            &Op::Softmax { a } => {
                let cols = *node.shape.last().unwrap();
                let mut dx = vec![0.0; dy.len()];
                for ((p, g), d) in node
                    .value
                    .chunks(cols)
                    .zip(dy.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
                    for j in 0..cols {
                        d[j] = p[j] * (g[j] - dot);
                    }
                }
                vec![(a, dx)]
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *node.shape.last().unwrap();
                let g = val(*gain);
                let mut dx = vec![0.0; dy.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, is) in inv_std.iter().enumerate() {
                    let dyr = &dy[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgain[j] += dyr[j] * xh[j];
                        dbias[j] += dyr[j];
                        dxhat[j] = dyr[j] * g[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xh[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Embedding { table, ids } => {
                let dim = self.nodes[table.0].shape[1];
                let mut dt = vec![0.0; self.nodes[table.0].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt[id * dim + j] += dy[r * dim + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::Dropout { a, mask } => {
                vec![(*a, dy.iter().zip(mask).map(|(g, m)| g * m).collect())]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = dy[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= scale;
                }
                vec![(*logits, dl)]
            }
            &Op::Reshape(a) => vec![(a, dy)],
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*a, permute_data(&dy, &node.shape, &inverse))]
            }
            &Op::Mean(a) => {
                let n = val(a).len();
                vec![(a, vec![dy[0] / n as f64; n])]
            }
            &Op::Sum(a) => vec![(a, vec![dy[0]; val(a).len()])],
        }
    }
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub worst_index: usize,
    pub worst_rel_error: f64,
    /// Coordinates whose one-sided slopes disagree, i.e. the function has a
    /// kink there and no gradient exists.
    pub kinks: Vec<usize>,
    pub rel_tol: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors of near-zero gradient entries.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` with central differences of `f` at `x` on the given
/// coordinates (all coordinates when `coords` is `None`).
pub fn compare_with_finite_differences<F>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    rel_tol: f64,
) -> Result<CheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    assert!(rel_tol > 0.0, "rel_tol must be positive");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let f0 = f(x)?;
    let mut probe = x.to_vec();
    let mut report = CheckReport {
        checked: coords.len(),
        worst_index: 0,
        worst_rel_error: 0.0,
        kinks: Vec::new(),
        rel_tol,
        passed: true,
    };
    for &i in coords {
        let h = 1e-5 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        let central = (fp - fm) / (2.0 * h);
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        if (forward - backward).abs() > 1e-2 * central.abs().max(1.0) {
            report.kinks.push(i);
        }
        let a = analytic[i];
        let err = (a - central).abs() / a.abs().max(central.abs()).max(GRAD_CHECK_FLOOR);
        if err > report.worst_rel_error {
            report.worst_rel_error = err;
            report.worst_index = i;
        }
    }
    report.passed = report.worst_rel_error <= rel_tol && report.kinks.is_empty();
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh graph from leaf `x`.
pub fn grad_check<F>(f: F, x: &Tensor, rel_tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let shape = x.shape().to_vec();
    let build = |values: &[f64], rg: bool| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::new(shape.clone(), values.to_vec())?.with_requires_grad(rg));
        let out = f(&mut g, leaf)?;
        Ok((g, out))
    };
    let (mut g, out) = build(x.data(), true)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .iter()
        .next()
        .map(|(_, d)| d.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    compare_with_finite_differences(
        |v| {
            let (g, out) = build(v, false)?;
            Ok(g.value(out)[0])
        },
        x.data(),
        &analytic,
        None,
        rel_tol,
    )
}

use super::conv::{self, ConvGeom};
use super::{dim_err, gemm, Element, MatRef, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node obtains its statistics.
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics; the node reports them for the caller
    /// to fold into running averages.
    Train { eps: T },
    /// Normalize with the given running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch statistics from a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the convention for running estimates.
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    SumAll(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    MaskedLogSumExpRows {
        x: Var,
        /// softmax weights over the masked entries, zero elsewhere
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of tensor operations supporting one reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    backward_done: bool,
    macs: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// How `b` is laid out relative to `a` in a broadcasting binary op.
enum Bcast {
    Same,
    /// each b element covers a contiguous run of `inner` a-elements
    Blocks { inner: usize },
    /// b repeats cyclically over a
    Cycle { period: usize },
    General { a_shape: Vec<usize>, strides: Vec<usize> },
}

impl Bcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self::Same);
        }
        if b.len() > a.len() {
            return Err(dim_err(op, format!("cannot broadcast {b:?} onto {a:?}")));
        }
        let offset = a.len() - b.len();
        let mut aligned = vec![1usize; offset];
        aligned.extend_from_slice(b);
        for (da, db) in a.iter().zip(&aligned) {
            if db != da && *db != 1 {
                return Err(dim_err(op, format!("cannot broadcast {b:?} onto {a:?}")));
            }
        }
        // prefix match followed by ones
        let mut split = 0;
        while split < a.len() && aligned[split] == a[split] {
            split += 1;
        }
        if aligned[split..].iter().all(|&d| d == 1) {
            return Ok(Self::Blocks {
                inner: a[split..].iter().product(),
            });
        }
        // ones followed by suffix match
        let mut lead = 0;
        while lead < a.len() && aligned[lead] == 1 {
            lead += 1;
        }
        if aligned[lead..] == a[lead..] {
            return Ok(Self::Cycle {
                period: a[lead..].iter().product(),
            });
        }
        let mut strides = vec![0usize; a.len()];
        let mut s = 1;
        for d in (0..a.len()).rev() {
            if aligned[d] != 1 {
                strides[d] = s;
            }
            s *= aligned[d];
        }
        Ok(Self::General {
            a_shape: a.to_vec(),
            strides,
        })
    }

    /// Index into b for every a index, in order.
    fn b_indices(&self, n: usize) -> Vec<usize> {
        match self {
            Self::Same => (0..n).collect(),
            Self::Blocks { inner } => (0..n).map(|i| i / inner).collect(),
            Self::Cycle { period } => (0..n).map(|i| i % period).collect(),
            Self::General { a_shape, strides } => {
                let mut out = Vec::with_capacity(n);
                let mut counter = vec![0usize; a_shape.len()];
                let mut cur = 0usize;
                for _ in 0..n {
                    out.push(cur);
                    for d in (0..a_shape.len()).rev() {
                        counter[d] += 1;
                        cur += strides[d];
                        if counter[d] < a_shape[d] {
                            break;
                        }
                        cur -= strides[d] * counter[d];
                        counter[d] = 0;
                    }
                }
                out
            }
        }
    }
}

impl<T: Element> Graph<T> {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            macs: 0,
        }
    }

    /// A graph for forward evaluation only; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by conv/matmul nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(dim_err("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(dim_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            T::ZERO,
            &mut out,
        );
        self.macs += (m * k * n) as u64;
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matrix product of `[B×M×K]` and `[B×K×N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[ba, m, k], &[bb, k2, n]) = (sa, sb) else {
            return Err(dim_err("bmm", format!("expected 3-D operands, got {sa:?} and {sb:?}")));
        };
        if ba != bb || k != k2 {
            return Err(dim_err("bmm", format!("{sa:?} × {sb:?}")));
        }
        let mut out = vec![T::ZERO; ba * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            gemm(
                MatRef::new(&da[i * m * k..][..m * k], m, k),
                MatRef::new(&db[i * k * n..][..k * n], k, n),
                T::ZERO,
                &mut out[i * m * n..][..m * n],
            );
        }
        self.macs += (ba * m * k * n) as u64;
        let value = Tensor::new(&[ba, m, n], out)?;
        self.push("bmm", value, Op::Bmm(a, b), &[a, b])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err("transpose", format!("rank {} < 2", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let data = transpose_blocks(self.value(x).data(), r, c);
        let mut out_shape = shape;
        let nd = out_shape.len();
        out_shape.swap(nd - 2, nd - 1);
        let value = Tensor::new(&out_shape, data)?;
        self.push("transpose", value, Op::TransposeLast2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Affine map `x·w + b` for `x: [B×I]`, `w: [I×O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ----- convolution and pooling ---------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom) = conv::conv2d_forward(
            self.value(x).data(),
            self.shape(x),
            self.value(w).data(),
            self.shape(w),
            stride,
            pad,
        )?;
        let cout = self.shape(w)[0];
        self.macs += (geom.col_rows() * geom.col_cols() * cout) as u64;
        let value = Tensor::new(&[geom.batch, cout, geom.ho, geom.wo], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), k, stride, pad)?;
        if pad >= k {
            return Err(dim_err("max_pool2d", "padding must be smaller than the window"));
        }
        let (out, argmax) = conv::maxpool_forward(self.value(x).data(), &geom);
        let value = Tensor::new(&[geom.batch, geom.cin, geom.ho, geom.wo], out)?;
        self.push("max_pool2d", value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Mean over all axes after the channel axis, keeping them as size 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 || shape[2..].iter().any(|&d| d == 0) {
            return Err(dim_err("global_avg_pool", format!("expected B×C×H×W, got {shape:?}")));
        }
        let s: usize = shape[2..].iter().product();
        let inv = T::of(1.0 / s as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let mut out_shape = shape[..2].to_vec();
        out_shape.extend(std::iter::repeat_n(1, shape.len() - 2));
        let value = Tensor::new(&out_shape, data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Batch normalization over axis 1 of a `[B×C×…]` tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err("batch_norm", format!("rank {} < 2", shape.len())));
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if b == 0 || s == 0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                detail: "empty batch".into(),
            });
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(
                "batch_norm",
                format!("affine params must be [{c}], got {:?}", self.shape(gamma)),
            ));
        }
        let xd = self.value(x).data();
        let n = b * s;
        let (mean, var, stats) = match mode {
            BnMode::Train { eps } => {
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for bi in 0..b {
                    for ci in 0..c {
                        mean[ci] += xd[(bi * c + ci) * s..][..s].iter().copied().sum::<T>();
                    }
                }
                let inv_n = T::of(1.0 / n as f64);
                mean.iter_mut().for_each(|m| *m *= inv_n);
                for bi in 0..b {
                    for ci in 0..c {
                        let m = mean[ci];
                        var[ci] += xd[(bi * c + ci) * s..][..s]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                }
                let unbiased_scale = if n > 1 { T::of(1.0 / (n - 1) as f64) } else { T::ZERO };
                let var_unbiased = var.iter().map(|&v| v * unbiased_scale).collect();
                var.iter_mut().for_each(|v| *v *= inv_n);
                let stats = BnStats {
                    mean: mean.clone(),
                    var_unbiased,
                };
                (mean, var.into_iter().map(|v| v + eps).collect::<Vec<_>>(), Some(stats))
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.iter().map(|&v| v + eps).collect(), None)
            }
        };
        let train = stats.is_some();
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / v.sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut out = vec![T::ZERO; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for j in off..off + s {
                    let h = (xd[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = h * gd[ci] + bd[ci];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    // ----- elementwise ----------------------------------------------------

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::ZERO { v } else { T::ZERO }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    fn row_len(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(dim_err(op, format!("invalid shape {:?}", self.shape(x)))),
        }
    }

    /// Softmax along the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.row_len("softmax", x)?;
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(n).for_each(softmax_row);
        let value = Tensor::new(self.shape(x), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.row_len("log_softmax", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Elementwise `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise `a ⊙ b`, with `b` broadcast onto `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let plan = Bcast::plan(name, self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = match &plan {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            // per-channel gates over whole feature maps land here, so keep it a tight loop
            Bcast::Blocks { inner } => {
                let mut out = Vec::with_capacity(ad.len());
                for (run, &y) in ad.chunks(*inner).zip(bd) {
                    out.extend(run.iter().map(|&x| f(x, y)));
                }
                out
            }
            Bcast::Cycle { period } => ad
                .chunks(*period)
                .flat_map(|run| run.iter().zip(bd))
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Bcast::General { .. } => {
                let idx = plan.b_indices(ad.len());
                ad.iter().zip(idx).map(|(&x, j)| f(x, bd[j])).collect()
            }
        };
        let value = Tensor::new(self.shape(a), out)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(dim_err("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Scale every row of a `[N×D]` tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.row_len("l2_normalize_rows", x)?;
        let xd = self.value(x).data();
        let norms: Vec<T> = xd
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12)))
            .collect();
        let out: Vec<T> = xd
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |&v| v / n))
            .collect();
        let value = Tensor::new(self.shape(x), out)?;
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Per-row `ln Σ exp(x)` restricted to entries where `mask` is set. Rows
    /// with an empty mask produce 0 and receive no gradient.
    pub fn masked_logsumexp_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.row_len("masked_logsumexp_rows", x)?;
        let xd = self.value(x).data();
        if mask.len() != xd.len() {
            return Err(dim_err("masked_logsumexp_rows", "mask length"));
        }
        let rows = xd.len() / n;
        let mut out = vec![T::ZERO; rows];
        let mut weights = vec![T::ZERO; xd.len()];
        for r in 0..rows {
            let (row, m) = (&xd[r * n..][..n], &mask[r * n..][..n]);
            if !m.iter().any(|&b| b) {
                continue;
            }
            let lse = logsumexp(row.iter().zip(m).filter(|(_, &b)| b).map(|(&v, _)| v));
            out[r] = lse;
            for j in 0..n {
                if m[j] {
                    weights[r * n + j] = (row[j] - lse).exp();
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.pop();
        let value = Tensor::new(&shape, out)?;
        self.push(
            "masked_logsumexp_rows",
            value,
            Op::MaskedLogSumExpRows { x, weights },
            &[x],
        )
    }

    // ----- reverse sweep --------------------------------------------------

    /// Accumulate d(root)/d(leaf) into every leaf that requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.backward_done = true;
        if !self.needs(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[T]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut contributions: Vec<(Var, Vec<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![T::ZERO; m * k];
                    gemm(
                        MatRef::new(gout, m, n),
                        MatRef::t(self.value(*b).data(), k, n),
                        T::ZERO,
                        &mut ga,
                    );
                    contributions.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::ZERO; k * n];
                    gemm(
                        MatRef::t(self.value(*a).data(), m, k),
                        MatRef::new(gout, m, n),
                        T::ZERO,
                        &mut gb,
                    );
                    contributions.push((*b, gb));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = vec![T::ZERO; bs * m * k];
                    for t in 0..bs {
                        gemm(
                            MatRef::new(&gout[t * m * n..][..m * n], m, n),
                            MatRef::t(&bd[t * k * n..][..k * n], k, n),
                            T::ZERO,
                            &mut ga[t * m * k..][..m * k],
                        );
                    }
                    contributions.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::ZERO; bs * k * n];
                    for t in 0..bs {
                        gemm(
                            MatRef::t(&ad[t * m * k..][..m * k], m, k),
                            MatRef::new(&gout[t * m * n..][..m * n], m, n),
                            T::ZERO,
                            &mut gb[t * k * n..][..k * n],
                        );
                    }
                    contributions.push((*b, gb));
                }
            }
            Op::TransposeLast2(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                contributions.push((*x, transpose_blocks(gout, r, c)));
            }
            Op::Reshape(x) => contributions.push((*x, gout.to_vec())),
            Op::Conv2d { x, w, geom } => {
                let cout = self.shape(*w)[0];
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    cout,
                    geom,
                    gout,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    contributions.push((*x, dx));
                }
                if let Some(dw) = dw {
                    contributions.push((*w, dw));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::ZERO; self.value(*x).len()];
                for (g, &j) in gout.iter().zip(argmax) {
                    dx[j] += *g;
                }
                contributions.push((*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (b, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        for j in off..off + s {
                            dgamma[ci] += gout[j] * xhat[j];
                            dbeta[ci] += gout[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gd = self.value(*gamma).data();
                    let mut dx = vec![T::ZERO; gout.len()];
                    let n = T::of((b * s) as f64);
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            let k = gd[ci] * inv_std[ci];
                            for j in off..off + s {
                                dx[j] = if *train {
                                    k * (gout[j] - (dbeta[ci] + xhat[j] * dgamma[ci]) / n)
                                } else {
                                    k * gout[j]
                                };
                            }
                        }
                    }
                    contributions.push((*x, dx));
                }
                contributions.push((*gamma, dgamma));
                contributions.push((*beta, dbeta));
            }
            Op::GlobalAvgPool(x) => {
                let n = self.value(*x).len();
                let s = n / gout.len();
                let inv = T::of(1.0 / s as f64);
                let dx = (0..n).map(|j| gout[j / s] * inv).collect();
                contributions.push((*x, dx));
            }
            Op::Relu(x) => {
                let dx = gout
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::ZERO { g } else { T::ZERO })
                    .collect();
                contributions.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = gout.iter().zip(out).map(|(&g, &y)| g * y * (T::ONE - y)).collect();
                contributions.push((*x, dx));
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                let dx = gout.iter().zip(xd).map(|(&g, &v)| g * sigmoid(v)).collect();
                contributions.push((*x, dx));
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("rank");
                let mut dx = vec![T::ZERO; gout.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                contributions.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().expect("rank");
                let mut dx = vec![T::ZERO; gout.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)) {
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                contributions.push((*x, dx));
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let plan = Bcast::plan("backward", self.shape(*a), self.shape(*b))?;
                let bidx = plan.b_indices(gout.len());
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = if is_mul {
                        gout.iter().zip(&bidx).map(|(&g, &j)| g * bd[j]).collect()
                    } else {
                        gout.to_vec()
                    };
                    contributions.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::ZERO; bd.len()];
                    for (k, (&g, &j)) in gout.iter().zip(&bidx).enumerate() {
                        db[j] += if is_mul { g * ad[k] } else { g };
                    }
                    contributions.push((*b, db));
                }
            }
            Op::Scale(x, c) => contributions.push((*x, gout.iter().map(|&g| g * *c).collect())),
            Op::AddScalar(x) => contributions.push((*x, gout.to_vec())),
            Op::SumAll(x) => contributions.push((*x, vec![gout[0]; self.value(*x).len()])),
            Op::L2NormalizeRows { x, norms } => {
                let d = *node.value.shape().last().expect("rank");
                let mut dx = vec![T::ZERO; gout.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let (yr, gr) = (&out[r * d..][..d], &gout[r * d..][..d]);
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / nrm;
                    }
                }
                contributions.push((*x, dx));
            }
            Op::MaskedLogSumExpRows { x, weights } => {
                let n = weights.len() / gout.len();
                let dx = weights.iter().enumerate().map(|(j, &w)| w * gout[j / n]).collect();
                contributions.push((*x, dx));
            }
        }
        for (v, g) in contributions {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

fn transpose_blocks<T: Element>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; data.len()];
    if r * c == 0 {
        return out;
    }
    for (src, dst) in data.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn softplus<T: Element>(v: T) -> T {
    let a = if v > T::ZERO { v } else { -v };
    v.max(T::ZERO) + (T::ONE + (-a).exp()).ln()
}

fn logsumexp<T: Element>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(None::<T>, |acc, v| Some(acc.map_or(v, |a| a.max(v))));
    let Some(m) = m else { return T::ZERO };
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(row[0], T::max);
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

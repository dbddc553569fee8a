//! Define-by-run tape with reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor produced while building a computation.
//! Recording an operation evaluates it eagerly and returns a [`Var`]
//! handle; [`Graph::backward`] replays the chain rule from a scalar loss
//! and accumulates gradients for every tensor that needs one.
//!
//! Conventions fixed here so results are deterministic:
//! - `relu` and `abs` have derivative 0 at exactly 0;
//! - gradient contributions are summed in reverse recording order;
//! - a graph is confined to one thread, parallelism may only live inside
//!   a kernel and must not change results.

use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    AvgPool2d {
        x: Var,
        window: usize,
    },
    Gap(Var),
    Reshape(Var),
    L2NormalizeRows {
        x: Var,
        eps: f64,
    },
    SumAll(Var),
    MeanAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    CwMargin {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<E>>,
}

/// Path choice for convolutions: shift-and-scale passes beat the im2col
/// matmul on large stride-1 output planes (long contiguous inner rows);
/// everything else amortizes better through one patch matrix. Depends
/// only on shapes, so a given graph is always evaluated the same way.
fn conv_use_direct(oh: usize, ow: usize, stride: usize) -> bool {
    stride == 1 && oh * ow > 200
}

/// Recorded computation: an append-only list of nodes in topological order.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert an input tensor. Only leaves may require gradients.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    /// Insert a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last `backward`, zeros if none reached v.
    pub fn grad(&self, v: Var) -> Tensor<E> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_vec(node.value.shape().to_vec(), g.clone())
                .expect("grad length always matches value"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Whether v is a leaf that accumulates gradients.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<E>,
        op: Op,
        requires_grad: bool,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), false, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), false, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), false, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let factor = E::from_f64(c);
        let value = self.nodes[a.0].value.map(|v| v * factor);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), false, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.maximum(E::ZERO));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), false, needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.abs());
        let needs = self.needs(a);
        self.push(value, Op::Abs(a), false, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.exp());
        let needs = self.needs(a);
        self.push(value, Op::Exp(a), false, needs)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        kernels::matmul_nn_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::from_vec(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), false, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "transpose expects a rank-2 tensor, got shape {sa:?}"
            )));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::from_vec(vec![n, m], out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), false, needs))
    }

    /// Cross-correlation with zero padding: x[B,C,H,W] * kernel[O,C,kh,kw].
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::DimensionMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidInput("conv2d stride must be positive".into()));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = match (
            kernels::conv_out_extent(h, kh, stride, padding),
            kernels::conv_out_extent(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::DimensionMismatch {
                    op: "conv2d output extent",
                    lhs: sx,
                    rhs: sk,
                })
            }
        };
        let mut out = vec![E::ZERO; b * o * oh * ow];
        if conv_use_direct(oh, ow, stride) {
            kernels::conv2d_direct_fwd(
                self.nodes[x.0].value.data(),
                self.nodes[kernel.0].value.data(),
                b,
                c,
                h,
                w,
                o,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut out,
            );
        } else {
            // small output planes: per-coefficient passes cost more than
            // materializing patches once and running one matmul
            let cols = kernels::im2col(
                self.nodes[x.0].value.data(),
                b,
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
            );
            let patch = c * kh * kw;
            let rows = b * oh * ow;
            let kd = self.nodes[kernel.0].value.data();
            let mut kmat_t = vec![E::ZERO; patch * o];
            for oi in 0..o {
                for p in 0..patch {
                    kmat_t[p * o + oi] = kd[oi * patch + p];
                }
            }
            let mut out_rows = vec![E::ZERO; rows * o];
            kernels::matmul_nn_acc(&cols, &kmat_t, rows, patch, o, &mut out_rows);
            for bi in 0..b {
                for y in 0..oh {
                    for xx in 0..ow {
                        let row = ((bi * oh + y) * ow + xx) * o;
                        for oi in 0..o {
                            out[((bi * o + oi) * oh + y) * ow + xx] = out_rows[row + oi];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![b, o, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            },
            false,
            needs,
        ))
    }

    /// x[B,N] + bias[N], broadcast over the batch dimension.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "add_row_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (b, n) = (sx[0], sx[1]);
        let xd = self.nodes[x.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![E::ZERO; b * n];
        for i in 0..b {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] + bd[j];
            }
        }
        let value = Tensor::from_vec(sx, out)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias(x, bias), false, needs))
    }

    /// x[B,C,H,W] + bias[C], broadcast over batch and spatial dimensions.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::DimensionMismatch {
                op: "add_channel_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let xd = self.nodes[x.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![E::ZERO; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let bias_v = bd[ci];
                for s in 0..h * w {
                    out[base + s] = xd[base + s] + bias_v;
                }
            }
        }
        let value = Tensor::from_vec(sx, out)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddChannelBias(x, bias), false, needs))
    }

    /// Non-overlapping window-mean pooling with stride == window.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "avg_pool2d expects [B,C,H,W], got {sx:?}"
            )));
        }
        if window == 0 || sx[2] % window != 0 || sx[3] % window != 0 {
            return Err(Error::DimensionMismatch {
                op: "avg_pool2d window",
                lhs: sx,
                rhs: vec![window, window],
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / window, w / window);
        let xd = self.nodes[x.0].value.data();
        let denom = E::from_f64((window * window) as f64);
        let mut out = vec![E::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let plane = bc * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = E::ZERO;
                    for dy in 0..window {
                        let row = plane + (y * window + dy) * w + xx * window;
                        for dx in 0..window {
                            acc = acc + xd[row + dx];
                        }
                    }
                    out[bc * oh * ow + y * ow + xx] = acc / denom;
                }
            }
        }
        let value = Tensor::from_vec(vec![b, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::AvgPool2d { x, window }, false, needs))
    }

    /// Global average pooling: [B,C,H,W] -> [B,C], the spatial mean per channel.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "gap expects [B,C,H,W], got {sx:?}"
            )));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("gap needs H,W >= 1".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let denom = E::from_f64((h * w) as f64);
        let mut out = vec![E::ZERO; b * c];
        for (bc, o) in out.iter_mut().enumerate() {
            let plane = bc * h * w;
            let mut acc = E::ZERO;
            for s in 0..h * w {
                acc = acc + xd[plane + s];
            }
            *o = acc / denom;
        }
        let value = Tensor::from_vec(vec![b, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gap(x), false, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), false, needs))
    }

    /// Row-wise L2 normalization of [B,C]; rows with norm below `eps` are
    /// divided by `eps` instead, so degenerate rows stay finite.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "l2_normalize_rows expects [B,C], got {sx:?}"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidConfig("eps_norm must be positive".into()));
        }
        let (b, c) = (sx[0], sx[1]);
        let xd = self.nodes[x.0].value.data();
        let eps_e = E::from_f64(eps);
        let mut out = vec![E::ZERO; b * c];
        for i in 0..b {
            let row = &xd[i * c..(i + 1) * c];
            let mut sq = E::ZERO;
            for &v in row {
                sq = sq + v * v;
            }
            let denom = sq.sqrt().maximum(eps_e);
            for (j, &v) in row.iter().enumerate() {
                out[i * c + j] = v / denom;
            }
        }
        let value = Tensor::from_vec(sx, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::L2NormalizeRows { x, eps }, false, needs))
    }

    // ---- reductions & losses ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x), false, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel().max(1);
        let mut acc = E::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let mean = acc / E::from_f64(n as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), false, needs)
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::InvalidInput(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, k) = (s[0], s[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::InvalidInput(format!(
                    "label {y} at row {i} out of range for {k} classes"
                )));
            }
        }
        let xd = self.nodes[logits.0].value.data();
        let mut total = E::ZERO;
        for (i, &y) in labels.iter().enumerate() {
            let row = &xd[i * k..(i + 1) * k];
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut z = E::ZERO;
            for &v in row {
                z = z + (v - m).exp();
            }
            total = total + (m + z.ln() - row[y]);
        }
        let mean = total / E::from_f64(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            false,
            needs,
        ))
    }

    /// Mean over the batch of max_{j != y} logit_j - logit_y.
    /// Maximizing this drives the margin-based evaluation attack.
    pub fn cw_margin(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::InvalidInput(format!(
                "cw_margin: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, k) = (s[0], s[1]);
        if k < 2 {
            return Err(Error::InvalidConfig(
                "cw_margin needs at least 2 classes".into(),
            ));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::InvalidInput(format!(
                    "label {y} at row {i} out of range for {k} classes"
                )));
            }
        }
        let xd = self.nodes[logits.0].value.data();
        let mut total = E::ZERO;
        for (i, &y) in labels.iter().enumerate() {
            let row = &xd[i * k..(i + 1) * k];
            let mut best = E::from_f64(f64::NEG_INFINITY);
            for (j, &v) in row.iter().enumerate() {
                if j != y && v > best {
                    best = v;
                }
            }
            total = total + (best - row[y]);
        }
        let mean = total / E::from_f64(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CwMargin {
                logits,
                labels: labels.to_vec(),
            },
            false,
            needs,
        ))
    }

    // ---- backward ----

    /// Populate gradients of every reachable tensor w.r.t. a scalar loss.
    /// A tensor used several times receives the sum of its contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let go = rest[0].as_ref().expect("checked above");
            self.backward_step(i, go, before)?;
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = grad;
        }
        Ok(())
    }

    /// Accumulate `go` (gradient at node `i`) into the node's inputs.
    /// `grads` covers nodes with index < i; inputs always precede outputs.
    fn backward_step(&self, i: usize, go: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        fn acc_into<'g, E: Element>(
            grads: &'g mut [Option<Vec<E>>],
            v: Var,
            len: usize,
        ) -> &'g mut Vec<E> {
            grads[v.0].get_or_insert_with(|| vec![E::ZERO; len])
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(v, _other) in &[(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let g = acc_into(grads, v, go.len());
                        for (gi, &o) in g.iter_mut().zip(go) {
                            *gi = *gi + o;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let g = acc_into(grads, *a, go.len());
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi = *gi + o;
                    }
                }
                if self.needs(*b) {
                    let g = acc_into(grads, *b, go.len());
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi = *gi - o;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let g = acc_into(grads, *a, go.len());
                    for ((gi, &o), &bv) in g.iter_mut().zip(go).zip(bd) {
                        *gi = *gi + o * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let g = acc_into(grads, *b, go.len());
                    for ((gi, &o), &av) in g.iter_mut().zip(go).zip(ad) {
                        *gi = *gi + o * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let f = E::from_f64(*c);
                    let g = acc_into(grads, *a, go.len());
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi = *gi + o * f;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let g = acc_into(grads, *a, go.len());
                    for ((gi, &o), &xv) in g.iter_mut().zip(go).zip(xd) {
                        if xv > E::ZERO {
                            *gi = *gi + o;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                // d|x|/dx at 0 is taken as 0.
                if self.needs(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let g = acc_into(grads, *a, go.len());
                    for ((gi, &o), &xv) in g.iter_mut().zip(go).zip(xd) {
                        if xv > E::ZERO {
                            *gi = *gi + o;
                        } else if xv < E::ZERO {
                            *gi = *gi - o;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let yd = self.nodes[i].value.data();
                    let g = acc_into(grads, *a, go.len());
                    for ((gi, &o), &yv) in g.iter_mut().zip(go).zip(yd) {
                        *gi = *gi + o * yv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let g = acc_into(grads, *a, m * k);
                    // dA = dC . B^T ; B stored [k,n] so treat as transposed rows
                    kernels::matmul_nt_acc(go, bd, m, n, k, g);
                }
                if self.needs(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let g = acc_into(grads, *b, k * n);
                    // dB = A^T . dC
                    kernels::matmul_tn_acc(ad, go, m, k, n, g);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let g = acc_into(grads, *a, m * n);
                    // go has shape [n, m]
                    for j in 0..n {
                        for ii in 0..m {
                            g[ii * n + j] = g[ii * n + j] + go[j * m + ii];
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                self.backward_conv2d(i, go, grads, *x, *kernel, *stride, *padding);
            }
            Op::AddRowBias(x, bias) => {
                let (b, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                if self.needs(*x) {
                    let g = acc_into(grads, *x, b * n);
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi = *gi + o;
                    }
                }
                if self.needs(*bias) {
                    let g = acc_into(grads, *bias, n);
                    for bi in 0..b {
                        for j in 0..n {
                            g[j] = g[j] + go[bi * n + j];
                        }
                    }
                }
            }
            Op::AddChannelBias(x, bias) => {
                let sx = self.shape(*x);
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                if self.needs(*x) {
                    let g = acc_into(grads, *x, b * c * hw);
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi = *gi + o;
                    }
                }
                if self.needs(*bias) {
                    let g = acc_into(grads, *bias, c);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut acc = E::ZERO;
                            for s in 0..hw {
                                acc = acc + go[base + s];
                            }
                            g[ci] = g[ci] + acc;
                        }
                    }
                }
            }
            Op::AvgPool2d { x, window } => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (oh, ow) = (h / window, w / window);
                    let denom = E::from_f64((window * window) as f64);
                    let g = acc_into(grads, *x, b * c * h * w);
                    for bc in 0..b * c {
                        let plane = bc * h * w;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let o = go[bc * oh * ow + y * ow + xx] / denom;
                                for dy in 0..*window {
                                    let row = plane + (y * window + dy) * w + xx * window;
                                    for dx in 0..*window {
                                        g[row + dx] = g[row + dx] + o;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Gap(x) => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let denom = E::from_f64(hw as f64);
                    let g = acc_into(grads, *x, b * c * hw);
                    for bc in 0..b * c {
                        let o = go[bc] / denom;
                        let plane = bc * hw;
                        for s in 0..hw {
                            g[plane + s] = g[plane + s] + o;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let g = acc_into(grads, *x, go.len());
                    for (gi, &o) in g.iter_mut().zip(go) {
                        *gi = *gi + o;
                    }
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                if self.needs(*x) {
                    let sx = self.shape(*x);
                    let (b, c) = (sx[0], sx[1]);
                    let xd = self.nodes[x.0].value.data();
                    let qd = self.nodes[i].value.data();
                    let eps_e = E::from_f64(*eps);
                    let g = acc_into(grads, *x, b * c);
                    for r in 0..b {
                        let row = &xd[r * c..(r + 1) * c];
                        let qrow = &qd[r * c..(r + 1) * c];
                        let grow = &go[r * c..(r + 1) * c];
                        let mut sq = E::ZERO;
                        for &v in row {
                            sq = sq + v * v;
                        }
                        let norm = sq.sqrt();
                        if norm >= eps_e {
                            let mut dot = E::ZERO;
                            for (&gv, &qv) in grow.iter().zip(qrow) {
                                dot = dot + gv * qv;
                            }
                            for j in 0..c {
                                g[r * c + j] = g[r * c + j] + (grow[j] - qrow[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..c {
                                g[r * c + j] = g[r * c + j] + grow[j] / eps_e;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].value.numel();
                    let o = go[0];
                    let g = acc_into(grads, *x, n);
                    for gi in g.iter_mut() {
                        *gi = *gi + o;
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].value.numel();
                    let o = go[0] / E::from_f64(n.max(1) as f64);
                    let g = acc_into(grads, *x, n);
                    for gi in g.iter_mut() {
                        *gi = *gi + o;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let s = self.shape(*logits);
                    let (b, k) = (s[0], s[1]);
                    let xd = self.nodes[logits.0].value.data();
                    let scale = go[0] / E::from_f64(b as f64);
                    let g = acc_into(grads, *logits, b * k);
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &xd[r * k..(r + 1) * k];
                        let mut m = row[0];
                        for &v in row {
                            m = m.maximum(v);
                        }
                        let mut z = E::ZERO;
                        for &v in row {
                            z = z + (v - m).exp();
                        }
                        for j in 0..k {
                            let p = (row[j] - m).exp() / z;
                            let delta = if j == y { E::ONE } else { E::ZERO };
                            g[r * k + j] = g[r * k + j] + scale * (p - delta);
                        }
                    }
                }
            }
            Op::CwMargin { logits, labels } => {
                if self.needs(*logits) {
                    let s = self.shape(*logits);
                    let (b, k) = (s[0], s[1]);
                    let xd = self.nodes[logits.0].value.data();
                    let scale = go[0] / E::from_f64(b as f64);
                    let g = acc_into(grads, *logits, b * k);
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &xd[r * k..(r + 1) * k];
                        // first index attaining the max over j != y
                        let mut best = usize::MAX;
                        let mut best_v = E::from_f64(f64::NEG_INFINITY);
                        for (j, &v) in row.iter().enumerate() {
                            if j != y && v > best_v {
                                best_v = v;
                                best = j;
                            }
                        }
                        g[r * k + best] = g[r * k + best] + scale;
                        g[r * k + y] = g[r * k + y] - scale;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        node: usize,
        go: &[E],
        grads: &mut [Option<Vec<E>>],
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) {
        let sx = self.shape(x);
        let sk = self.shape(kernel);
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let so = self.nodes[node].value.shape();
        let (oh, ow) = (so[2], so[3]);

        if self.nodes[x.0].needs_grad {
            let kd = self.nodes[kernel.0].value.data();
            let g = grads[x.0].get_or_insert_with(|| vec![E::ZERO; b * c * h * w]);
            if conv_use_direct(oh, ow, stride) {
                kernels::conv2d_direct_grad_input(
                    go, kd, b, c, h, w, o, kh, kw, stride, padding, oh, ow, g,
                );
            } else {
                let rows = b * oh * ow;
                let patch = c * kh * kw;
                let mut go_rows = vec![E::ZERO; rows * o];
                for bi in 0..b {
                    for oi in 0..o {
                        for y in 0..oh {
                            for xx in 0..ow {
                                go_rows[((bi * oh + y) * ow + xx) * o + oi] =
                                    go[((bi * o + oi) * oh + y) * ow + xx];
                            }
                        }
                    }
                }
                let mut dcols = vec![E::ZERO; rows * patch];
                kernels::matmul_nn_acc(&go_rows, kd, rows, o, patch, &mut dcols);
                kernels::col2im_acc(&dcols, b, c, h, w, kh, kw, stride, padding, oh, ow, g);
            }
        }
        if self.nodes[kernel.0].needs_grad {
            // dK = go_rows^T . im2col(x): the patch matrix is built here,
            // only on passes that actually optimize the weights
            let rows = b * oh * ow;
            let patch = c * kh * kw;
            let mut go_rows = vec![E::ZERO; rows * o];
            for bi in 0..b {
                for oi in 0..o {
                    for y in 0..oh {
                        for xx in 0..ow {
                            go_rows[((bi * oh + y) * ow + xx) * o + oi] =
                                go[((bi * o + oi) * oh + y) * ow + xx];
                        }
                    }
                }
            }
            let cols = kernels::im2col(
                self.nodes[x.0].value.data(),
                b,
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
            );
            let g = grads[kernel.0].get_or_insert_with(|| vec![E::ZERO; o * patch]);
            kernels::matmul_tn_acc(&go_rows, &cols, rows, o, patch, g);
        }
    }
}

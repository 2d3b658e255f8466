use super::kernels::{
    conv_gather, conv_kernel_grad, conv_out_extent, conv_scatter, conv_transpose_out_extent,
    matmul_nn, matmul_nt, matmul_tn, ConvGeom,
};
use super::{Real, Tensor};
use crate::error::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    Square(Var),
    AddChannel(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    // geom is expressed from the matching forward convolution's point of view:
    // the transposed op reads `cout x oh x ow` and writes `cin x h x w`.
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxCols(Var),
    Reshape(Var),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Mean(Var),
    Sum(Var),
}

impl<E> Op<E> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(a, b) | Op::AddChannel(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Silu(a)
            | Op::Transpose(a)
            | Op::SoftmaxCols(a)
            | Op::Reshape(a)
            | Op::Mean(a)
            | Op::Sum(a) => vec![*a],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::SliceChannels { x, .. } => vec![*x],
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph. [`Tape::backward`] adds into the grad
/// buffers of `requires_grad` leaves; repeated calls accumulate until
/// [`Tape::zero_grad`] is called.
pub struct Tape<E = f32> {
    nodes: Vec<Node<E>>,
}

fn shape_err(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn add_into<E: Real>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn sigmoid<E: Real>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> std::fmt::Debug for Tape<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node, including leaves and their grads.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<E>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name.into() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: E) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    /// `x[C, ...] + b[C]` broadcast over every non-channel position.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if xs.is_empty() || bs != [xs[0]] {
            return Err(shape_err("add_channel", format!("bias [{}]", xs.first().unwrap_or(&0)), format!("{bs:?}")));
        }
        let plane = self.value(x).numel() / xs[0];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bias[i / plane];
        }
        self.push(out, Op::AddChannel(x, b), "add_channel")
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Result<ConvGeom, TensorError> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if xs.len() != 3 {
            return Err(shape_err(op, "input [C, H, W]", format!("{xs:?}")));
        }
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(shape_err(op, "square kernel [A, B, k, k]", format!("{ks:?}")));
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be >= 1"));
        }
        let k = ks[2];
        // conv kernels are [C_out, C_in, k, k]; transposed kernels are [C_in, C_out, k, k]
        let (in_c, out_c) = if transposed { (ks[0], ks[1]) } else { (ks[1], ks[0]) };
        if xs[0] != in_c {
            return Err(shape_err(
                op,
                format!("{in_c} input channels to match kernel {ks:?}"),
                format!("{} channels", xs[0]),
            ));
        }
        let bs = self.shape(bias);
        if bs != [out_c] {
            return Err(shape_err(op, format!("bias [{out_c}]"), format!("{bs:?}")));
        }
        if transposed {
            let h = conv_transpose_out_extent(xs[1], k, stride, padding)
                .ok_or_else(|| invalid(op, "empty output"))?;
            let w = conv_transpose_out_extent(xs[2], k, stride, padding)
                .ok_or_else(|| invalid(op, "empty output"))?;
            Ok(ConvGeom {
                cin: out_c,
                cout: in_c,
                h,
                w,
                oh: xs[1],
                ow: xs[2],
                k,
                stride,
                pad: padding,
            })
        } else {
            let oh = conv_out_extent(xs[1], k, stride, padding)
                .ok_or_else(|| invalid(op, format!("kernel {k} larger than padded input {xs:?}")))?;
            let ow = conv_out_extent(xs[2], k, stride, padding)
                .ok_or_else(|| invalid(op, format!("kernel {k} larger than padded input {xs:?}")))?;
            Ok(ConvGeom {
                cin: in_c,
                cout: out_c,
                h: xs[1],
                w: xs[2],
                oh,
                ow,
                k,
                stride,
                pad: padding,
            })
        }
    }

    /// 2-D cross-correlation of `input[C_in, H, W]` with `kernel[C_out, C_in, k, k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let geom = self.conv_geom("conv2d", input, kernel, bias, stride, padding, false)?;
        let plane = geom.oh * geom.ow;
        let b = self.value(bias).data();
        let mut out: Vec<E> = (0..geom.cout * plane).map(|i| b[i / plane]).collect();
        conv_gather(&geom, self.value(input).data(), self.value(kernel).data(), &mut out);
        let out = Tensor::new(vec![geom.cout, geom.oh, geom.ow], out)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    /// Adjoint of [`Tape::conv2d`]; `kernel` is `[C_in, C_out, k, k]`.
    /// Output extent is `(H - 1) * stride - 2 * padding + k`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let geom = self.conv_geom("conv2d_transpose", input, kernel, bias, stride, padding, true)?;
        let plane = geom.h * geom.w;
        let b = self.value(bias).data();
        let mut out: Vec<E> = (0..geom.cin * plane).map(|i| b[i / plane]).collect();
        conv_scatter(&geom, self.value(input).data(), self.value(kernel).data(), &mut out);
        let out = Tensor::new(vec![geom.cin, geom.h, geom.w], out)?;
        self.push(
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            "conv2d_transpose",
        )
    }

    /// Group normalization of `x[C, ...]` followed by a per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: E,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(shape_err("group_norm", "[C, ...]", "scalar"));
        }
        let c = xs[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if !(eps > E::zero()) {
            return Err(invalid("group_norm", "eps must be positive"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err("group_norm", format!("{name} [{c}]"), format!("{:?}", self.shape(v))));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let plane = xv.len() / c;
        let per_group = c / groups * plane;
        let n = E::from_f64(per_group as f64);
        let mut out = vec![E::zero(); xv.len()];
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        for gi in 0..groups {
            let chunk = &xv[gi * per_group..(gi + 1) * per_group];
            let mean = chunk.iter().copied().sum::<E>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
            let rstd = E::one() / (var + eps).sqrt();
            for (j, &v) in chunk.iter().enumerate() {
                let idx = gi * per_group + j;
                let ch = idx / plane;
                out[idx] = g[ch] * (v - mean) * rstd + b[ch];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::new(xs, out)?;
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            "group_norm",
        )
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), "silu")
    }

    /// `w[m, n] . x[n] + b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err("linear", format!("x [{}] for w {ws:?}", ws.get(1).unwrap_or(&0)), format!("{xs:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        if bs != [m] {
            return Err(shape_err("linear", format!("b [{m}]"), format!("{bs:?}")));
        }
        let mut out = self.value(b).data().to_vec();
        matmul_nn(m, n, 1, self.value(w).data(), self.value(x).data(), &mut out);
        let out = Tensor::new(vec![m], out)?;
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    /// `a[m, k] . b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("[m, k] . [k, n], left {sa:?}"), format!("{sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        matmul_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("transpose", "[m, n]", format!("{sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let out: Vec<E> = (0..m * n).map(|i| src[(i % m) * n + i / m]).collect();
        let out = Tensor::new(vec![n, m], out)?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Softmax over the first axis of `a[n, m]`, independently per column.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("softmax_cols", "[n, m]", format!("{sa:?}")));
        }
        let (n, m) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![E::zero(); n * m];
        for col in 0..m {
            let max = (0..n).map(|r| src[r * m + col]).fold(E::neg_infinity(), E::max);
            let mut total = E::zero();
            for r in 0..n {
                let e = (src[r * m + col] - max).exp();
                out[r * m + col] = e;
                total = total + e;
            }
            for r in 0..n {
                out[r * m + col] = out[r * m + col] / total;
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push(out, Op::SoftmaxCols(a), "softmax_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Stacks `a[C1, ...]` and `b[C2, ...]` along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.is_empty() || sa[1..] != sb[1..] {
            return Err(shape_err("concat_channels", format!("trailing extents {:?}", sa.get(1..)), format!("{:?}", sb.get(1..))));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(a, b), "concat_channels")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = self.value(x).slice_channels(start, len)?;
        self.push(out, Op::SliceChannels { x, start }, "slice_channels")
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let m = v.data().iter().copied().sum::<E>() / E::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().copied().sum::<E>();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Single-head self-attention with a residual connection.
    ///
    /// `x` is `[C, N]` (N positions), `wq`/`wk` are `[d, C]`, `wv`/`wo` are
    /// `[C, C]`. Scores are `K^T Q / sqrt(d)` with a softmax over keys for each
    /// query; the result is `Wo (V A) + x`.
    pub fn self_attention(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(shape_err("self_attention", "x [C, N]", format!("{xs:?}")));
        }
        let c = xs[0];
        let d = self.shape(wq).first().copied().unwrap_or(0);
        if self.shape(wk) != self.shape(wq) || d == 0 {
            return Err(shape_err("self_attention", format!("wk shaped like wq {:?}", self.shape(wq)), format!("{:?}", self.shape(wk))));
        }
        for w in [wv, wo] {
            if self.shape(w) != [c, c] {
                return Err(shape_err("self_attention", format!("[{c}, {c}]"), format!("{:?}", self.shape(w))));
            }
        }
        let q = self.matmul(wq, x)?;
        let k = self.matmul(wk, x)?;
        let v = self.matmul(wv, x)?;
        let kt = self.transpose(k)?;
        let scores = self.matmul(kt, q)?;
        let scores = self.scale(scores, E::one() / E::from_f64(d as f64).sqrt())?;
        let attn = self.softmax_cols(scores)?;
        let mixed = self.matmul(v, attn)?;
        let projected = self.matmul(wo, mixed)?;
        self.add(projected, x)
    }

    /// Reverse pass from a one-element `loss`, adding into leaf grad buffers.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Lazily allocated gradient slot for an input that wants one.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [E])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![E::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with(*a, &mut |ga| add_into(ga, g));
                with(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |ga| add_into(ga, g));
                with(*b, &mut |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + g[j] * bv[j];
                    }
                });
                with(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] + g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, f) => with(*a, &mut |ga| {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d = *d + *f * s;
                }
            }),
            Op::Square(a) => {
                let av = val(*a);
                let two = E::from_f64(2.0);
                with(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + two * av[j] * g[j];
                    }
                });
            }
            Op::AddChannel(x, b) => {
                let c = nodes[b.0].value.numel();
                let plane = g.len() / c;
                with(*x, &mut |gx| add_into(gx, g));
                with(*b, &mut |gb| {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        gb[ch] = gb[ch] + chunk.iter().copied().sum::<E>();
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (xv, kv) = (val(*input), val(*kernel));
                with(*input, &mut |gx| conv_scatter(geom, g, kv, gx));
                with(*kernel, &mut |gk| conv_kernel_grad(geom, xv, g, gk));
                let plane = geom.oh * geom.ow;
                with(*bias, &mut |gb| {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        gb[ch] = gb[ch] + chunk.iter().copied().sum::<E>();
                    }
                });
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (yv, kv) = (val(*input), val(*kernel));
                with(*input, &mut |gy| conv_gather(geom, g, kv, gy));
                with(*kernel, &mut |gk| conv_kernel_grad(geom, g, yv, gk));
                let plane = geom.h * geom.w;
                with(*bias, &mut |gb| {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        gb[ch] = gb[ch] + chunk.iter().copied().sum::<E>();
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gam = val(*gamma);
                let c = gam.len();
                let plane = xv.len() / c;
                let per_group = xv.len() / groups;
                let n = E::from_f64(per_group as f64);
                let xhat = |idx: usize| (xv[idx] - mean[idx / per_group]) * rstd[idx / per_group];
                with(*gamma, &mut |gg| {
                    for idx in 0..xv.len() {
                        gg[idx / plane] = gg[idx / plane] + g[idx] * xhat(idx);
                    }
                });
                with(*beta, &mut |gb| {
                    for (ch, chunk) in g.chunks(plane).enumerate() {
                        gb[ch] = gb[ch] + chunk.iter().copied().sum::<E>();
                    }
                });
                with(*x, &mut |gx| {
                    for gi in 0..*groups {
                        let range = gi * per_group..(gi + 1) * per_group;
                        let mut sum_d = E::zero();
                        let mut sum_dx = E::zero();
                        for idx in range.clone() {
                            let d = g[idx] * gam[idx / plane];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat(idx);
                        }
                        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
                        for idx in range {
                            let d = g[idx] * gam[idx / plane];
                            gx[idx] = gx[idx] + rstd[gi] * (d - mean_d - xhat(idx) * mean_dx);
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = val(*a);
                with(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        let s = sigmoid(av[j]);
                        ga[j] = ga[j] + g[j] * s * (E::one() + av[j] * (E::one() - s));
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, n) = (g.len(), xv.len());
                with(*x, &mut |gx| matmul_tn(m, n, 1, wv, g, gx));
                with(*w, &mut |gw| matmul_nn(m, 1, n, g, xv, gw));
                with(*b, &mut |gb| add_into(gb, g));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                with(*a, &mut |ga| matmul_nt(m, n, k, g, bv, ga));
                with(*b, &mut |gb| matmul_tn(m, k, n, av, g, gb));
            }
            Op::Transpose(a) => {
                let sa = nodes[a.0].value.shape();
                let (m, n) = (sa[0], sa[1]);
                with(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = ga[r * n + c] + g[c * m + r];
                        }
                    }
                });
            }
            Op::SoftmaxCols(a) => {
                let so = nodes[i].value.shape();
                let (n, m) = (so[0], so[1]);
                with(*a, &mut |ga| {
                    for col in 0..m {
                        let dot: E = (0..n).map(|r| out[r * m + col] * g[r * m + col]).sum();
                        for r in 0..n {
                            let idx = r * m + col;
                            ga[idx] = ga[idx] + out[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::Reshape(a) => with(*a, &mut |ga| add_into(ga, g)),
            Op::Concat(a, b) => {
                let split = nodes[a.0].value.numel();
                with(*a, &mut |ga| add_into(ga, &g[..split]));
                with(*b, &mut |gb| add_into(gb, &g[split..]));
            }
            Op::SliceChannels { x, start } => {
                let xs = nodes[x.0].value.shape();
                let plane = nodes[x.0].value.numel() / xs[0];
                with(*x, &mut |gx| add_into(&mut gx[start * plane..start * plane + g.len()], g));
            }
            Op::Mean(a) => {
                let n = E::from_f64(nodes[a.0].value.numel() as f64);
                let share = g[0] / n;
                with(*a, &mut |ga| {
                    for d in ga.iter_mut() {
                        *d = *d + share;
                    }
                });
            }
            Op::Sum(a) => with(*a, &mut |ga| {
                for d in ga.iter_mut() {
                    *d = *d + g[0];
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn one_by_one_conv_is_a_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[2.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
        let yt = tape.conv2d_transpose(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(yt).data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).cos()).collect();
        let x = tape.constant(t(&[1, 4, 4], &data));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kd));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, k, b, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "conv2d", .. }), "{err}");
        assert!(tape.conv2d(x, k, b, 0, 1).is_err());
    }

    #[test]
    fn transpose_conv_doubles_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[3, 8, 8]));
        let k = tape.constant(Tensor::full(&[3, 2, 4, 4], 0.1));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv2d_transpose(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 16]);
    }

    #[test]
    fn group_norm_of_constant_is_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[4, 3, 3], 2.5));
        let gamma = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let beta = tape.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = tape.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(*v, [0.1, 0.2, 0.3, 0.4][i / 9]);
        }
        assert!(tape.group_norm(x, 3, gamma, beta, 1e-5).is_err());
        assert!(tape.group_norm(x, 2, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.0, 20.0, 1.0]));
        let y = tape.silu(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 20.0).abs() < 1e-6);
        // 1 / (1 + e^-1)
        assert!((v[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.silu(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5]);
    }

    #[test]
    fn linear_small_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[3.0]));
        let w = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let bad = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(tape.linear(bad, w, b).is_err());
    }

    #[test]
    fn square_grad_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let y = tape.silu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn concat_layout_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let a2 = tape.slice_channels(c, 0, 1).unwrap();
        let b2 = tape.slice_channels(c, 1, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 4]);
        let odd = tape.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(tape.concat_channels(a, odd).is_err());
    }

    #[test]
    fn attention_single_position() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1], &[1.0, -2.0]));
        let wq = tape.constant(t(&[2, 2], &[0.3, 0.1, -0.2, 0.5]));
        let wk = tape.constant(t(&[2, 2], &[0.7, -0.4, 0.2, 0.1]));
        let wv = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let wo = tape.constant(t(&[2, 2], &[0.5, 0.0, 0.0, 2.0]));
        let y = tape.self_attention(x, wq, wk, wv, wo).unwrap();
        // Wv x = [-3, -5]; Wo . that = [-1.5, -10]; plus x
        assert_eq!(tape.value(y).data(), &[-0.5, -12.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[1e200]));
        let err = tape.square(x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "square".into() });
    }
}

//! Reverse-mode differentiation over an append-only tape.
//!
//! Every kernel appends one node holding its output value and the inputs it
//! read. Node ids are handed out in creation order, so a reverse sweep over the
//! node list is a valid reverse topological order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, ensure, Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::real::Real;
use crate::tensor::{split_at_axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a differentiable kernel, for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    ScaleBy,
    MulBroadcast,
    Relu,
    Sigmoid,
    MatMul,
    BatchMatMul,
    Pointwise,
    Contract,
    TemporalConv,
    Softmax,
    Mean,
    Sum,
    BatchNorm,
    Linear,
    Permute,
    Reshape,
    TemporalDiff,
    SoftmaxCrossEntropy,
}

impl Kernel {
    pub const ALL: [Kernel; 23] = [
        Kernel::Add,
        Kernel::Sub,
        Kernel::Mul,
        Kernel::Scale,
        Kernel::AddScalar,
        Kernel::ScaleBy,
        Kernel::MulBroadcast,
        Kernel::Relu,
        Kernel::Sigmoid,
        Kernel::MatMul,
        Kernel::BatchMatMul,
        Kernel::Pointwise,
        Kernel::Contract,
        Kernel::TemporalConv,
        Kernel::Softmax,
        Kernel::Mean,
        Kernel::Sum,
        Kernel::BatchNorm,
        Kernel::Linear,
        Kernel::Permute,
        Kernel::Reshape,
        Kernel::TemporalDiff,
        Kernel::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::Mul => "mul",
            Kernel::Scale => "scale",
            Kernel::AddScalar => "add_scalar",
            Kernel::ScaleBy => "scale_by",
            Kernel::MulBroadcast => "mul_broadcast",
            Kernel::Relu => "relu",
            Kernel::Sigmoid => "sigmoid",
            Kernel::MatMul => "matmul",
            Kernel::BatchMatMul => "batch_matmul",
            Kernel::Pointwise => "pointwise_conv",
            Kernel::Contract => "contract",
            Kernel::TemporalConv => "temporal_conv",
            Kernel::Softmax => "softmax",
            Kernel::Mean => "mean",
            Kernel::Sum => "sum",
            Kernel::BatchNorm => "batch_norm",
            Kernel::Linear => "linear",
            Kernel::Permute => "permute",
            Kernel::Reshape => "reshape",
            Kernel::TemporalDiff => "temporal_diff",
            Kernel::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl core::fmt::Display for Kernel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Temporal convolution geometry. Padding is always `(kernel - 1) / 2` on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            groups: 1,
        }
    }
}

/// Batch statistics consumed by a training-mode batch norm, returned so the
/// caller can maintain running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<R> {
    pub mean: Vec<R>,
    /// Unbiased variance (divides by `count - 1`).
    pub var: Vec<R>,
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, R),
    AddScalar(NodeId),
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    MulBroadcast {
        x: NodeId,
        g: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        kernel: Kernel,
    },
    Pointwise {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Contract {
        x: NodeId,
        m: NodeId,
    },
    TemporalConv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    Mean {
        x: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<R>,
        inv_std: Vec<R>,
        train: bool,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape(NodeId),
    TemporalDiff(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
}

impl<R> Op<R> {
    fn kernel(&self) -> Option<Kernel> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => Kernel::Add,
            Op::Sub(..) => Kernel::Sub,
            Op::Mul(..) => Kernel::Mul,
            Op::Scale(..) => Kernel::Scale,
            Op::AddScalar(..) => Kernel::AddScalar,
            Op::ScaleBy { .. } => Kernel::ScaleBy,
            Op::MulBroadcast { .. } => Kernel::MulBroadcast,
            Op::Relu(..) => Kernel::Relu,
            Op::Sigmoid(..) => Kernel::Sigmoid,
            Op::BatchMatMul { kernel, .. } => *kernel,
            Op::Pointwise { .. } => Kernel::Pointwise,
            Op::Contract { .. } => Kernel::Contract,
            Op::TemporalConv { .. } => Kernel::TemporalConv,
            Op::Softmax { .. } => Kernel::Softmax,
            Op::Mean { .. } => Kernel::Mean,
            Op::Sum(..) => Kernel::Sum,
            Op::BatchNorm { .. } => Kernel::BatchNorm,
            Op::Linear { .. } => Kernel::Linear,
            Op::Permute { .. } => Kernel::Permute,
            Op::Reshape(..) => Kernel::Reshape,
            Op::TemporalDiff(..) => Kernel::TemporalDiff,
            Op::SoftmaxCrossEntropy { .. } => Kernel::SoftmaxCrossEntropy,
        })
    }
}

#[derive(Debug, Clone)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Records one forward evaluation. A tape is owned by a single training step.
#[derive(Debug, Clone)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    leaf_grads: Vec<Option<Tensor<R>>>,
    fault: Option<Kernel>,
    check_finite: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the vector-Jacobian rule of `kernel` (scales it by 1.5).
    /// Only meant for negative-control runs of the gradient checker.
    pub fn inject_fault(&mut self, kernel: Option<Kernel>) {
        self.fault = kernel;
    }

    /// When enabled, every kernel output is scanned and a non-finite value is
    /// reported as a numeric error naming the kernel.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: Tensor<R>) -> NodeId {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<R>) -> NodeId {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<R>> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[NodeId]) -> Result<NodeId> {
        if self.check_finite && !value.is_finite() {
            let k = op.kernel().map(Kernel::name).unwrap_or("leaf");
            bail!(Numeric, "non-finite value produced by kernel {}", k);
        }
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            Shape,
            "{}: shapes {:?} and {:?} differ",
            what,
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip_map(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<R>,
        f: impl Fn(R, R) -> R,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: NodeId, c: R) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: R) -> Result<NodeId> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// `x · s` with `s` a single-element tensor.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        ensure!(
            self.value(s).numel() == 1,
            Shape,
            "scale_by expects a scalar, got {:?}",
            self.shape(s)
        );
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::ScaleBy { x, s }, &[x, s])
    }

    /// `x · g` where `g`'s shape is a leading prefix of `x`'s shape; `g` is
    /// broadcast over the remaining trailing axes.
    pub fn mul_broadcast(&mut self, x: NodeId, g: NodeId) -> Result<NodeId> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        ensure!(
            gs.len() <= xs.len() && xs[..gs.len()] == *gs,
            Shape,
            "mul_broadcast: {:?} is not a prefix of {:?}",
            gs,
            xs
        );
        let inner = self.value(x).numel() / self.value(g).numel();
        let gv = self.value(g).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i / inner])
            .collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        self.push(out, Op::MulBroadcast { x, g }, &[x, g])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self
            .value(x)
            .map(|v| if v > R::zero() { v } else { R::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// 2-D matrix product with optional transposition of either operand.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        ensure!(
            self.value(a).rank() == 2 && self.value(b).rank() == 2,
            Shape,
            "matmul expects rank-2 operands, got {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = self.bmm_forward(a, b, ta, tb, 1)?;
        let (m, n) = (out.0, out.1);
        let t = Tensor::from_vec(&[m, n], out.2)?;
        self.push(
            t,
            Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                kernel: Kernel::MatMul,
            },
            &[a, b],
        )
    }

    /// Product over a leading batch axis: `[B,m,k] · [B,k,n] → [B,m,n]`,
    /// each operand optionally transposed in its last two axes.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            Shape,
            "batch_matmul expects [B,_,_] operands with equal B, got {:?} and {:?}",
            sa,
            sb
        );
        let batch = sa[0];
        let (m, n, data) = self.bmm_forward(a, b, ta, tb, batch)?;
        let t = Tensor::from_vec(&[batch, m, n], data)?;
        self.push(
            t,
            Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                kernel: Kernel::BatchMatMul,
            },
            &[a, b],
        )
    }

    fn bmm_forward(
        &self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        batch: usize,
    ) -> Result<(usize, usize, Vec<R>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        ensure!(
            k == k2,
            Shape,
            "matmul inner extents differ: {:?}{} · {:?}{}",
            sa,
            tr(ta),
            sb,
            tr(tb)
        );
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![R::zero(); batch * m * n];
        for i in 0..batch {
            let am = view(&va[i * ar * ac..(i + 1) * ar * ac], ar, ac, ta);
            let bm = view(&vb[i * br * bc..(i + 1) * br * bc], br, bc, tb);
            gemm(
                R::one(),
                am,
                bm,
                R::zero(),
                MatMut::new(&mut out[i * m * n..(i + 1) * m * n], m, n),
            );
        }
        Ok((m, n, out))
    }

    /// 1×1 convolution over the channel axis: `x [N,C,...]`, `w [C',C]`,
    /// optional bias `[C']` → `[N,C',...]`.
    pub fn pointwise(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        ensure!(
            xs.len() >= 2,
            Shape,
            "pointwise expects [N,C,...], got {:?}",
            xs
        );
        ensure!(
            ws.len() == 2 && ws[1] == xs[1],
            Shape,
            "pointwise weight {:?} does not match input channels {}",
            ws,
            xs[1]
        );
        let (co, ci) = (ws[0], ws[1]);
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [co],
                Shape,
                "pointwise bias {:?} vs {} outputs",
                self.shape(b),
                co
            );
        }
        let n = xs[0];
        let l: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![R::zero(); n * co * l];
        for s in 0..n {
            gemm(
                R::one(),
                MatRef::new(wv, co, ci),
                MatRef::new(&xv[s * ci * l..(s + 1) * ci * l], ci, l),
                R::zero(),
                MatMut::new(&mut out[s * co * l..(s + 1) * co * l], co, l),
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), l);
        }
        let mut shape = xs;
        shape[1] = co;
        let t = Tensor::from_vec(&shape, out)?;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::Pointwise { x, w, b }, &inputs)
    }

    /// Contracts the last axis of `x [..., V]` with `m [U, V]`:
    /// `out[..., u] = Σ_v m[u,v] · x[..., v]`.
    pub fn contract(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m);
        let vin = *xs.last().unwrap();
        ensure!(
            ms.len() == 2 && ms[1] == vin,
            Shape,
            "contract: matrix {:?} does not match trailing extent {}",
            ms,
            vin
        );
        let vout = ms[0];
        let rows = self.value(x).numel() / vin;
        let mut out = vec![R::zero(); rows * vout];
        gemm(
            R::one(),
            MatRef::new(self.value(x).data(), rows, vin),
            MatRef::new(self.value(m).data(), vout, vin).t(),
            R::zero(),
            MatMut::new(&mut out, rows, vout),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = vout;
        let t = Tensor::from_vec(&shape, out)?;
        self.push(t, Op::Contract { x, m }, &[x, m])
    }

    /// Temporal convolution over axis 2 of `x [N,C,T]` or `x [N,C,T,W]` with
    /// weight `[C', C/groups, k]` (odd `k`), zero padding `(k-1)/2`.
    pub fn temporal_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geo = ConvGeometry::new(&xs, &ws, spec)?;
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [geo.co],
                Shape,
                "conv bias {:?} vs {} outputs",
                self.shape(b),
                geo.co
            );
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![R::zero(); geo.n * geo.co * geo.t_out * geo.w];
        let mut cols = vec![R::zero(); geo.cols_len()];
        for s in 0..geo.n {
            for g in 0..spec.groups {
                let cols_ref = geo.im2col(xv, s, g, &mut cols);
                let out_off = (s * geo.co + g * geo.cog) * geo.out_plane();
                gemm(
                    R::one(),
                    MatRef::new(&wv[g * geo.cog * geo.krow()..], geo.cog, geo.krow()),
                    cols_ref,
                    R::zero(),
                    MatMut::new(
                        &mut out[out_off..out_off + geo.cog * geo.out_plane()],
                        geo.cog,
                        geo.out_plane(),
                    ),
                );
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geo.out_plane());
        }
        let mut shape = xs;
        shape[1] = geo.co;
        shape[2] = geo.t_out;
        let t = Tensor::from_vec(&shape, out)?;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::TemporalConv { x, w, b, spec }, &inputs)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        ensure!(
            axis < xs.len(),
            Shape,
            "softmax axis {} out of range for {:?}",
            axis,
            xs
        );
        let (outer, ext, inner) = split_at_axis(xs, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ext * inner + i;
                let mut mx = R::neg_infinity();
                for a in 0..ext {
                    mx = mx.max(d[base + a * inner]);
                }
                let mut sum = R::zero();
                for a in 0..ext {
                    let e = (d[base + a * inner] - mx).exp();
                    d[base + a * inner] = e;
                    sum = sum + e;
                }
                for a in 0..ext {
                    d[base + a * inner] = d[base + a * inner] / sum;
                }
            }
        }
        self.push(out, Op::Softmax { x, axis }, &[x])
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        ensure!(
            axis < xs.len(),
            Shape,
            "mean axis {} out of range for {:?}",
            axis,
            xs
        );
        let (outer, ext, inner) = split_at_axis(&xs, axis);
        let xv = self.value(x).data();
        let inv = R::one() / R::from_f64(ext as f64);
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let src = &xv[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst = *dst + v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = xs;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::from_vec(&shape, out)?;
        self.push(t, Op::Mean { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    /// Batch normalization per channel (axis 1) over every other axis.
    ///
    /// Training mode normalizes with batch statistics and returns them;
    /// inference mode uses the given running `mean`/`var` and is a pure
    /// per-channel affine map.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[R], &[R])>,
        eps: R,
    ) -> Result<(NodeId, Option<BatchStats<R>>)> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() >= 2,
            Shape,
            "batch_norm expects [N,C,...], got {:?}",
            xs
        );
        let (n, c) = (xs[0], xs[1]);
        let l: usize = xs[2..].iter().product();
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            Shape,
            "batch_norm affine params must be [{}]",
            c
        );
        let count = n * l;
        let xv = self.value(x).data();
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                ensure!(
                    rm.len() == c && rv.len() == c,
                    Shape,
                    "running stats must have {} channels",
                    c
                );
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![R::zero(); c];
                let mut var = vec![R::zero(); c];
                for ch in 0..c {
                    let mut acc = R::zero();
                    for s in 0..n {
                        acc = acc
                            + xv[(s * c + ch) * l..(s * c + ch + 1) * l]
                                .iter()
                                .copied()
                                .sum::<R>();
                    }
                    let mu = acc / R::from_f64(count as f64);
                    let mut sq = R::zero();
                    for s in 0..n {
                        for &v in &xv[(s * c + ch) * l..(s * c + ch + 1) * l] {
                            sq = sq + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / R::from_f64(count as f64);
                }
                let unbiased = if count > 1 {
                    let f = R::from_f64(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                (
                    mean.clone(),
                    var,
                    Some(BatchStats {
                        mean,
                        var: unbiased,
                    }),
                )
            }
        };
        let inv_std: Vec<R> = var_biased
            .iter()
            .map(|&v| R::one() / (v + eps).sqrt())
            .collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![R::zero(); xv.len()];
        let mut out = vec![R::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * l;
                for i in off..off + l {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let t = Tensor::from_vec(&xs, out)?;
        let train = stats.is_some();
        let id = self.push(
            t,
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
        Ok((id, stats))
    }

    /// Fully connected map: `x [N,Cin]`, `w [Cout,Cin]`, bias `[Cout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        ensure!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            Shape,
            "linear: input {:?} vs weight {:?}",
            xs,
            ws
        );
        let (n, ci, co) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            ensure!(
                self.shape(b) == [co],
                Shape,
                "linear bias {:?} vs {} outputs",
                self.shape(b),
                co
            );
        }
        let mut out = vec![R::zero(); n * co];
        gemm(
            R::one(),
            MatRef::new(self.value(x).data(), n, ci),
            MatRef::new(self.value(w).data(), co, ci).t(),
            R::zero(),
            MatMut::new(&mut out, n, co),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(co) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let t = Tensor::from_vec(&[n, co], out)?;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::Linear { x, w, b }, &inputs)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let t = self.value(x).permute(perm)?;
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Forward difference along axis 2: `out[:,:,t] = x[:,:,t+1] - x[:,:,t]`,
    /// with the final frame set to zero.
    pub fn temporal_diff(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() >= 3,
            Shape,
            "temporal_diff expects [N,C,T,...], got {:?}",
            xs
        );
        let (outer, t, inner) = split_at_axis(&xs, 2);
        let xv = self.value(x).data();
        let mut out = vec![R::zero(); xv.len()];
        for o in 0..outer {
            for f in 0..t.saturating_sub(1) {
                let cur = (o * t + f) * inner;
                let next = cur + inner;
                for i in 0..inner {
                    out[cur + i] = xv[next + i] - xv[cur + i];
                }
            }
        }
        let t = Tensor::from_vec(&xs, out)?;
        self.push(t, Op::TemporalDiff(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.shape(logits);
        ensure!(ls.len() == 2, Shape, "logits must be [N,K], got {:?}", ls);
        let (n, k) = (ls[0], ls[1]);
        ensure!(
            labels.len() == n,
            Shape,
            "{} labels for batch of {}",
            labels.len(),
            n
        );
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            bail!(Data, "label {} out of range for {} classes", bad, k);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![R::zero(); n * k];
        let mut loss = R::zero();
        for s in 0..n {
            let row = &lv[s * k..(s + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                probs[s * k + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[labels[s]];
        }
        let t = Tensor::scalar(loss / R::from_f64(n as f64));
        self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Accumulates `d loss / d leaf` into every differentiable leaf reachable
    /// from `loss`. Repeated calls add to previously accumulated gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        ensure!(
            self.value(loss).numel() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                self.accumulate_leaf(i, g);
                continue;
            }
            if self.fault.is_some() && node.op.kernel() == self.fault {
                let k = R::from_f64(1.5);
                g.iter_mut().for_each(|v| *v = *v * k);
            }
            self.node_backward(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate_leaf(&mut self, i: usize, g: Vec<R>) {
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        match &mut self.leaf_grads[i] {
            Some(t) => t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(a, &b)| *a = *a + b),
            slot @ None => {
                let shape = self.nodes[i].value.shape();
                *slot = Some(Tensor::from_vec(shape, g).expect("gradient shape matches leaf"));
            }
        }
    }

    fn node_backward(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, R::one()));
                self.acc(grads, *b, |d| axpy(d, g, R::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, R::one()));
                self.acc(grads, *b, |d| axpy(d, g, -R::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &gg), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + gg * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &gg), &y) in d.iter_mut().zip(g).zip(va) {
                        *d = *d + gg * y;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| axpy(d, g, *c)),
            Op::AddScalar(x) => self.acc(grads, *x, |d| axpy(d, g, R::one())),
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).data()[0];
                self.acc(grads, *x, |d| axpy(d, g, c));
                let xv = self.value(*x).data();
                self.acc(grads, *s, |d| {
                    d[0] = d[0] + g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<R>()
                });
            }
            Op::MulBroadcast { x, g: gate } => {
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                let inner = xv.len() / gv.len();
                self.acc(grads, *x, |d| {
                    for (idx, (d, &gg)) in d.iter_mut().zip(g).enumerate() {
                        *d = *d + gg * gv[idx / inner];
                    }
                });
                self.acc(grads, *gate, |d| {
                    for (j, d) in d.iter_mut().enumerate() {
                        let r = j * inner..(j + 1) * inner;
                        *d = *d
                            + g[r.clone()]
                                .iter()
                                .zip(&xv[r])
                                .map(|(&a, &b)| a * b)
                                .sum::<R>();
                    }
                });
            }
            Op::Relu(x) => self.acc(grads, *x, |d| {
                for ((d, &gg), &y) in d.iter_mut().zip(g).zip(out) {
                    if y > R::zero() {
                        *d = *d + gg;
                    }
                }
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for ((d, &gg), &y) in d.iter_mut().zip(g).zip(out) {
                    *d = *d + gg * y * (R::one() - y);
                }
            }),
            Op::BatchMatMul { a, b, ta, tb, .. } => self.bmm_backward(*a, *b, *ta, *tb, g, grads),
            Op::Pointwise { x, w, b } => {
                let xs = self.shape(*x);
                let (n, ci) = (xs[0], xs[1]);
                let l: usize = xs[2..].iter().product();
                let co = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *w, |d| {
                    for s in 0..n {
                        gemm(
                            R::one(),
                            MatRef::new(&g[s * co * l..], co, l),
                            MatRef::new(&xv[s * ci * l..], ci, l).t(),
                            R::one(),
                            MatMut::new(d, co, ci),
                        );
                    }
                });
                self.acc(grads, *x, |d| {
                    for s in 0..n {
                        gemm(
                            R::one(),
                            MatRef::new(wv, co, ci).t(),
                            MatRef::new(&g[s * co * l..], co, l),
                            R::one(),
                            MatMut::new(&mut d[s * ci * l..(s + 1) * ci * l], ci, l),
                        );
                    }
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |d| channel_sums(d, g, l));
                }
            }
            Op::Contract { x, m } => {
                let vin = *self.shape(*x).last().unwrap();
                let vout = self.shape(*m)[0];
                let rows = self.value(*x).numel() / vin;
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                self.acc(grads, *x, |d| {
                    gemm(
                        R::one(),
                        MatRef::new(g, rows, vout),
                        MatRef::new(mv, vout, vin),
                        R::one(),
                        MatMut::new(d, rows, vin),
                    )
                });
                self.acc(grads, *m, |d| {
                    gemm(
                        R::one(),
                        MatRef::new(g, rows, vout).t(),
                        MatRef::new(xv, rows, vin),
                        R::one(),
                        MatMut::new(d, vout, vin),
                    )
                });
            }
            Op::TemporalConv { x, w, b, spec } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*w), *spec)?;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let need_w = self.requires_grad(*w);
                let need_x = self.requires_grad(*x);
                let mut cols = vec![R::zero(); geo.cols_len()];
                let mut gcols = vec![R::zero(); geo.krow() * geo.out_plane()];
                let mut gw = if need_w {
                    Some(vec![R::zero(); wv.len()])
                } else {
                    None
                };
                let mut gx = if need_x {
                    Some(vec![R::zero(); xv.len()])
                } else {
                    None
                };
                for s in 0..geo.n {
                    for grp in 0..spec.groups {
                        let out_off = (s * geo.co + grp * geo.cog) * geo.out_plane();
                        let gblock = MatRef::new(&g[out_off..], geo.cog, geo.out_plane());
                        let wblock =
                            MatRef::new(&wv[grp * geo.cog * geo.krow()..], geo.cog, geo.krow());
                        if let Some(gw) = gw.as_mut() {
                            let cols_ref = geo.im2col(xv, s, grp, &mut cols);
                            let woff = grp * geo.cog * geo.krow();
                            gemm(
                                R::one(),
                                gblock,
                                cols_ref.t(),
                                R::one(),
                                MatMut::new(
                                    &mut gw[woff..woff + geo.cog * geo.krow()],
                                    geo.cog,
                                    geo.krow(),
                                ),
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            gemm(
                                R::one(),
                                wblock.t(),
                                gblock,
                                R::zero(),
                                MatMut::new(&mut gcols, geo.krow(), geo.out_plane()),
                            );
                            geo.col2im_add(&gcols, s, grp, gx);
                        }
                    }
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, |d| axpy(d, &gw, R::one()));
                }
                if let Some(gx) = gx {
                    self.acc(grads, *x, |d| axpy(d, &gx, R::one()));
                }
                if let Some(b) = b {
                    self.acc(grads, *b, |d| channel_sums(d, g, geo.out_plane()));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, ext, inner) = split_at_axis(node.value.shape(), *axis);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * ext * inner + i;
                            let dot: R = (0..ext)
                                .map(|a| g[base + a * inner] * out[base + a * inner])
                                .sum();
                            for a in 0..ext {
                                let p = base + a * inner;
                                d[p] = d[p] + out[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, ext, inner) = split_at_axis(self.shape(*x), *axis);
                let inv = R::one() / R::from_f64(ext as f64);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for a in 0..ext {
                            let dst = &mut d[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                            for (dd, &gg) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *dd = *dd + gg * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let l: usize = xs[2..].iter().product();
                let mut sum_g = vec![R::zero(); c];
                let mut sum_gx = vec![R::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * l;
                        for p in off..off + l {
                            sum_g[ch] = sum_g[ch] + g[p];
                            sum_gx[ch] = sum_gx[ch] + g[p] * xhat[p];
                        }
                    }
                }
                self.acc(grads, *beta, |d| axpy(d, &sum_g, R::one()));
                self.acc(grads, *gamma, |d| axpy(d, &sum_gx, R::one()));
                let gv = self.value(*gamma).data();
                let m = R::from_f64((n * l) as f64);
                self.acc(grads, *x, |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * l;
                            let k = gv[ch] * inv_std[ch];
                            for p in off..off + l {
                                let v = if *train {
                                    k * (g[p] - sum_g[ch] / m - xhat[p] * sum_gx[ch] / m)
                                } else {
                                    k * g[p]
                                };
                                d[p] = d[p] + v;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, ci) = (self.shape(*x)[0], self.shape(*x)[1]);
                let co = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |d| {
                    gemm(
                        R::one(),
                        MatRef::new(g, n, co),
                        MatRef::new(wv, co, ci),
                        R::one(),
                        MatMut::new(d, n, ci),
                    )
                });
                self.acc(grads, *w, |d| {
                    gemm(
                        R::one(),
                        MatRef::new(g, n, co).t(),
                        MatRef::new(xv, n, ci),
                        R::one(),
                        MatMut::new(d, co, ci),
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in g.chunks(co) {
                            axpy(d, row, R::one());
                        }
                    });
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec())?.permute(&inv)?;
                self.acc(grads, *x, |d| axpy(d, gt.data(), R::one()));
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, R::one())),
            Op::TemporalDiff(x) => {
                let (outer, t, inner) = split_at_axis(self.shape(*x), 2);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for f in 0..t.saturating_sub(1) {
                            let cur = (o * t + f) * inner;
                            for i in 0..inner {
                                d[cur + inner + i] = d[cur + inner + i] + g[cur + i];
                                d[cur + i] = d[cur + i] - g[cur + i];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / R::from_f64(labels.len() as f64);
                self.acc(grads, *logits, |d| {
                    for (s, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { R::one() } else { R::zero() };
                            d[s * k + j] = d[s * k + j] + scale * (probs[s * k + j] - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn bmm_backward(
        &self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        g: &[R],
        grads: &mut [Option<Vec<R>>],
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let batch = if sa.len() == 3 { sa[0] } else { 1 };
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        // With A = op(a), B = op(b): dA = G·Bᵀ, dB = Aᵀ·G; transposed
        // operands receive the transpose of those.
        self.acc(grads, a, |d| {
            for i in 0..batch {
                let gm = MatRef::new(&g[i * m * n..], m, n);
                let bm = view(&vb[i * br * bc..(i + 1) * br * bc], br, bc, tb);
                let dst = MatMut::new(&mut d[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                if ta {
                    gemm(R::one(), bm, gm.t(), R::one(), dst);
                } else {
                    gemm(R::one(), gm, bm.t(), R::one(), dst);
                }
            }
        });
        self.acc(grads, b, |d| {
            for i in 0..batch {
                let gm = MatRef::new(&g[i * m * n..], m, n);
                let am = view(&va[i * ar * ac..(i + 1) * ar * ac], ar, ac, ta);
                let dst = MatMut::new(&mut d[i * br * bc..(i + 1) * br * bc], br, bc);
                if tb {
                    gemm(R::one(), gm.t(), am, R::one(), dst);
                } else {
                    gemm(R::one(), am.t(), gm, R::one(), dst);
                }
            }
        });
    }

    /// Runs `f` on the gradient buffer of `id` (zero-initialized on first use),
    /// skipping inputs that do not require gradients.
    fn acc(&self, grads: &mut [Option<Vec<R>>], id: NodeId, f: impl FnOnce(&mut [R])) {
        if !self.requires_grad(id) {
            return;
        }
        let slot =
            grads[id.0].get_or_insert_with(|| vec![R::zero(); self.nodes[id.0].value.numel()]);
        f(slot);
    }
}

fn tr(t: bool) -> &'static str {
    if t {
        "ᵀ"
    } else {
        ""
    }
}

fn view<R: Real>(data: &[R], rows: usize, cols: usize, transpose: bool) -> MatRef<'_, R> {
    let m = MatRef::new(data, rows, cols);
    if transpose {
        m.t()
    } else {
        m
    }
}

fn axpy<R: Real>(dst: &mut [R], src: &[R], a: R) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

fn add_channel_bias<R: Real>(out: &mut [R], bias: &[R], plane: usize) {
    let c = bias.len();
    for (blk, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[blk % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn channel_sums<R: Real>(dst: &mut [R], g: &[R], plane: usize) {
    let c = dst.len();
    for (blk, chunk) in g.chunks(plane).enumerate() {
        dst[blk % c] = dst[blk % c] + chunk.iter().copied().sum::<R>();
    }
}

pub(crate) fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

pub(crate) fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let mx = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<R>().ln()
}

/// Index bookkeeping for the im2col formulation of the temporal convolution.
struct ConvGeometry {
    n: usize,
    ci: usize,
    co: usize,
    cig: usize,
    cog: usize,
    t_in: usize,
    t_out: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], spec: ConvSpec) -> Result<Self> {
        ensure!(
            xs.len() == 3 || xs.len() == 4,
            Shape,
            "temporal_conv expects [N,C,T] or [N,C,T,W], got {:?}",
            xs
        );
        ensure!(
            ws.len() == 3,
            Shape,
            "conv weight must be [C_out, C_in/groups, k], got {:?}",
            ws
        );
        ensure!(
            spec.stride >= 1 && spec.groups >= 1,
            Config,
            "stride and groups must be positive"
        );
        let (n, ci, t_in) = (xs[0], xs[1], xs[2]);
        let w = if xs.len() == 4 { xs[3] } else { 1 };
        let (co, cig, k) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(Error::Config(alloc::format!(
                "temporal kernel must be odd, got {}",
                k
            )));
        }
        ensure!(
            ci % spec.groups == 0 && co % spec.groups == 0,
            Config,
            "groups {} must divide channels {} → {}",
            spec.groups,
            ci,
            co
        );
        ensure!(
            cig == ci / spec.groups,
            Shape,
            "weight expects {} inputs per group, input gives {}",
            cig,
            ci / spec.groups
        );
        let pad = (k - 1) / 2;
        let t_out = (t_in + 2 * pad - k) / spec.stride + 1;
        Ok(Self {
            n,
            ci,
            co,
            cig,
            cog: co / spec.groups,
            t_in,
            t_out,
            w,
            k,
            pad,
            stride: spec.stride,
        })
    }

    fn krow(&self) -> usize {
        self.cig * self.k
    }

    fn out_plane(&self) -> usize {
        self.t_out * self.w
    }

    fn in_plane(&self) -> usize {
        self.t_in * self.w
    }

    fn cols_len(&self) -> usize {
        if self.is_identity_layout() {
            0
        } else {
            self.krow() * self.out_plane()
        }
    }

    fn is_identity_layout(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Column matrix `(cig·k) × (t_out·w)` for sample `s`, group `grp`.
    fn im2col<'a, R: Real>(
        &self,
        x: &'a [R],
        s: usize,
        grp: usize,
        cols: &'a mut [R],
    ) -> MatRef<'a, R> {
        let base = (s * self.ci + grp * self.cig) * self.in_plane();
        if self.is_identity_layout() {
            return MatRef::new(
                &x[base..base + self.cig * self.in_plane()],
                self.cig,
                self.in_plane(),
            );
        }
        let plane = self.out_plane();
        for c in 0..self.cig {
            let src = &x[base + c * self.in_plane()..base + (c + 1) * self.in_plane()];
            for j in 0..self.k {
                let row = &mut cols[(c * self.k + j) * plane..(c * self.k + j + 1) * plane];
                for to in 0..self.t_out {
                    let dst = &mut row[to * self.w..(to + 1) * self.w];
                    match (to * self.stride + j)
                        .checked_sub(self.pad)
                        .filter(|&ti| ti < self.t_in)
                    {
                        Some(ti) => dst.copy_from_slice(&src[ti * self.w..(ti + 1) * self.w]),
                        None => dst.iter_mut().for_each(|v| *v = R::zero()),
                    }
                }
            }
        }
        MatRef::new(cols, self.krow(), plane)
    }

    fn col2im_add<R: Real>(&self, gcols: &[R], s: usize, grp: usize, gx: &mut [R]) {
        let base = (s * self.ci + grp * self.cig) * self.in_plane();
        let plane = self.out_plane();
        for c in 0..self.cig {
            let dst = &mut gx[base + c * self.in_plane()..base + (c + 1) * self.in_plane()];
            for j in 0..self.k {
                let row = &gcols[(c * self.k + j) * plane..(c * self.k + j + 1) * plane];
                for to in 0..self.t_out {
                    if let Some(ti) = (to * self.stride + j)
                        .checked_sub(self.pad)
                        .filter(|&ti| ti < self.t_in)
                    {
                        let d = &mut dst[ti * self.w..(ti + 1) * self.w];
                        for (dv, &gv) in d.iter_mut().zip(&row[to * self.w..(to + 1) * self.w]) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
        }
    }
}

//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records eagerly-evaluated operations; [`Var`] is a copyable
//! handle into it. Calling [`Tape::backward`] on a scalar propagates adjoints
//! to every recorded node, and gradients of leased parameters can then be
//! collected for the optimizer. One tape belongs to one thread; independent
//! tapes (e.g. per training sample) may run on separate threads.

mod kernels;
pub mod gradcheck;

pub use kernels::ConvDims;

use std::cell::RefCell;

use crate::error::TensorError;
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

use kernels::{
    channel_stats, conv2d_backward, conv2d_forward, matmul_abt_acc, matmul_acc, matmul_atb_acc,
    maxpool2_forward,
};

type Id = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddScalar(Id),
    Scale(Id, f64),
    /// x ⊙ s with s a single-element node broadcast over x.
    MulScalarNode {
        x: Id,
        s: Id,
    },
    /// x − s with s broadcast.
    SubScalarNode {
        x: Id,
        s: Id,
    },
    Recip(Id),
    Sqrt(Id),
    Exp(Id),
    Log(Id),
    Relu(Id),
    Sigmoid(Id),
    Softplus(Id),
    SoftmaxLast {
        x: Id,
        lane: usize,
    },
    Matmul {
        a: Id,
        b: Id,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRows {
        x: Id,
        bias: Id,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: Id,
        w: Id,
        bias: Option<Id>,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: Id,
        argmax: Vec<usize>,
    },
    Gap {
        x: Id,
        spatial: usize,
    },
    BatchNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: usize,
        ch: usize,
        spatial: usize,
        training: bool,
    },
    Reshape(Id),
    Permute {
        x: Id,
        /// For each output linear index, the source linear index.
        gather: Vec<usize>,
    },
    SliceAxis {
        x: Id,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Id>,
        axis: usize,
    },
    ReduceSum {
        x: Id,
        axis: usize,
        mean: bool,
    },
    SumAll {
        x: Id,
        mean: bool,
    },
    ExtremumAll {
        x: Id,
        arg: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch-norm statistics recorded during a training-mode forward, to be
/// folded into running buffers by the caller in a deterministic order.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub mean: Vec<f64>,
    /// Unbiased variance estimate (n/(n−1) corrected), the quantity folded
    /// into the running buffer.
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bn_stats: Vec<BnBatchStats>,
}

/// Recording tape. See module docs.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: Id,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var {
            id: inner.nodes.len() - 1,
        }
    }

    /// Record a constant (no gradient).
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.into_data(),
            requires_grad: false,
            param: None,
        })
    }

    /// Record a differentiable leaf (for gradient checks and tests).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.into_data(),
            requires_grad: true,
            param: None,
        })
    }

    /// Lease a parameter from the store as a differentiable leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.value(id);
        self.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: true,
            param: Some(id),
        })
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.id].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.inner.borrow().nodes[v.id].value.len()
    }

    /// Clone out the value of a node.
    pub fn value(&self, v: Var) -> Tensor {
        let inner = self.inner.borrow();
        let n = &inner.nodes[v.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node value is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let n = &inner.nodes[v.id];
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if untouched.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(inner.nodes[v.id].shape.clone(), g.clone()).unwrap())
    }

    /// Batch-norm statistics recorded by training-mode forwards, in op order.
    pub fn take_bn_stats(&self) -> Vec<BnBatchStats> {
        std::mem::take(&mut self.inner.borrow_mut().bn_stats)
    }

    /// Sum gradients of all leased parameters into `sink` (indexed by param).
    pub fn accumulate_param_grads(&self, sink: &mut [Tensor]) {
        let inner = self.inner.borrow();
        for (node, grad) in inner.nodes.iter().zip(&inner.grads) {
            if let (Some(pid), Some(g)) = (node.param, grad) {
                let dst = sink[pid.index()].data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    fn unary(
        &self,
        x: Var,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
    ) -> Var {
        let requires = self.inner.borrow().nodes[x.id].requires_grad;
        self.push(Node {
            op,
            shape,
            value,
            requires_grad: requires,
            param: None,
        })
    }

    fn with_values<R>(&self, ids: &[Id], f: impl FnOnce(&[&[f64]]) -> R) -> R {
        let inner = self.inner.borrow();
        let refs: Vec<&[f64]> = ids.iter().map(|&i| inner.nodes[i].value.as_slice()).collect();
        f(&refs)
    }

    fn requires_any(&self, ids: &[Id]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    // ---- elementwise binary ----------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let inner = self.inner.borrow();
        let (sa, sb) = (&inner.nodes[a.id].shape, &inner.nodes[b.id].shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape("add", a, b)?;
        let value = self.with_values(&[a.id, b.id], |v| {
            v[0].iter().zip(v[1]).map(|(x, y)| x + y).collect()
        });
        Ok(self.binary(a, b, shape, value, Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape("sub", a, b)?;
        let value = self.with_values(&[a.id, b.id], |v| {
            v[0].iter().zip(v[1]).map(|(x, y)| x - y).collect()
        });
        Ok(self.binary(a, b, shape, value, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.same_shape("mul", a, b)?;
        let value = self.with_values(&[a.id, b.id], |v| {
            v[0].iter().zip(v[1]).map(|(x, y)| x * y).collect()
        });
        Ok(self.binary(a, b, shape, value, Op::Mul(a.id, b.id)))
    }

    fn binary(&self, a: Var, b: Var, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires = self.requires_any(&[a.id, b.id]);
        self.push(Node {
            op,
            shape,
            value,
            requires_grad: requires,
            param: None,
        })
    }

    // ---- scalar-argument elementwise --------------------------------------

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|a| a + c).collect());
        self.unary(x, shape, value, Op::AddScalar(x.id))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|a| a * c).collect());
        self.unary(x, shape, value, Op::Scale(x.id, c))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<(), TensorError> {
        if self.numel(s) != 1 {
            return Err(TensorError::InvalidShape {
                op,
                shape: self.shape(s),
                reason: "broadcast operand must be a single element".into(),
            });
        }
        Ok(())
    }

    /// x ⊙ s, broadcasting the single-element node `s` over `x`.
    pub fn mul_scalar_node(&self, x: Var, s: Var) -> Result<Var, TensorError> {
        self.expect_scalar("mul_scalar_node", s)?;
        let shape = self.shape(x);
        let value = self.with_values(&[x.id, s.id], |v| {
            let sv = v[1][0];
            v[0].iter().map(|a| a * sv).collect()
        });
        Ok(self.binary(x, s, shape, value, Op::MulScalarNode { x: x.id, s: s.id }))
    }

    /// x − s, broadcasting the single-element node `s` over `x`.
    pub fn sub_scalar_node(&self, x: Var, s: Var) -> Result<Var, TensorError> {
        self.expect_scalar("sub_scalar_node", s)?;
        let shape = self.shape(x);
        let value = self.with_values(&[x.id, s.id], |v| {
            let sv = v[1][0];
            v[0].iter().map(|a| a - sv).collect()
        });
        Ok(self.binary(x, s, shape, value, Op::SubScalarNode { x: x.id, s: s.id }))
    }

    /// x / s via x ⊙ (1/s).
    pub fn div_scalar_node(&self, x: Var, s: Var) -> Result<Var, TensorError> {
        let r = self.recip(s)?;
        self.mul_scalar_node(x, r)
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn recip(&self, x: Var) -> Result<Var, TensorError> {
        {
            let inner = self.inner.borrow();
            if inner.nodes[x.id].value.iter().any(|&v| v == 0.0) {
                return Err(TensorError::Domain {
                    op: "recip",
                    reason: "reciprocal of zero".into(),
                });
            }
        }
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|a| 1.0 / a).collect());
        Ok(self.unary(x, shape, value, Op::Recip(x.id)))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var, TensorError> {
        {
            let inner = self.inner.borrow();
            if inner.nodes[x.id].value.iter().any(|&v| v < 0.0) {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    reason: "square root of negative value".into(),
                });
            }
        }
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|a| a.sqrt()).collect());
        Ok(self.unary(x, shape, value, Op::Sqrt(x.id)))
    }

    pub fn exp(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|a| a.exp()).collect());
        self.unary(x, shape, value, Op::Exp(x.id))
    }

    pub fn log(&self, x: Var) -> Result<Var, TensorError> {
        {
            let inner = self.inner.borrow();
            if inner.nodes[x.id].value.iter().any(|&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    reason: "log of non-positive value".into(),
                });
            }
        }
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|a| a.ln()).collect());
        Ok(self.unary(x, shape, value, Op::Log(x.id)))
    }

    pub fn relu(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|a| a.max(0.0)).collect());
        self.unary(x, shape, value, Op::Relu(x.id))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| v[0].iter().map(|&a| stable_sigmoid(a)).collect());
        self.unary(x, shape, value, Op::Sigmoid(x.id))
    }

    /// softplus(x) = ln(1 + eˣ), computed in overflow-safe form.
    pub fn softplus(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let value = self.with_values(&[x.id], |v| {
            v[0].iter().map(|&a| a.max(0.0) + (-a.abs()).exp().ln_1p()).collect()
        });
        self.unary(x, shape, value, Op::Softplus(x.id))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        let lane = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let value = self.with_values(&[x.id], |v| {
            let mut out = vec![0.0; v[0].len()];
            for (row_in, row_out) in v[0].chunks_exact(lane).zip(out.chunks_exact_mut(lane)) {
                let m = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &i) in row_out.iter_mut().zip(row_in) {
                    *o = (i - m).exp();
                    z += *o;
                }
                for o in row_out.iter_mut() {
                    *o /= z;
                }
            }
            out
        });
        Ok(self.unary(x, shape, value, Op::SoftmaxLast { x: x.id, lane }))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = self.with_values(&[a.id, b.id], |v| {
            let mut c = vec![0.0; m * n];
            matmul_acc(v[0], v[1], &mut c, m, k, n);
            c
        });
        Ok(self.binary(
            a,
            b,
            vec![m, n],
            value,
            Op::Matmul {
                a: a.id,
                b: b.id,
                m,
                k,
                n,
            },
        ))
    }

    /// x[rows, cols] + bias[cols] broadcast over rows.
    pub fn add_rows(&self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows",
                lhs: sx,
                rhs: sb,
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let value = self.with_values(&[x.id, bias.id], |v| {
            let mut out = v[0].to_vec();
            for row in out.chunks_exact_mut(cols) {
                for (o, &b) in row.iter_mut().zip(v[1]) {
                    *o += b;
                }
            }
            out
        });
        Ok(self.binary(
            x,
            bias,
            vec![rows, cols],
            value,
            Op::AddRows {
                x: x.id,
                bias: bias.id,
                rows,
                cols,
            },
        ))
    }

    // ---- convolution & pooling ----------------------------------------------

    /// 2D convolution on NCHW input with square kernel, zero padding.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 || stride > 2 {
            return Err(TensorError::Domain {
                op: "conv2d",
                reason: format!("stride {stride} unsupported (1 or 2)"),
            });
        }
        let kernel = sw[2];
        let (in_h, in_w) = (sx[2], sx[3]);
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: sx,
                reason: "kernel larger than padded input".into(),
            });
        }
        let dims = ConvDims {
            batch: sx[0],
            in_ch: sx[1],
            in_h,
            in_w,
            out_ch: sw[0],
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        };
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != vec![dims.out_ch] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![dims.out_ch],
                    rhs: sb,
                });
            }
        }
        let mut cols = Vec::new();
        let mut ids = vec![x.id, w.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let value = self.with_values(&ids, |v| {
            conv2d_forward(v[0], v[1], v.get(2).copied(), &dims, &mut cols)
        });
        let requires = self.requires_any(&ids);
        Ok(self.push(Node {
            op: Op::Conv2d {
                x: x.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                dims,
                cols,
            },
            shape: vec![dims.batch, dims.out_ch, dims.out_h, dims.out_w],
            value,
            requires_grad: requires,
            param: None,
        }))
    }

    /// 2×2 max pooling with stride 2 on NCHW input.
    pub fn max_pool2(&self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2",
                shape: sx,
                reason: "needs NCHW with H, W ≥ 2".into(),
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (value, argmax) = self.with_values(&[x.id], |v| maxpool2_forward(v[0], b, c, h, w));
        let shape = vec![b, c, h / 2, w / 2];
        Ok(self.unary(x, shape, value, Op::MaxPool2 { x: x.id, argmax }))
    }

    /// Global average pooling: [N,C,H,W] → [N,C].
    pub fn global_avg_pool(&self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "global_avg_pool",
                shape: sx,
                reason: "needs NCHW".into(),
            });
        }
        let (b, c, spatial) = (sx[0], sx[1], sx[2] * sx[3]);
        let value = self.with_values(&[x.id], |v| {
            let mut out = vec![0.0; b * c];
            for (o, lane) in out.iter_mut().zip(v[0].chunks_exact(spatial)) {
                *o = lane.iter().sum::<f64>() / spatial as f64;
            }
            out
        });
        Ok(self.unary(x, vec![b, c], value, Op::Gap { x: x.id, spatial }))
    }

    /// Adaptive average pooling to a 1×1 target, i.e. global average pooling
    /// keeping the [N,C] result.
    pub fn adaptive_avg_pool_1x1(&self, x: Var) -> Result<Var, TensorError> {
        self.global_avg_pool(x)
    }

    /// Batch normalization on NCHW input.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "batch_norm",
                shape: sx,
                reason: "needs NCHW".into(),
            });
        }
        let (b, c, spatial) = (sx[0], sx[1], sx[2] * sx[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != vec![c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: vec![c],
                    rhs: self.shape(v),
                });
            }
            let _ = name;
        }
        let n_lane = (b * spatial) as f64;
        let (value, xhat, inv_std, training) = {
            let inner = self.inner.borrow();
            let xs = &inner.nodes[x.id].value;
            let gs = &inner.nodes[gamma.id].value;
            let bs = &inner.nodes[beta.id].value;
            let (mean, var, training): (Vec<f64>, Vec<f64>, bool) = match &mode {
                BnMode::Train { .. } => {
                    let (m, v) = channel_stats(xs, b, c, spatial);
                    (m, v, true)
                }
                BnMode::Eval {
                    running_mean,
                    running_var,
                } => (running_mean.to_vec(), running_var.to_vec(), false),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; xs.len()];
            let mut value = vec![0.0; xs.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * spatial;
                    let (m, is, g, be) = (mean[ci], inv_std[ci], gs[ci], bs[ci]);
                    for i in off..off + spatial {
                        let xh = (xs[i] - m) * is;
                        xhat[i] = xh;
                        value[i] = g * xh + be;
                    }
                }
            }
            if let BnMode::Train {
                record: Some((mean_buf, var_buf)),
            } = mode
            {
                let corr = if n_lane > 1.0 { n_lane / (n_lane - 1.0) } else { 1.0 };
                drop(inner);
                self.inner.borrow_mut().bn_stats.push(BnBatchStats {
                    mean_buf,
                    var_buf,
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * corr).collect(),
                });
            }
            (value, xhat, inv_std, training)
        };
        let requires = self.requires_any(&[x.id, gamma.id, beta.id]);
        Ok(self.push(Node {
            op: Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch: b,
                ch: c,
                spatial,
                training,
            },
            shape: sx,
            value,
            requires_grad: requires,
            param: None,
        }))
    }

    // ---- shape manipulation --------------------------------------------------

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        if shape.iter().product::<usize>() != sx.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: sx,
                rhs: shape,
            });
        }
        let value = self.with_values(&[x.id], |v| v[0].to_vec());
        Ok(self.unary(x, shape, value, Op::Reshape(x.id)))
    }

    /// Reorder axes; `perm[i]` gives the source axis for output axis i.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        let rank = sx.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: sx,
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let in_strides = row_major_strides(&sx);
        let numel: usize = sx.iter().product();
        let mut gather = vec![0usize; numel];
        let mut idx = vec![0usize; rank];
        for g in gather.iter_mut() {
            let mut src = 0;
            for (o, &p) in perm.iter().enumerate() {
                src += idx[o] * in_strides[p];
            }
            *g = src;
            // increment out index (row-major)
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let value = self.with_values(&[x.id], |v| gather.iter().map(|&s| v[0][s]).collect());
        Ok(self.unary(x, out_shape, value, Op::Permute { x: x.id, gather }))
    }

    /// Slice `[start, start+len)` along one axis.
    pub fn slice_axis(
        &self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice_axis",
                shape: sx,
                reason: format!("slice [{start}, {}) on axis {axis}", start + len),
            });
        }
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let value = self.with_values(&[x.id], |v| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * sx[axis] + start) * inner;
                out.extend_from_slice(&v[0][base..base + len * inner]);
            }
            out
        });
        Ok(self.unary(
            x,
            out_shape,
            value,
            Op::SliceAxis {
                x: x.id,
                axis,
                start,
            },
        ))
    }

    /// Concatenate along an axis. All other dims must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs".into(),
            });
        }
        let first = self.shape(xs[0]);
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let ids: Vec<Id> = xs.iter().map(|v| v.id).collect();
        let axis_lens: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
        let value = self.with_values(&ids, |vals| {
            let mut out = Vec::with_capacity(outer * axis_total * inner);
            for o in 0..outer {
                for (v, &al) in vals.iter().zip(&axis_lens) {
                    let base = o * al * inner;
                    out.extend_from_slice(&v[base..base + al * inner]);
                }
            }
            out
        });
        let requires = self.requires_any(&ids);
        Ok(self.push(Node {
            op: Op::Concat { xs: ids, axis },
            shape: out_shape,
            value,
            requires_grad: requires,
            param: None,
        }))
    }

    // ---- reductions ------------------------------------------------------------

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(TensorError::InvalidShape {
                op: "reduce",
                shape: sx,
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let alen = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = sx
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let scale = if mean { 1.0 / alen as f64 } else { 1.0 };
        let value = self.with_values(&[x.id], |v| {
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..alen {
                    let base = (o * alen + a) * inner;
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(&v[0][base..base + inner]) {
                        *d += s;
                    }
                }
            }
            if mean {
                for d in &mut out {
                    *d *= scale;
                }
            }
            out
        });
        Ok(self.unary(x, out_shape, value, Op::ReduceSum { x: x.id, axis, mean }))
    }

    pub fn reduce_sum(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, false)
    }

    pub fn reduce_mean(&self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = self.with_values(&[x.id], |v| vec![v[0].iter().sum::<f64>()]);
        self.unary(x, vec![1], value, Op::SumAll { x: x.id, mean: false })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let value = self.with_values(&[x.id], |v| vec![v[0].iter().sum::<f64>() / n]);
        self.unary(x, vec![1], value, Op::SumAll { x: x.id, mean: true })
    }

    /// Minimum over all elements (first occurrence carries the subgradient).
    pub fn min_all(&self, x: Var) -> Var {
        let (value, arg) = self.with_values(&[x.id], |v| {
            let mut arg = 0;
            for (i, &a) in v[0].iter().enumerate() {
                if a < v[0][arg] {
                    arg = i;
                }
            }
            (vec![v[0][arg]], arg)
        });
        self.unary(x, vec![1], value, Op::ExtremumAll { x: x.id, arg })
    }

    /// Maximum over all elements (first occurrence carries the subgradient).
    pub fn max_all(&self, x: Var) -> Var {
        let (value, arg) = self.with_values(&[x.id], |v| {
            let mut arg = 0;
            for (i, &a) in v[0].iter().enumerate() {
                if a > v[0][arg] {
                    arg = i;
                }
            }
            (vec![v[0][arg]], arg)
        });
        self.unary(x, vec![1], value, Op::ExtremumAll { x: x.id, arg })
    }

    // ---- composites ---------------------------------------------------------

    /// Mean squared error between equal-shaped tensors, as a scalar node.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Numerically stable log-softmax over a vector node.
    pub fn log_softmax_vec(&self, z: Var) -> Result<Var, TensorError> {
        let m = self.max_all(z);
        let shifted = self.sub_scalar_node(z, m)?;
        let lse = self.log(self.sum_all(self.exp(shifted)))?;
        self.sub_scalar_node(shifted, lse)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// reachable from `loss` that requires grad.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        let TapeInner { nodes, grads, .. } = &mut *inner;
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.id].shape.clone(),
            });
        }
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            backprop_node(nodes, id, &g, grads);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

/// Batch-norm execution mode.
pub enum BnMode<'a> {
    /// Normalize by batch statistics; optionally record them for running
    /// buffers keyed by (mean, var) buffer ids.
    Train {
        record: Option<(BufferId, BufferId)>,
    },
    /// Normalize by the provided running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn acc_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: Id, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

#[allow(clippy::too_many_lines)]
fn backprop_node(nodes: &[Node], id: Id, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_into(grads, nodes, *a, |d| add_assign(d, g));
            acc_into(grads, nodes, *b, |d| add_assign(d, g));
        }
        Op::Sub(a, b) => {
            acc_into(grads, nodes, *a, |d| add_assign(d, g));
            acc_into(grads, nodes, *b, |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            acc_into(grads, nodes, *a, |d| {
                for ((x, y), z) in d.iter_mut().zip(g).zip(vb) {
                    *x += y * z;
                }
            });
            acc_into(grads, nodes, *b, |d| {
                for ((x, y), z) in d.iter_mut().zip(g).zip(va) {
                    *x += y * z;
                }
            });
        }
        Op::AddScalar(x) => acc_into(grads, nodes, *x, |d| add_assign(d, g)),
        Op::Scale(x, c) => {
            let c = *c;
            acc_into(grads, nodes, *x, |d| {
                for (a, b) in d.iter_mut().zip(g) {
                    *a += c * b;
                }
            });
        }
        Op::MulScalarNode { x, s } => {
            let sv = nodes[*s].value[0];
            let xv = &nodes[*x].value;
            acc_into(grads, nodes, *x, |d| {
                for (a, b) in d.iter_mut().zip(g) {
                    *a += sv * b;
                }
            });
            acc_into(grads, nodes, *s, |d| {
                d[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            });
        }
        Op::SubScalarNode { x, s } => {
            acc_into(grads, nodes, *x, |d| add_assign(d, g));
            acc_into(grads, nodes, *s, |d| {
                d[0] -= g.iter().sum::<f64>();
            });
        }
        Op::Recip(x) => {
            let y = &nodes[id].value; // y = 1/x, dy/dx = -y²
            acc_into(grads, nodes, *x, |d| {
                for ((a, b), yy) in d.iter_mut().zip(g).zip(y) {
                    *a -= b * yy * yy;
                }
            });
        }
        Op::Sqrt(x) => {
            let y = &nodes[id].value; // dy/dx = 1/(2√x) = 1/(2y)
            acc_into(grads, nodes, *x, |d| {
                for ((a, b), yy) in d.iter_mut().zip(g).zip(y) {
                    *a += b / (2.0 * yy);
                }
            });
        }
        Op::Exp(x) => {
            let y = &nodes[id].value;
            acc_into(grads, nodes, *x, |d| {
                for ((a, b), yy) in d.iter_mut().zip(g).zip(y) {
                    *a += b * yy;
                }
            });
        }
        Op::Log(x) => {
            let xv = &nodes[*x].value;
            acc_into(grads, nodes, *x, |d| {
                for ((a, b), xx) in d.iter_mut().zip(g).zip(xv) {
                    *a += b / xx;
                }
            });
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            acc_into(grads, nodes, *x, |d| {
                for ((a, b), xx) in d.iter_mut().zip(g).zip(xv) {
                    if *xx > 0.0 {
                        *a += b;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &nodes[id].value;
            acc_into(grads, nodes, *x, |d| {
                for ((a, b), yy) in d.iter_mut().zip(g).zip(y) {
                    *a += b * yy * (1.0 - yy);
                }
            });
        }
        Op::Softplus(x) => {
            let xv = &nodes[*x].value; // d softplus = sigmoid(x)
            acc_into(grads, nodes, *x, |d| {
                for ((a, b), &xx) in d.iter_mut().zip(g).zip(xv) {
                    *a += b * stable_sigmoid(xx);
                }
            });
        }
        Op::SoftmaxLast { x, lane } => {
            let y = &nodes[id].value;
            let lane = *lane;
            acc_into(grads, nodes, *x, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(lane)
                    .zip(g.chunks_exact(lane))
                    .zip(y.chunks_exact(lane))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dd, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dd += yy * (gg - dot);
                    }
                }
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            acc_into(grads, nodes, *a, |d| {
                matmul_abt_acc(g, vb, d, *m, *k, *n); // dA = dY · Bᵀ
            });
            acc_into(grads, nodes, *b, |d| {
                matmul_atb_acc(va, g, d, *m, *k, *n); // dB = Aᵀ · dY
            });
        }
        Op::AddRows { x, bias, rows, cols } => {
            let _ = rows;
            acc_into(grads, nodes, *x, |d| add_assign(d, g));
            acc_into(grads, nodes, *bias, |d| {
                for grow in g.chunks_exact(*cols) {
                    for (b, gg) in d.iter_mut().zip(grow) {
                        *b += gg;
                    }
                }
            });
        }
        Op::Conv2d {
            x,
            w,
            bias,
            dims,
            cols,
        } => {
            let wv = &nodes[*w].value;
            let need_dx = nodes[*x].requires_grad;
            let need_dw = nodes[*w].requires_grad;
            let need_db = bias.map(|b| nodes[b].requires_grad).unwrap_or(false);
            let mut dw = if need_dw { Some(vec![0.0; nodes[*w].value.len()]) } else { None };
            let mut db = if need_db {
                Some(vec![0.0; dims.out_ch])
            } else {
                None
            };
            let mut dx = if need_dx {
                Some(vec![0.0; nodes[*x].value.len()])
            } else {
                None
            };
            conv2d_backward(
                g,
                wv,
                cols,
                dims,
                dw.as_deref_mut(),
                db.as_deref_mut(),
                dx.as_deref_mut(),
            );
            if let Some(dw) = dw {
                acc_into(grads, nodes, *w, |d| add_assign(d, &dw));
            }
            if let (Some(db), Some(b)) = (db, bias) {
                acc_into(grads, nodes, *b, |d| add_assign(d, &db));
            }
            if let Some(dx) = dx {
                acc_into(grads, nodes, *x, |d| add_assign(d, &dx));
            }
        }
        Op::MaxPool2 { x, argmax } => {
            acc_into(grads, nodes, *x, |d| {
                for (&src, gg) in argmax.iter().zip(g) {
                    d[src] += gg;
                }
            });
        }
        Op::Gap { x, spatial } => {
            let inv = 1.0 / *spatial as f64;
            acc_into(grads, nodes, *x, |d| {
                for (lane, gg) in d.chunks_exact_mut(*spatial).zip(g) {
                    let v = gg * inv;
                    for a in lane {
                        *a += v;
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
            ch,
            spatial,
            training,
        } => {
            let gv = &nodes[*gamma].value;
            let (b, c, sp) = (*batch, *ch, *spatial);
            // per-channel reductions of g and g·xhat
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * sp;
                    let mut s = 0.0;
                    let mut sx = 0.0;
                    for i in off..off + sp {
                        s += g[i];
                        sx += g[i] * xhat[i];
                    }
                    sum_g[ci] += s;
                    sum_gx[ci] += sx;
                }
            }
            acc_into(grads, nodes, *beta, |d| add_assign(d, &sum_g));
            acc_into(grads, nodes, *gamma, |d| add_assign(d, &sum_gx));
            acc_into(grads, nodes, *x, |d| {
                if *training {
                    let n = (b * sp) as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * sp;
                            let coef = gv[ci] * inv_std[ci] / n;
                            for i in off..off + sp {
                                d[i] += coef * (n * g[i] - sum_g[ci] - xhat[i] * sum_gx[ci]);
                            }
                        }
                    }
                } else {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * sp;
                            let coef = gv[ci] * inv_std[ci];
                            for i in off..off + sp {
                                d[i] += coef * g[i];
                            }
                        }
                    }
                }
            });
        }
        Op::Reshape(x) => acc_into(grads, nodes, *x, |d| add_assign(d, g)),
        Op::Permute { x, gather } => {
            acc_into(grads, nodes, *x, |d| {
                for (&src, gg) in gather.iter().zip(g) {
                    d[src] += gg;
                }
            });
        }
        Op::SliceAxis { x, axis, start } => {
            let sx = &nodes[*x].shape;
            let out_axis = nodes[id].shape[*axis];
            let outer: usize = sx[..*axis].iter().product();
            let inner: usize = sx[*axis + 1..].iter().product();
            acc_into(grads, nodes, *x, |d| {
                for o in 0..outer {
                    let dst = (o * sx[*axis] + start) * inner;
                    let src = o * out_axis * inner;
                    for i in 0..out_axis * inner {
                        d[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Concat { xs, axis } => {
            let out_shape = &nodes[id].shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let mut offset = 0;
            for &xid in xs {
                let alen = nodes[xid].shape[*axis];
                let this_off = offset;
                acc_into(grads, nodes, xid, |d| {
                    for o in 0..outer {
                        let src = (o * out_shape[*axis] + this_off) * inner;
                        let dst = o * alen * inner;
                        for i in 0..alen * inner {
                            d[dst + i] += g[src + i];
                        }
                    }
                });
                offset += alen;
            }
        }
        Op::ReduceSum { x, axis, mean } => {
            let sx = &nodes[*x].shape;
            let alen = sx[*axis];
            let outer: usize = sx[..*axis].iter().product();
            let inner: usize = sx[*axis + 1..].iter().product();
            let scale = if *mean { 1.0 / alen as f64 } else { 1.0 };
            acc_into(grads, nodes, *x, |d| {
                for o in 0..outer {
                    for a in 0..alen {
                        let base = (o * alen + a) * inner;
                        let src = o * inner;
                        for i in 0..inner {
                            d[base + i] += g[src + i] * scale;
                        }
                    }
                }
            });
        }
        Op::SumAll { x, mean } => {
            let n = nodes[*x].value.len() as f64;
            let v = if *mean { g[0] / n } else { g[0] };
            acc_into(grads, nodes, *x, |d| {
                for a in d {
                    *a += v;
                }
            });
        }
        Op::ExtremumAll { x, arg } => {
            acc_into(grads, nodes, *x, |d| {
                d[*arg] += g[0];
            });
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let tape = Tape::new();
        let x = tape.constant(t(&[0.0]));
        let y = tape.softplus(x);
        assert!((tape.item(y) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_symmetry() {
        let tape = Tape::new();
        let x = tape.constant(t(&[0.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn d_square_at_3_is_6() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3.0]));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn d_sigmoid_at_0_is_quarter() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[0.0]));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a·f + b·g) == a·grad(f) + b·grad(g) on shared leaves
        let point = t(&[0.3, -1.2, 2.0]);
        let grad_of = |a: f64, b: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(point.clone());
            let f = tape.sum_all(tape.mul(x, x).unwrap());
            let g = tape.sum_all(tape.sigmoid(x));
            let loss = tape
                .add(tape.scale(f, a), tape.scale(g, b))
                .unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().into_data()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(2.5, -0.75);
        for i in 0..3 {
            let expect = 2.5 * gf[i] - 0.75 * gg[i];
            assert!((combined[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip_grads() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1.0, 2.0]));
        let b = tape.leaf(t(&[3.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = tape.slice_axis(c, 0, 1, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0]);
        let loss = tape.sum_all(tape.mul(s, s).unwrap());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn permute_transposes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(y), vec![3, 2]);
        assert_eq!(tape.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn reduce_axes_match_by_hand() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s0 = tape.reduce_sum(x, 0).unwrap();
        assert_eq!(tape.value(s0).data(), &[5., 7., 9.]);
        let m1 = tape.reduce_mean(x, 1).unwrap();
        assert_eq!(tape.value(m1).data(), &[2., 5.]);
    }

    #[test]
    fn log_softmax_matches_plain_log_of_softmax() {
        let tape = Tape::new();
        let z = tape.constant(t(&[0.2, -1.0, 3.0]));
        let ls = tape.log_softmax_vec(z).unwrap();
        let sm = tape.softmax_last(z).unwrap();
        let direct = tape.log(sm).unwrap();
        let a = tape.value(ls);
        let b = tape.value(direct);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

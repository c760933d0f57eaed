use std::sync::Arc;

use crate::scalar::Real;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies the operation that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Bmm,
    Softmax,
    LayerNorm,
    Gelu,
    Conv2d,
    AvgPool2d,
    PixelShuffle,
    Permute,
    Roll,
    Gather,
    BilinearUpsample,
    Sum,
    RowSum,
    Abs,
    Scale,
    Square,
    Reshape,
}

impl OpKind {
    /// Every differentiable operation (everything except leaves).
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Matmul,
        OpKind::Bmm,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Conv2d,
        OpKind::AvgPool2d,
        OpKind::PixelShuffle,
        OpKind::Permute,
        OpKind::Roll,
        OpKind::Gather,
        OpKind::BilinearUpsample,
        OpKind::Sum,
        OpKind::RowSum,
        OpKind::Abs,
        OpKind::Scale,
        OpKind::Square,
        OpKind::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Matmul => "matmul",
            OpKind::Bmm => "bmm",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::PixelShuffle => "pixel_shuffle",
            OpKind::Permute => "permute",
            OpKind::Roll => "roll",
            OpKind::Gather => "gather",
            OpKind::BilinearUpsample => "bilinear_upsample",
            OpKind::Sum => "sum",
            OpKind::RowSum => "row_sum",
            OpKind::Abs => "abs",
            OpKind::Scale => "scale",
            OpKind::Square => "square",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE
            .iter()
            .copied()
            .chain(std::iter::once(OpKind::Leaf))
            .find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Which operand (if any) is repeated along the leading dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
        dim: usize,
    },
    Gelu {
        a: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
        cols: Vec<R>,
    },
    AvgPool {
        a: Var,
        channels: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    Gather {
        a: Var,
        index: Arc<[usize]>,
        kind: OpKind,
    },
    Bilinear {
        a: Var,
        channels: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Sum {
        a: Var,
    },
    RowSum {
        a: Var,
        cols: usize,
    },
    Abs {
        a: Var,
    },
    Scale {
        a: Var,
        c: R,
    },
    Square {
        a: Var,
    },
    Reshape {
        a: Var,
    },
}

impl<R> Op<R> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => OpKind::Add,
                BinaryKind::Sub => OpKind::Sub,
                BinaryKind::Mul => OpKind::Mul,
                BinaryKind::Div => OpKind::Div,
            },
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool { .. } => OpKind::AvgPool2d,
            Op::Gather { kind, .. } => *kind,
            Op::Bilinear { .. } => OpKind::BilinearUpsample,
            Op::Sum { .. } => OpKind::Sum,
            Op::RowSum { .. } => OpKind::RowSum,
            Op::Abs { .. } => OpKind::Abs,
            Op::Scale { .. } => OpKind::Scale,
            Op::Square { .. } => OpKind::Square,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Define-by-run record of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and `backward` walks it once in reverse.
#[derive(Debug)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    sign_flip: Option<OpKind>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_scale() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            sign_flip: None,
        }
    }

    /// Test hook: negates the backward contribution of every node of `kind`.
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<R>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = broadcast_mode(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let shape = if bcast == Broadcast::Lhs { sb } else { sa }.to_vec();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = da.len().max(db.len());
        let (la, lb) = (da.len(), db.len());
        let f = |x: R, y: R| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<R> = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Binary { kind, a, b },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * x).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Square { a }, ng)
    }

    /// Absolute value; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.abs()).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Abs { a }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = R::lit(gelu_scale());
        let c = R::lit(GELU_C);
        let half = R::lit(0.5);
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| half * x * (R::one() + (k * (x + c * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a }, ng)
    }

    // ---- reductions & shape ------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, R::one() / R::count(n))
    }

    /// Sums over the last dimension: `[.., D] -> [..]` (`[D] -> [1]`).
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().expect("rank >= 1");
        let shape = if t.rank() == 1 {
            vec![1]
        } else {
            t.shape()[..t.rank() - 1].to_vec()
        };
        let data = t.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(&shape, data).expect("row count");
        let ng = self.ng(a);
        self.push(out, Op::RowSum { a, cols }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).reshaped(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: self.shape(a).to_vec(),
            rhs: shape.to_vec(),
        })?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape { a }, ng))
    }

    fn gather_kind(
        &mut self,
        a: Var,
        index: Arc<[usize]>,
        shape: &[usize],
        kind: OpKind,
    ) -> Result<Var, TensorError> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("gather index {bad} out of bounds for {} elements", src.len()),
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Gather { a, index, kind }, ng))
    }

    /// General gather: `out.flat[i] = a.flat[index[i]]`.
    pub fn gather(
        &mut self,
        a: Var,
        index: impl Into<Arc<[usize]>>,
        shape: &[usize],
    ) -> Result<Var, TensorError> {
        self.gather_kind(a, index.into(), shape, OpKind::Gather)
    }

    /// Axis permutation, `out.shape[i] = a.shape[axes[i]]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let (index, out_shape) = permute_index(&shape, axes)?;
        self.gather_kind(a, index.into(), &out_shape, OpKind::Permute)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    /// Cyclic shift of axes 0 and 1: `out[i, j] = a[(i + dy) mod H, (j + dx) mod W]`.
    pub fn roll2d(&mut self, a: Var, dy: isize, dx: isize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::BadAxis {
                op: "roll",
                axis: 1,
                rank: shape.len(),
            });
        }
        let (h, w) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut index = Vec::with_capacity(h * w * inner);
        for i in 0..h {
            let si = (i as isize + dy).rem_euclid(h as isize) as usize;
            for j in 0..w {
                let sj = (j as isize + dx).rem_euclid(w as isize) as usize;
                let base = (si * w + sj) * inner;
                index.extend(base..base + inner);
            }
        }
        self.gather_kind(a, index.into(), &shape, OpKind::Roll)
    }

    /// `[C·r², H, W] -> [C, r·H, r·W]`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let [c, h, w] = rank3(&shape, "pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(TensorError::NotDivisible {
                op: "pixel_shuffle",
                dim: "channels",
                size: c,
                divisor: r * r,
            });
        }
        let co = c / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut index = Vec::with_capacity(c * h * w);
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, i) = (oy / r, oy % r);
                    let (x, j) = (ox / r, ox % r);
                    let ic = oc * r * r + i * r + j;
                    index.push((ic * h + y) * w + x);
                }
            }
        }
        self.gather_kind(a, index.into(), &[co, ho, wo], OpKind::PixelShuffle)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul { a, b, m, k, n }, ng))
    }

    /// Batched product `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![R::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            kernels::gemm_nn(
                &da[t * m * k..(t + 1) * m * k],
                &db[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    /// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- normalisation & attention ----------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![R::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(R::neg_infinity(), R::max);
                let mut z = R::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Normalises over the last dimension, then applies `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: R,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let dim = *shape.last().expect("rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let x = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = x.len() / dim;
        let inv_dim = R::one() / R::count(dim);
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(dim) {
            let mean = row.iter().copied().sum::<R>() * inv_dim;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_dim;
            let inv = R::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
                dim,
            },
            ng,
        ))
    }

    // ---- spatial -----------------------------------------------------------

    /// 2-D convolution of a `[C, H, W]` input with an odd `[O, C, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let [c, h, w] = rank3(&si, "conv2d")?;
        if sk.len() != 4 || sk[1] != c || sk[2] != sk[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (o, k) = (sk[0], sk[2]);
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel {
                op: "conv2d",
                size: k,
            });
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::InvalidShape {
                shape: si,
                reason: format!("kernel {k} with stride {stride}, padding {padding} does not fit"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![R::zero(); o * ho * wo];
        if let Some(b) = bias {
            for (plane, &bv) in out.chunks_mut(ho * wo).zip(self.value(b).data()) {
                plane.fill(bv);
            }
        }
        kernels::gemm_nn(
            self.value(kernel).data(),
            &cols,
            &mut out,
            o,
            geom.col_rows(),
            ho * wo,
        );
        let ng = self.ng(input) || self.ng(kernel) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(&[o, ho, wo], out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels: o,
                cols,
            },
            ng,
        ))
    }

    /// Block means over non-overlapping `k×k` tiles of `[C, H, W]` or `[H, W]`.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let (channels, h, w) = match *shape.as_slice() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::InvalidShape {
                    shape,
                    reason: "avg_pool2d expects rank 2 or 3".into(),
                })
            }
        };
        for (dim, size) in [("height", h), ("width", w)] {
            if k == 0 || size % k != 0 {
                return Err(TensorError::NotDivisible {
                    op: "avg_pool2d",
                    dim,
                    size,
                    divisor: k,
                });
            }
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(a).data();
        let norm = R::one() / R::count(k * k);
        let mut out = vec![R::zero(); channels * ho * wo];
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    out[(c * ho + y / k) * wo + x / k] += src[(c * h + y) * w + x];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        let out_shape = if shape.len() == 2 {
            vec![ho, wo]
        } else {
            vec![channels, ho, wo]
        };
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::AvgPool {
                a,
                channels,
                h,
                w,
                k,
            },
            ng,
        ))
    }

    /// Align-corners bilinear upsampling of `[C, H, W]` by an integer factor.
    pub fn bilinear_upsample(&mut self, a: Var, scale: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let [c, h, w] = rank3(&shape, "bilinear_upsample")?;
        let out_hw = (h * scale, w * scale);
        let data = kernels::bilinear_resample(self.value(a).data(), c, (h, w), out_hw);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[c, out_hw.0, out_hw.1], data)?,
            Op::Bilinear {
                a,
                channels: c,
                in_hw: (h, w),
                out_hw,
            },
            ng,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let slot = &mut self.nodes[idx].value.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let flip = self.sign_flip == Some(self.nodes[idx].op.kind());
            for (input, mut contrib) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                if flip {
                    contrib.iter_mut().for_each(|v| *v = -*v);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn data(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    fn input_grads(&self, idx: usize, g: &[R]) -> Vec<(Var, Vec<R>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let (la, lb) = (da.len(), db.len());
                let mut ga = vec![R::zero(); la];
                let mut gb = vec![R::zero(); lb];
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = (da[i % la], db[i % lb]);
                    let (pa, pb) = match kind {
                        BinaryKind::Add => (gi, gi),
                        BinaryKind::Sub => (gi, -gi),
                        BinaryKind::Mul => (gi * y, gi * x),
                        BinaryKind::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[i % la] += pa;
                    gb[i % lb] += pb;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Matmul { a, b, m, k, n } => {
                let mut ga = vec![R::zero(); m * k];
                let mut gb = vec![R::zero(); k * n];
                if self.ng(*a) {
                    kernels::gemm_nt(g, self.data(*b), &mut ga, *m, *n, *k);
                }
                if self.ng(*b) {
                    kernels::gemm_tn(self.data(*a), g, &mut gb, *k, *m, *n);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = vec![R::zero(); batch * m * k];
                let mut gb = vec![R::zero(); batch * k * n];
                for t in 0..*batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    if self.ng(*a) {
                        kernels::gemm_nt(
                            gt,
                            &db[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    if self.ng(*b) {
                        kernels::gemm_tn(
                            &da[t * m * k..(t + 1) * m * k],
                            gt,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let mut ga = vec![R::zero(); g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: R = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..*len {
                            ga[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
                dim,
            } => {
                let dim = *dim;
                let gam = self.data(*gamma);
                let mut ga = vec![R::zero(); g.len()];
                let mut gg = vec![R::zero(); dim];
                let mut gbeta = vec![R::zero(); dim];
                let inv_dim = R::one() / R::count(dim);
                let mut dxhat = vec![R::zero(); dim];
                for (r, (grow, xrow)) in g.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                    let mut s1 = R::zero();
                    let mut s2 = R::zero();
                    for j in 0..dim {
                        gg[j] += grow[j] * xrow[j];
                        gbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gam[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xrow[j];
                    }
                    let inv = inv_std[r];
                    let dst = &mut ga[r * dim..(r + 1) * dim];
                    for j in 0..dim {
                        dst[j] = inv * (dxhat[j] - inv_dim * s1 - xrow[j] * inv_dim * s2);
                    }
                }
                vec![(*a, ga), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Gelu { a } => {
                let k = R::lit(gelu_scale());
                let c = R::lit(GELU_C);
                let half = R::lit(0.5);
                let three = R::lit(3.0);
                let ga = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let d = half * (R::one() + t)
                            + half * x * (R::one() - t * t) * k * (R::one() + three * c * x * x);
                        gi * d
                    })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels,
                cols,
            } => {
                let o = *out_channels;
                let hw = geom.out_height() * geom.out_width();
                let rows = geom.col_rows();
                let mut res = Vec::with_capacity(3);
                if self.ng(*kernel) {
                    let mut gk = vec![R::zero(); o * rows];
                    kernels::gemm_nt(g, cols, &mut gk, o, hw, rows);
                    res.push((*kernel, gk));
                }
                if self.ng(*input) {
                    let mut gcols = vec![R::zero(); rows * hw];
                    kernels::gemm_tn(self.data(*kernel), g, &mut gcols, rows, o, hw);
                    let mut gi = vec![R::zero(); self.data(*input).len()];
                    kernels::col2im(&gcols, geom, &mut gi);
                    res.push((*input, gi));
                }
                if let Some(b) = bias {
                    let gb = g.chunks(hw).map(|p| p.iter().copied().sum()).collect();
                    res.push((*b, gb));
                }
                res
            }
            Op::AvgPool {
                a,
                channels,
                h,
                w,
                k,
            } => {
                let (h, w, k) = (*h, *w, *k);
                let (ho, wo) = (h / k, w / k);
                let norm = R::one() / R::count(k * k);
                let mut ga = vec![R::zero(); channels * h * w];
                for c in 0..*channels {
                    for y in 0..h {
                        for x in 0..w {
                            ga[(c * h + y) * w + x] = g[(c * ho + y / k) * wo + x / k] * norm;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Gather { a, index, .. } => {
                let mut ga = vec![R::zero(); self.data(*a).len()];
                for (&src, &gi) in index.iter().zip(g) {
                    ga[src] += gi;
                }
                vec![(*a, ga)]
            }
            Op::Bilinear {
                a,
                channels,
                in_hw,
                out_hw,
            } => {
                let mut ga = vec![R::zero(); self.data(*a).len()];
                kernels::bilinear_resample_adjoint(g, *channels, *in_hw, *out_hw, &mut ga);
                vec![(*a, ga)]
            }
            Op::Sum { a } => vec![(*a, vec![g[0]; self.data(*a).len()])],
            Op::RowSum { a, cols } => {
                let ga = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, *cols))
                    .collect();
                vec![(*a, ga)]
            }
            Op::Abs { a } => {
                let ga = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| {
                        if x > R::zero() {
                            gi
                        } else if x < R::zero() {
                            -gi
                        } else {
                            R::zero()
                        }
                    })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Scale { a, c } => vec![(*a, g.iter().map(|&gi| gi * *c).collect())],
            Op::Square { a } => {
                let two = R::lit(2.0);
                let ga = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| two * x * gi)
                    .collect();
                vec![(*a, ga)]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
        }
    }
}

fn rank3(shape: &[usize], op: &'static str) -> Result<[usize; 3], TensorError> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects a [C, H, W] tensor"),
        }),
    }
}

/// Trailing-dimension broadcasting: equal shapes, or the smaller operand's
/// shape is a suffix of the larger one (a single element always broadcasts).
fn broadcast_mode(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::None);
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 || (b.len() < a.len() && a.ends_with(b)) {
        Some(Broadcast::Rhs)
    } else if na == 1 || (a.len() < b.len() && b.ends_with(a)) {
        Some(Broadcast::Lhs)
    } else {
        None
    }
}

fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>), TensorError> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(TensorError::BadAxis {
            op: "permute",
            axis: axes.len(),
            rank,
        });
    }
    for &ax in axes {
        if ax >= rank || seen[ax] {
            return Err(TensorError::BadAxis {
                op: "permute",
                axis: ax,
                rank,
            });
        }
        seen[ax] = true;
    }
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&ax| strides[ax]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        index.push(counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok((index, out_shape))
}

//! Wengert tape with eager evaluation and reusable gradient graphs.
//!
//! `grads_graph` appends the chain-rule computation of d(out)/d(wrt) as
//! ordinary tape nodes. Because every operation's adjoint is itself expressed
//! through the same primitive set, those gradient nodes can be differentiated
//! again — which is how an objective built from reconstructed gradients gets
//! its pixel gradient.

use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Div(Val, Val),
    Neg(Val),
    Scale(Val, f64),
    AddScalar(Val),
    Exp(Val),
    Ln(Val),
    Sqrt(Val),
    Sigmoid(Val),
    Softplus(Val),
    Relu(Val),
    Abs(Val),
    /// Elementwise product with a constant mask (adjoint of relu/abs, etc).
    MulMask(Val, Rc<Vec<f64>>),
    Sum(Val),
    /// Scalar broadcast to the node's own shape.
    BroadcastTo(Val),
    SumRows(Val),
    MeanRows(Val),
    BroadcastRows(Val),
    /// [C] vector tiled as `groups_before` x C x `group_len`.
    BcChannel { src: Val, groups_before: usize, group_len: usize },
    /// Adjoint of `BcChannel`: sum over everything but the channel axis.
    ReduceChannel { src: Val, groups_before: usize, group_len: usize },
    Gather(Val, Rc<Vec<usize>>),
    Scatter(Val, Rc<Vec<usize>>),
    Reshape(Val),
    ConcatFlat(Rc<Vec<Val>>),
    SliceFlat(Val, usize),
    PlaceFlat(Val, usize),
    /// A[m,k] * B[n,k]^T
    MatmulNT(Val, Val),
    /// A[m,k] * B[k,n]
    MatmulNN(Val, Val),
    /// A[k,m]^T * B[k,n]
    MatmulTN(Val, Val),
    Conv2d { x: Val, k: Val, d: ConvDims },
    ConvGx { g: Val, k: Val, d: ConvDims },
    ConvGk { x: Val, g: Val, d: ConvDims },
    AvgPool { x: Val, n: usize, c: usize, h: usize, w: usize, k: usize },
    AvgPoolBack { g: Val, n: usize, c: usize, h: usize, w: usize, k: usize },
    /// Anisotropic L1 total variation; `coef` is the sign map fixed at forward time.
    TvL1 { x: Val, coef: Rc<Vec<f64>> },
    /// Cosine similarity of two flat vectors.
    Cosine(Val, Val),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    is_grad_leaf: bool,
}

/// Recording tape. One logical execution context; not shared across threads.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    leaf_grads: Vec<(usize, Val)>,
    /// Finiteness is enforced at public-op boundaries. Inside the adjoint
    /// construction the per-node scan is skipped; the gradients handed back
    /// by `grads_graph` are checked instead.
    in_adjoint: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            consumed: false,
            leaf_grads: Vec::new(),
            in_adjoint: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape_of(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Val) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn tensor_of(&self, v: Val) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone())
            .expect("tape node data is always a valid tensor")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, leaf: bool) -> Result<Val> {
        if !self.in_adjoint {
            check_finite(op_name(&op), &data)?;
        }
        self.nodes.push(Node { op, shape, data, is_grad_leaf: leaf });
        Ok(Val(self.nodes.len() - 1))
    }

    // ── Registration ────────────────────────────────────────────────

    /// Register a tensor value; it becomes a gradient leaf iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Val> {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Register a constant (never differentiated against).
    pub fn constant(&mut self, t: &Tensor) -> Result<Val> {
        self.push(Op::Const, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn const_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Val> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "const_from",
                detail: format!("shape {shape:?} vs {} values", data.len()),
            });
        }
        self.push(Op::Const, shape.to_vec(), data, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Val> {
        self.push(Op::Const, vec![1], vec![v], false)
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Val, b: Val) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op,
                detail: format!(
                    "operands differ: {:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn div(&mut self, a: Val, b: Val) -> Result<Val> {
        self.same_shape("div", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        self.push(Op::Div(a, b), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn neg(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| -x).collect();
        self.push(Op::Neg(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn add_scalar(&mut self, a: Val, c: f64) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn exp(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn ln(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        self.push(Op::Ln(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn sqrt(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        self.push(Op::Sqrt(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn sigmoid(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| stable_sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn softplus(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| stable_softplus(x)).collect();
        self.push(Op::Softplus(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn relu(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), data, false)
    }

    pub fn abs(&mut self, a: Val) -> Result<Val> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.abs()).collect();
        self.push(Op::Abs(a), self.nodes[a.0].shape.clone(), data, false)
    }

    fn mul_mask(&mut self, a: Val, mask: Rc<Vec<f64>>) -> Result<Val> {
        debug_assert_eq!(self.nodes[a.0].data.len(), mask.len());
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        self.push(Op::MulMask(a, mask), self.nodes[a.0].shape.clone(), data, false)
    }

    // ── Reductions and broadcasts ───────────────────────────────────

    pub fn sum(&mut self, a: Val) -> Result<Val> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s], false)
    }

    pub fn broadcast_to(&mut self, scalar: Val, shape: &[usize]) -> Result<Val> {
        if self.nodes[scalar.0].data.len() != 1 {
            return Err(Error::Contract("broadcast_to expects a scalar".into()));
        }
        let numel: usize = shape.iter().product();
        let v = self.nodes[scalar.0].data[0];
        self.push(Op::BroadcastTo(scalar), shape.to_vec(), vec![v; numel], false)
    }

    fn rows_cols(&self, op: &'static str, a: Val) -> Result<(usize, usize)> {
        let sh = &self.nodes[a.0].shape;
        if sh.len() != 2 {
            return Err(Error::Dimension { op, detail: format!("expected rank 2, got {sh:?}") });
        }
        Ok((sh[0], sh[1]))
    }

    pub fn sum_rows(&mut self, a: Val) -> Result<Val> {
        let (r, c) = self.rows_cols("sum_rows", a)?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.nodes[a.0].data[i * c + j];
            }
        }
        self.push(Op::SumRows(a), vec![c], out, false)
    }

    pub fn mean_rows(&mut self, a: Val) -> Result<Val> {
        let (r, c) = self.rows_cols("mean_rows", a)?;
        let inv = 1.0 / r as f64;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.nodes[a.0].data[i * c + j];
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        self.push(Op::MeanRows(a), vec![c], out, false)
    }

    pub fn broadcast_rows(&mut self, a: Val, rows: usize) -> Result<Val> {
        let sh = &self.nodes[a.0].shape;
        if sh.len() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_rows",
                detail: format!("expected rank 1, got {sh:?}"),
            });
        }
        let c = sh[0];
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].data);
        }
        self.push(Op::BroadcastRows(a), vec![rows, c], out, false)
    }

    /// Tile a [C] vector across a [N,C,H,W], [C,H,W] or [C] layout.
    pub fn bc_channel_like(&mut self, p: Val, like: Val) -> Result<Val> {
        let c = {
            let psh = &self.nodes[p.0].shape;
            if psh.len() != 1 {
                return Err(Error::Dimension {
                    op: "bc_channel",
                    detail: format!("per-channel vector must be rank 1, got {psh:?}"),
                });
            }
            psh[0]
        };
        let (groups_before, group_len) = channel_layout("bc_channel", self.shape_of(like), c)?;
        let shape = self.nodes[like.0].shape.clone();
        let src = &self.nodes[p.0].data;
        let mut out = Vec::with_capacity(groups_before * c * group_len);
        for _ in 0..groups_before {
            for ch in 0..c {
                for _ in 0..group_len {
                    out.push(src[ch]);
                }
            }
        }
        self.push(Op::BcChannel { src: p, groups_before, group_len }, shape, out, false)
    }

    fn reduce_channel(&mut self, big: Val, groups_before: usize, group_len: usize, c: usize) -> Result<Val> {
        let mut out = vec![0.0; c];
        let data = &self.nodes[big.0].data;
        debug_assert_eq!(data.len(), groups_before * c * group_len);
        let mut idx = 0;
        for _ in 0..groups_before {
            for ch in out.iter_mut() {
                for _ in 0..group_len {
                    *ch += data[idx];
                    idx += 1;
                }
            }
        }
        self.push(Op::ReduceChannel { src: big, groups_before, group_len }, vec![c], out, false)
    }

    pub fn gather(&mut self, a: Val, indices: &[usize]) -> Result<Val> {
        let len = self.nodes[a.0].data.len();
        for &i in indices {
            if i >= len {
                return Err(Error::Contract(format!("gather index {i} out of range {len}")));
            }
        }
        let idx = Rc::new(indices.to_vec());
        let data: Vec<f64> = idx.iter().map(|&i| self.nodes[a.0].data[i]).collect();
        self.push(Op::Gather(a, idx.clone()), vec![idx.len()], data, false)
    }

    fn scatter(&mut self, a: Val, idx: Rc<Vec<usize>>, len: usize) -> Result<Val> {
        let mut data = vec![0.0; len];
        for (pos, &i) in idx.iter().enumerate() {
            data[i] += self.nodes[a.0].data[pos];
        }
        self.push(Op::Scatter(a, idx), vec![len], data, false)
    }

    pub fn reshape(&mut self, a: Val, shape: &[usize]) -> Result<Val> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.nodes[a.0].shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        self.push(Op::Reshape(a), shape.to_vec(), data, false)
    }

    pub fn concat_flat(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_flat of zero tensors".into()));
        }
        let total: usize = parts.iter().map(|v| self.nodes[v.0].data.len()).sum();
        let mut data = Vec::with_capacity(total);
        for v in parts {
            data.extend_from_slice(&self.nodes[v.0].data);
        }
        self.push(Op::ConcatFlat(Rc::new(parts.to_vec())), vec![total], data, false)
    }

    fn slice_flat(&mut self, a: Val, offset: usize, len: usize) -> Result<Val> {
        let data = self.nodes[a.0].data[offset..offset + len].to_vec();
        self.push(Op::SliceFlat(a, offset), vec![len], data, false)
    }

    fn place_flat(&mut self, a: Val, offset: usize, total: usize) -> Result<Val> {
        let mut data = vec![0.0; total];
        data[offset..offset + self.nodes[a.0].data.len()].copy_from_slice(&self.nodes[a.0].data);
        self.push(Op::PlaceFlat(a, offset), vec![total], data, false)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul_nt(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = self.rows_cols("matmul_nt", a)?;
        let (n, k2) = self.rows_cols("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                detail: format!("inner axes differ: lhs axis 1 = {k}, rhs axis 1 = {k2}"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        self.push(Op::MatmulNT(a, b), vec![m, n], out, false)
    }

    pub fn matmul_nn(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = self.rows_cols("matmul_nn", a)?;
        let (k2, n) = self.rows_cols("matmul_nn", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nn",
                detail: format!("inner axes differ: lhs axis 1 = {k}, rhs axis 0 = {k2}"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        self.push(Op::MatmulNN(a, b), vec![m, n], out, false)
    }

    pub fn matmul_tn(&mut self, a: Val, b: Val) -> Result<Val> {
        let (k, m) = self.rows_cols("matmul_tn", a)?;
        let (k2, n) = self.rows_cols("matmul_tn", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_tn",
                detail: format!("inner axes differ: lhs axis 0 = {k}, rhs axis 0 = {k2}"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_tn(&self.nodes[a.0].data, &self.nodes[b.0].data, k, m, n, &mut out);
        self.push(Op::MatmulTN(a, b), vec![m, n], out, false)
    }

    /// x[N,F] * w[O,F]^T (+ b[O] broadcast over rows).
    pub fn linear(&mut self, x: Val, w: Val, b: Option<Val>) -> Result<Val> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(bias) => {
                let rows = self.nodes[y.0].shape[0];
                let bb = self.broadcast_rows(bias, rows)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }

    // ── Convolution / pooling ───────────────────────────────────────

    pub fn conv2d(&mut self, x: Val, k: Val, stride: usize, pad: usize) -> Result<Val> {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[k.0].shape.clone();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("input and kernel must be rank 4, got {xs:?} and {ks:?}"),
            });
        }
        if xs[1] != ks[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("channel mismatch: input axis 1 = {}, kernel axis 1 = {}", xs[1], ks[1]),
            });
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        let h_span = (h + 2 * pad).checked_sub(kh).ok_or_else(|| Error::Dimension {
            op: "conv2d",
            detail: format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
        })?;
        let w_span = (w + 2 * pad).checked_sub(kw).ok_or_else(|| Error::Dimension {
            op: "conv2d",
            detail: format!("kernel width {kw} exceeds padded input width {}", w + 2 * pad),
        })?;
        if h_span % stride != 0 || w_span % stride != 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!(
                    "output size not integral: (H + 2*pad - kH) = {h_span}, (W + 2*pad - kW) = {w_span}, stride = {stride}"
                ),
            });
        }
        let d = ConvDims {
            n: xs[0],
            c_in: xs[1],
            h,
            w,
            k_out: ks[0],
            kh,
            kw,
            stride,
            pad,
            h_out: h_span / stride + 1,
            w_out: w_span / stride + 1,
        };
        let mut out = vec![0.0; d.y_len()];
        kernels::conv2d_forward(&self.nodes[x.0].data, &self.nodes[k.0].data, &d, &mut out);
        self.push(Op::Conv2d { x, k, d }, vec![d.n, d.k_out, d.h_out, d.w_out], out, false)
    }

    fn conv_gx(&mut self, g: Val, k: Val, d: ConvDims) -> Result<Val> {
        let mut out = vec![0.0; d.x_len()];
        kernels::conv2d_grad_input(&self.nodes[g.0].data, &self.nodes[k.0].data, &d, &mut out);
        self.push(Op::ConvGx { g, k, d }, vec![d.n, d.c_in, d.h, d.w], out, false)
    }

    fn conv_gk(&mut self, x: Val, g: Val, d: ConvDims) -> Result<Val> {
        let mut out = vec![0.0; d.k_len()];
        kernels::conv2d_grad_kernel(&self.nodes[x.0].data, &self.nodes[g.0].data, &d, &mut out);
        self.push(Op::ConvGk { x, g, d }, vec![d.k_out, d.c_in, d.kh, d.kw], out, false)
    }

    /// Non-overlapping k*k average pooling over [N,C,H,W] or [C,H,W].
    pub fn avgpool2d(&mut self, x: Val, k: usize) -> Result<Val> {
        let sh = self.nodes[x.0].shape.clone();
        let (n, c, h, w, rank3) = match sh.len() {
            4 => (sh[0], sh[1], sh[2], sh[3], false),
            3 => (1, sh[0], sh[1], sh[2], true),
            _ => {
                return Err(Error::Dimension {
                    op: "avgpool2d",
                    detail: format!("expected rank 3 or 4, got {sh:?}"),
                })
            }
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Dimension {
                op: "avgpool2d",
                detail: format!("spatial dims {h}x{w} not divisible by pool size {k}"),
            });
        }
        let mut out = vec![0.0; n * c * (h / k) * (w / k)];
        kernels::avgpool_forward(&self.nodes[x.0].data, n, c, h, w, k, &mut out);
        let shape = if rank3 {
            vec![c, h / k, w / k]
        } else {
            vec![n, c, h / k, w / k]
        };
        self.push(Op::AvgPool { x, n, c, h, w, k }, shape, out, false)
    }

    fn avgpool_back(&mut self, g: Val, n: usize, c: usize, h: usize, w: usize, k: usize, shape: Vec<usize>) -> Result<Val> {
        let mut out = vec![0.0; n * c * h * w];
        kernels::avgpool_backward(&self.nodes[g.0].data, n, c, h, w, k, &mut out);
        self.push(Op::AvgPoolBack { g, n, c, h, w, k }, shape, out, false)
    }

    // ── Composite layers ────────────────────────────────────────────

    /// Inference-mode batch normalization with stored statistics.
    /// Differentiable in x, mean, var, gamma and beta; `eps` is a constant.
    pub fn batchnorm_inference(
        &mut self,
        x: Val,
        mean: Val,
        var: Val,
        gamma: Val,
        beta: Val,
        eps: f64,
    ) -> Result<Val> {
        let c = {
            let sh = &self.nodes[mean.0].shape;
            if sh.len() != 1 {
                return Err(Error::Dimension {
                    op: "batchnorm_inference",
                    detail: format!("statistics must be rank 1, got {sh:?}"),
                });
            }
            sh[0]
        };
        for (name, v) in [("var", var), ("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape != [c] {
                return Err(Error::Dimension {
                    op: "batchnorm_inference",
                    detail: format!("{name} shape {:?} != [{c}]", self.nodes[v.0].shape),
                });
            }
        }
        channel_layout("batchnorm_inference", self.shape_of(x), c)?;
        let var_eps = self.add_scalar(var, eps)?;
        let denom = self.sqrt(var_eps)?;
        let mean_b = self.bc_channel_like(mean, x)?;
        let denom_b = self.bc_channel_like(denom, x)?;
        let gamma_b = self.bc_channel_like(gamma, x)?;
        let beta_b = self.bc_channel_like(beta, x)?;
        let centered = self.sub(x, mean_b)?;
        let normed = self.div(centered, denom_b)?;
        let scaled = self.mul(normed, gamma_b)?;
        self.add(scaled, beta_b)
    }

    // ── Losses and objectives ───────────────────────────────────────

    /// -log softmax(logits)[label]; logits must be a flat [C] vector.
    pub fn cross_entropy(&mut self, logits: Val, label: usize) -> Result<Val> {
        let c = flat_len("cross_entropy", self.shape_of(logits))?;
        if label >= c {
            return Err(Error::Contract(format!("label {label} out of range for {c} classes")));
        }
        let max = self.nodes[logits.0].data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_scalar(logits, -max)?;
        let e = self.exp(shifted)?;
        let s = self.sum(e)?;
        let ln_s = self.ln(s)?;
        let lse = self.add_scalar(ln_s, max)?;
        let picked = self.gather(logits, &[label])?;
        self.sub(lse, picked)
    }

    /// Multi-hot binary cross-entropy with logits, summed over classes.
    pub fn multi_hot_bce(&mut self, logits: Val, label_set: &[usize]) -> Result<Val> {
        let c = flat_len("multi_hot_bce", self.shape_of(logits))?;
        let mut mask = vec![0.0; c];
        for &l in label_set {
            if l >= c {
                return Err(Error::Contract(format!("label {l} out of range for {c} classes")));
            }
            mask[l] = 1.0;
        }
        let sp = self.softplus(logits)?;
        let sp_sum = self.sum(sp)?;
        let tz = self.mul_mask(logits, Rc::new(mask))?;
        let tz_sum = self.sum(tz)?;
        self.sub(sp_sum, tz_sum)
    }

    /// <a,b> / (|a| |b|) for flat vectors; errors on a zero-norm argument.
    ///
    /// Dedicated primitive: the value is dot/sqrt(|a|^2 |b|^2) and the
    /// adjoint uses the rearranged form b/(|a||b|) - cos * a/|a|^2, whose two
    /// coefficients coincide bit-for-bit when a == b — so the gradient at
    /// exactly-matching gradients is exactly zero and a reconstruction
    /// sitting at the truth stays there.
    pub fn cosine_similarity(&mut self, a: Val, b: Val) -> Result<Val> {
        let la = flat_len("cosine_similarity", self.shape_of(a))?;
        let lb = flat_len("cosine_similarity", self.shape_of(b))?;
        if la != lb {
            return Err(Error::Dimension {
                op: "cosine_similarity",
                detail: format!("lengths differ: {la} vs {lb}"),
            });
        }
        let na2: f64 = self.nodes[a.0].data.iter().map(|v| v * v).sum();
        let nb2: f64 = self.nodes[b.0].data.iter().map(|v| v * v).sum();
        if na2 == 0.0 || nb2 == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "cosine_similarity requires nonzero norms (|a|^2 = {na2}, |b|^2 = {nb2})"
            )));
        }
        let dot: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .sum();
        let value = dot / (na2 * nb2).sqrt();
        self.push(Op::Cosine(a, b), vec![1], vec![value], false)
    }

    pub fn dot(&mut self, a: Val, b: Val) -> Result<Val> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn sum_sq(&mut self, a: Val) -> Result<Val> {
        let p = self.mul(a, a)?;
        self.sum(p)
    }

    /// Anisotropic L1 total variation over [H,W] or [C,H,W].
    pub fn tv_l1(&mut self, x: Val) -> Result<Val> {
        let sh = self.nodes[x.0].shape.clone();
        let (c, h, w) = match sh.len() {
            2 => (1, sh[0], sh[1]),
            3 => (sh[0], sh[1], sh[2]),
            _ => {
                return Err(Error::Dimension {
                    op: "tv_l1",
                    detail: format!("expected rank 2 or 3, got {sh:?}"),
                })
            }
        };
        let data = &self.nodes[x.0].data;
        let mut total = 0.0;
        let mut coef = vec![0.0; data.len()];
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..h {
                for j in 0..w {
                    let cur = base + i * w + j;
                    if i + 1 < h {
                        let nxt = base + (i + 1) * w + j;
                        let d = data[nxt] - data[cur];
                        total += d.abs();
                        let sg = sign(d);
                        coef[nxt] += sg;
                        coef[cur] -= sg;
                    }
                    if j + 1 < w {
                        let nxt = cur + 1;
                        let d = data[nxt] - data[cur];
                        total += d.abs();
                        let sg = sign(d);
                        coef[nxt] += sg;
                        coef[cur] -= sg;
                    }
                }
            }
        }
        self.push(Op::TvL1 { x, coef: Rc::new(coef) }, vec![1], vec![total], false)
    }

    // ── Differentiation ─────────────────────────────────────────────

    /// Append the gradient graph of the scalar `out` with respect to `wrt`,
    /// returning one gradient node per requested value (zeros if unreached).
    pub fn grads_graph(&mut self, out: Val, wrt: &[Val]) -> Result<Vec<Val>> {
        if self.nodes[out.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output; got shape {:?}",
                self.nodes[out.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut influenced = vec![false; n];
        for w in wrt {
            influenced[w.0] = true;
        }
        for id in 0..n {
            if !influenced[id] && self.op_inputs(id).iter().any(|v| influenced[v.0]) {
                influenced[id] = true;
            }
        }
        let mut grads: Vec<Option<Val>> = vec![None; n];
        if influenced[out.0] {
            grads[out.0] = Some(self.scalar(1.0)?);
        }
        let was_adjoint = self.in_adjoint;
        self.in_adjoint = true;
        let mut walk = || -> Result<()> {
            for id in (0..=out.0).rev() {
                let Some(g) = grads[id] else { continue };
                if !influenced[id] {
                    continue;
                }
                let contribs = self.vjp(id, g)?;
                for (input, contrib) in contribs {
                    if !influenced[input.0] {
                        continue;
                    }
                    grads[input.0] = Some(match grads[input.0] {
                        Some(existing) => self.add(existing, contrib)?,
                        None => contrib,
                    });
                }
            }
            Ok(())
        };
        let walked = walk();
        self.in_adjoint = was_adjoint;
        walked?;
        let mut result = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads[w.0] {
                Some(g) => {
                    check_finite("grads_graph", &self.nodes[g.0].data)?;
                    result.push(g);
                }
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    let numel = self.nodes[w.0].data.len();
                    result.push(self.const_from(&shape, vec![0.0; numel])?);
                }
            }
        }
        Ok(result)
    }

    /// Numeric backward: assigns gradients for every `requires_grad` leaf.
    pub fn backward(&mut self, out: Val) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed by backward; call reset() to run it again".into(),
            ));
        }
        let leaves: Vec<Val> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_grad_leaf)
            .map(Val)
            .collect();
        let grads = self.grads_graph(out, &leaves)?;
        self.leaf_grads = leaves.iter().map(|v| v.0).zip(grads).collect();
        self.consumed = true;
        Ok(())
    }

    /// Allow another backward pass over this tape.
    pub fn reset(&mut self) {
        self.consumed = false;
        self.leaf_grads.clear();
    }

    /// Gradient of the last `backward` output w.r.t. the given leaf.
    pub fn grad(&self, leaf: Val) -> Option<Tensor> {
        self.leaf_grads
            .iter()
            .find(|(id, _)| *id == leaf.0)
            .map(|(_, g)| self.tensor_of(*g))
    }

    /// Add the leaf's gradient into the tensor's grad slot.
    pub fn accumulate_grad_into(&self, leaf: Val, target: &mut Tensor) -> Result<()> {
        let g = self.grad(leaf).ok_or_else(|| {
            Error::Contract("no gradient recorded for leaf; run backward first".into())
        })?;
        if g.shape() != target.shape() {
            return Err(Error::Dimension {
                op: "accumulate_grad_into",
                detail: format!("grad shape {:?} vs tensor {:?}", g.shape(), target.shape()),
            });
        }
        target.accumulate_grad(g.data());
        Ok(())
    }

    fn op_inputs(&self, id: usize) -> Vec<Val> {
        match &self.nodes[id].op {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatmulNT(a, b)
            | Op::MatmulNN(a, b)
            | Op::MatmulTN(a, b) => vec![*a, *b],
            Op::Cosine(a, b) => vec![*a, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ConvGx { g, k, .. } => vec![*g, *k],
            Op::ConvGk { x, g, .. } => vec![*x, *g],
            Op::AvgPool { x, .. } => vec![*x],
            Op::AvgPoolBack { g, .. } => vec![*g],
            Op::TvL1 { x, .. } => vec![*x],
            Op::ConcatFlat(vs) => vs.as_ref().clone(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::MulMask(a, _)
            | Op::Sum(a)
            | Op::BroadcastTo(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::BroadcastRows(a)
            | Op::BcChannel { src: a, .. }
            | Op::ReduceChannel { src: a, .. }
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::Reshape(a)
            | Op::SliceFlat(a, _)
            | Op::PlaceFlat(a, _) => vec![*a],
        }
    }

    /// Build adjoint contributions of node `id` given upstream gradient `g`.
    fn vjp(&mut self, id: usize, g: Val) -> Result<Vec<(Val, Val)>> {
        let out = Val(id);
        let op = self.nodes[id].op.clone();
        let mut sink = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                sink.push((a, g));
                sink.push((b, g));
            }
            Op::Sub(a, b) => {
                sink.push((a, g));
                let ng = self.neg(g)?;
                sink.push((b, ng));
            }
            Op::Mul(a, b) => {
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                sink.push((a, ga));
                sink.push((b, gb));
            }
            Op::Div(a, b) => {
                let ga = self.div(g, b)?;
                sink.push((a, ga));
                // d(a/b)/db = -(a/b)/b
                let go = self.mul(g, out)?;
                let gob = self.div(go, b)?;
                let gb = self.neg(gob)?;
                sink.push((b, gb));
            }
            Op::Neg(a) => {
                let ga = self.neg(g)?;
                sink.push((a, ga));
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, c)?;
                sink.push((a, ga));
            }
            Op::AddScalar(a) => sink.push((a, g)),
            Op::Exp(a) => {
                let ga = self.mul(g, out)?;
                sink.push((a, ga));
            }
            Op::Ln(a) => {
                let ga = self.div(g, a)?;
                sink.push((a, ga));
            }
            Op::Sqrt(a) => {
                let gy = self.div(g, out)?;
                let ga = self.scale(gy, 0.5)?;
                sink.push((a, ga));
            }
            Op::Sigmoid(a) => {
                // y' = y (1 - y)
                let ny = self.neg(out)?;
                let one_m = self.add_scalar(ny, 1.0)?;
                let gy = self.mul(g, out)?;
                let ga = self.mul(gy, one_m)?;
                sink.push((a, ga));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                let ga = self.mul(g, s)?;
                sink.push((a, ga));
            }
            Op::Relu(a) => {
                let mask: Vec<f64> =
                    self.nodes[a.0].data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let ga = self.mul_mask(g, Rc::new(mask))?;
                sink.push((a, ga));
            }
            Op::Abs(a) => {
                let mask: Vec<f64> = self.nodes[a.0].data.iter().map(|&v| sign(v)).collect();
                let ga = self.mul_mask(g, Rc::new(mask))?;
                sink.push((a, ga));
            }
            Op::MulMask(a, mask) => {
                let ga = self.mul_mask(g, mask)?;
                sink.push((a, ga));
            }
            Op::Sum(a) => {
                let shape = self.nodes[a.0].shape.clone();
                let ga = self.broadcast_to(g, &shape)?;
                sink.push((a, ga));
            }
            Op::BroadcastTo(a) => {
                let ga = self.sum(g)?;
                sink.push((a, ga));
            }
            Op::SumRows(a) => {
                let rows = self.nodes[a.0].shape[0];
                let ga = self.broadcast_rows(g, rows)?;
                sink.push((a, ga));
            }
            Op::MeanRows(a) => {
                let rows = self.nodes[a.0].shape[0];
                let gb = self.broadcast_rows(g, rows)?;
                let ga = self.scale(gb, 1.0 / rows as f64)?;
                sink.push((a, ga));
            }
            Op::BroadcastRows(a) => {
                let ga = self.sum_rows(g)?;
                sink.push((a, ga));
            }
            Op::BcChannel { src, groups_before, group_len } => {
                let c = self.nodes[src.0].shape[0];
                let ga = self.reduce_channel(g, groups_before, group_len, c)?;
                sink.push((src, ga));
            }
            Op::ReduceChannel { src, groups_before, group_len } => {
                let shape = self.nodes[src.0].shape.clone();
                let c = self.nodes[id].shape[0];
                let src_data = &self.nodes[g.0].data;
                debug_assert_eq!(src_data.len(), c);
                let mut out_data = Vec::with_capacity(groups_before * c * group_len);
                for _ in 0..groups_before {
                    for ch in 0..c {
                        for _ in 0..group_len {
                            out_data.push(src_data[ch]);
                        }
                    }
                }
                let ga = self.push(
                    Op::BcChannel { src: g, groups_before, group_len },
                    shape,
                    out_data,
                    false,
                )?;
                sink.push((src, ga));
            }
            Op::Gather(a, idx) => {
                let len = self.nodes[a.0].data.len();
                let ga = self.scatter(g, idx, len)?;
                sink.push((a, ga));
            }
            Op::Scatter(a, idx) => {
                let ga = self.gather(g, &idx)?;
                sink.push((a, ga));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].shape.clone();
                let ga = self.reshape(g, &shape)?;
                sink.push((a, ga));
            }
            Op::ConcatFlat(parts) => {
                let mut offset = 0;
                for v in parts.iter() {
                    let len = self.nodes[v.0].data.len();
                    let gv = self.slice_flat(g, offset, len)?;
                    sink.push((*v, gv));
                    offset += len;
                }
            }
            Op::SliceFlat(a, offset) => {
                let total = self.nodes[a.0].data.len();
                let ga = self.place_flat(g, offset, total)?;
                sink.push((a, ga));
            }
            Op::PlaceFlat(a, offset) => {
                let len = self.nodes[a.0].data.len();
                let ga = self.slice_flat(g, offset, len)?;
                sink.push((a, ga));
            }
            Op::MatmulNT(a, b) => {
                let ga = self.matmul_nn(g, b)?;
                let gb = self.matmul_tn(g, a)?;
                sink.push((a, ga));
                sink.push((b, gb));
            }
            Op::MatmulNN(a, b) => {
                let ga = self.matmul_nt(g, b)?;
                let gb = self.matmul_tn(a, g)?;
                sink.push((a, ga));
                sink.push((b, gb));
            }
            Op::MatmulTN(a, b) => {
                let ga = self.matmul_nt(b, g)?;
                let gb = self.matmul_nn(a, g)?;
                sink.push((a, ga));
                sink.push((b, gb));
            }
            Op::Cosine(a, b) => {
                // d cos / d a = b/(|a||b|) - cos * a/|a|^2 (and symmetrically
                // for b). Both coefficients are built over the same
                // denominators so they cancel exactly when a == b.
                let shape = self.nodes[a.0].shape.clone();
                let aa = self.mul(a, a)?;
                let na2 = self.sum(aa)?;
                let bb = self.mul(b, b)?;
                let nb2 = self.sum(bb)?;
                let prod = self.mul(na2, nb2)?;
                let denom = self.sqrt(prod)?;
                let c1 = self.div(g, denom)?;
                let u_cos = self.mul(g, out)?;
                let bc1 = self.broadcast_to(c1, &shape)?;
                let c2a = self.div(u_cos, na2)?;
                let bc2a = self.broadcast_to(c2a, &shape)?;
                let t1a = self.mul(bc1, b)?;
                let t2a = self.mul(bc2a, a)?;
                let ga = self.sub(t1a, t2a)?;
                sink.push((a, ga));
                let c2b = self.div(u_cos, nb2)?;
                let bc2b = self.broadcast_to(c2b, &shape)?;
                let t1b = self.mul(bc1, a)?;
                let t2b = self.mul(bc2b, b)?;
                let gb = self.sub(t1b, t2b)?;
                sink.push((b, gb));
            }
            Op::Conv2d { x, k, d } => {
                let gx = self.conv_gx(g, k, d)?;
                let gk = self.conv_gk(x, g, d)?;
                sink.push((x, gx));
                sink.push((k, gk));
            }
            Op::ConvGx { g: g0, k, d } => {
                // out = conv_gx(g0, k); upstream u is x-shaped.
                let gg = self.conv_fwd_raw(g, k, d)?;
                let gk = self.conv_gk(g, g0, d)?;
                sink.push((g0, gg));
                sink.push((k, gk));
            }
            Op::ConvGk { x, g: g0, d } => {
                // out = conv_gk(x, g0); upstream u is kernel-shaped.
                let gx = self.conv_gx(g0, g, d)?;
                let gg = self.conv_fwd_raw(x, g, d)?;
                sink.push((x, gx));
                sink.push((g0, gg));
            }
            Op::AvgPool { x, n, c, h, w, k } => {
                let shape = self.nodes[x.0].shape.clone();
                let ga = self.avgpool_back(g, n, c, h, w, k, shape)?;
                sink.push((x, ga));
            }
            Op::AvgPoolBack { g: g0, n, c, h, w, k } => {
                let shape = self.nodes[g0.0].shape.clone();
                let mut out = vec![0.0; n * c * (h / k) * (w / k)];
                kernels::avgpool_forward(&self.nodes[g.0].data, n, c, h, w, k, &mut out);
                let ga = self.push(Op::AvgPool { x: g, n, c, h, w, k }, shape, out, false)?;
                sink.push((g0, ga));
            }
            Op::TvL1 { x, coef } => {
                let shape = self.nodes[x.0].shape.clone();
                let gb = self.broadcast_to(g, &shape)?;
                let ga = self.mul_mask(gb, coef)?;
                sink.push((x, ga));
            }
        }
        Ok(sink)
    }

    /// Forward convolution used inside adjoints, with explicit dims.
    fn conv_fwd_raw(&mut self, x: Val, k: Val, d: ConvDims) -> Result<Val> {
        let mut out = vec![0.0; d.y_len()];
        kernels::conv2d_forward(&self.nodes[x.0].data, &self.nodes[k.0].data, &d, &mut out);
        self.push(Op::Conv2d { x, k, d }, vec![d.n, d.k_out, d.h_out, d.w_out], out, false)
    }
}

/// d(objective)/d(pixels) where the objective may itself be built from
/// gradient nodes (see [`Tape::grads_graph`]).
pub fn grad_of_grads<F>(pixels: &Tensor, build: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Val) -> Result<Val>,
{
    let mut tape = Tape::new();
    let mut p = pixels.clone();
    p.requires_grad = true;
    let x = tape.leaf(&p)?;
    let objective = build(&mut tape, x)?;
    tape.backward(objective)?;
    Ok(tape.grad(x).expect("pixel leaf always receives a gradient"))
}

fn flat_len(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.len() != 1 {
        return Err(Error::Dimension { op, detail: format!("expected a flat vector, got {shape:?}") });
    }
    Ok(shape[0])
}

fn channel_layout(op: &'static str, shape: &[usize], c: usize) -> Result<(usize, usize)> {
    match shape.len() {
        1 if shape[0] == c => Ok((1, 1)),
        // [rows, C]: per-column statistics applied to every row.
        2 if shape[1] == c => Ok((shape[0], 1)),
        3 if shape[0] == c => Ok((1, shape[1] * shape[2])),
        4 if shape[1] == c => Ok((shape[0], shape[2] * shape[3])),
        _ => Err(Error::Dimension {
            op,
            detail: format!("cannot align {c} channels with shape {shape:?}"),
        }),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Const => "constant",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::Relu(..) => "relu",
        Op::Abs(..) => "abs",
        Op::MulMask(..) => "mul_mask",
        Op::Sum(..) => "sum",
        Op::BroadcastTo(..) => "broadcast_to",
        Op::SumRows(..) => "sum_rows",
        Op::MeanRows(..) => "mean_rows",
        Op::BroadcastRows(..) => "broadcast_rows",
        Op::BcChannel { .. } => "bc_channel",
        Op::ReduceChannel { .. } => "reduce_channel",
        Op::Gather(..) => "gather",
        Op::Scatter(..) => "scatter",
        Op::Reshape(..) => "reshape",
        Op::ConcatFlat(..) => "concat_flat",
        Op::SliceFlat(..) => "slice_flat",
        Op::PlaceFlat(..) => "place_flat",
        Op::MatmulNT(..) => "matmul_nt",
        Op::MatmulNN(..) => "matmul_nn",
        Op::MatmulTN(..) => "matmul_tn",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvGx { .. } => "conv2d_grad_input",
        Op::ConvGk { .. } => "conv2d_grad_kernel",
        Op::AvgPool { .. } => "avgpool2d",
        Op::AvgPoolBack { .. } => "avgpool2d_back",
        Op::TvL1 { .. } => "total_variation",
        Op::Cosine(..) => "cosine_similarity",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_kernel_conv_scales_input() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let k = tape.constant(&t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_on_zero_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let k = tape.constant(&t(&[3, 2, 3, 3], &vec![0.7; 54])).unwrap();
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let k = tape.constant(&Tensor::zeros(&[3, 3, 3, 3])).unwrap();
        let err = tape.conv2d(x, k, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 1"), "{msg}");
    }

    #[test]
    fn relu_matches_reference() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn avgpool_of_constant_is_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 1, 4, 4], 0.37)).unwrap();
        let y = tape.avgpool2d(x, 2).unwrap();
        assert_eq!(tape.shape_of(y), &[1, 1, 2, 2]);
        for v in tape.value(y) {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_identity_stats_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 2, 2], &[0.1, -0.5, 2.0, 3.0, -1.0, 0.0, 4.0, 0.25])).unwrap();
        let mean = tape.constant(&Tensor::zeros(&[2])).unwrap();
        let var = tape.constant(&Tensor::full(&[2], 1.0)).unwrap();
        let gamma = tape.constant(&Tensor::full(&[2], 1.0)).unwrap();
        let beta = tape.constant(&Tensor::zeros(&[2])).unwrap();
        let y = tape.batchnorm_inference(x, mean, var, gamma, beta, 0.0).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_self_is_one_and_orthogonal_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[3], &[0.3, -1.2, 0.7])).unwrap();
        let c = tape.cosine_similarity(a, a).unwrap();
        assert!((tape.item(c) - 1.0).abs() < 1e-12);

        let e1 = tape.constant(&t(&[2], &[1.0, 0.0])).unwrap();
        let e2 = tape.constant(&t(&[2], &[0.0, 1.0])).unwrap();
        let z = tape.cosine_similarity(e1, e2).unwrap();
        assert_eq!(tape.item(z), 0.0);
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2], &[0.0, 0.0])).unwrap();
        let b = tape.constant(&t(&[2], &[1.0, 0.0])).unwrap();
        match tape.cosine_similarity(a, b) {
            Err(Error::DegenerateInput(_)) => {}
            other => panic!("expected degenerate-input error, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.5, -2.0, 3.0, 1.0, 0.0, -0.25]).with_grad()).unwrap();
        let r = tape.reshape(x, &[6]).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_dot_gives_other_argument() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]).with_grad()).unwrap();
        let x = tape.constant(&t(&[3], &[1.5, -2.0, 4.0])).unwrap();
        let d = tape.dot(w, x).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.5, -2.0, 4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad()).unwrap();
        match tape.backward(x) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn tape_is_consumed_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[2.0]).with_grad()).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
        tape.reset();
        tape.backward(y).unwrap();
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_grad()).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .leaf(&t(&[2, 2], &[0.3, -0.8, 1.7, 0.05]).with_grad())
                .unwrap();
            let e = tape.exp(x).unwrap();
            let s = tape.sigmoid(e).unwrap();
            let tot = tape.sum(s).unwrap();
            tape.backward(tot).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn nan_production_is_caught() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[1], &[0.0])).unwrap();
        match tape.div(a, a) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn tv_of_closed_form_example() {
        // [[0,1],[0,1]]: two horizontal jumps, no vertical.
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0])).unwrap();
        let tv = tape.tv_l1(x).unwrap();
        assert_eq!(tape.item(tv), 2.0);
    }

    #[test]
    fn grad_of_grads_zero_when_objective_ignores_pixels() {
        let pixels = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let g = grad_of_grads(&pixels, |tape, _x| {
            let c = tape.constant(&t(&[2], &[3.0, 4.0]))?;
            tape.sum_sq(c)
        })
        .unwrap();
        assert_eq!(g.data(), &[0.0; 4]);
    }
}

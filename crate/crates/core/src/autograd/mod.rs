//! Minimal dense-tensor reverse-mode differentiation.
//!
//! Operations record onto a linear tape; recorded order is a valid
//! topological order, so the backward pass is a single reverse sweep.
//! Each backward rule accumulates (never overwrites) into its parents'
//! gradient buffers. Gradients are retained on leaves only; repeated
//! `backward` calls keep accumulating into leaf grads until reset.
//!
//! Conventions:
//! - everything is `f64`; accumulation order is fixed left-to-right, so
//!   forward results are bitwise deterministic for identical inputs;
//! - `conv2d` is cross-correlation (kernels are not flipped);
//! - `sigmoid` clamps its output into `[PROB_EPS, 1 - PROB_EPS]` so that
//!   probabilities can always be passed to `log` after clamping;
//! - broadcasting is limited to scalar-vs-tensor for the elementwise ops.
//!
//! A tape is single-writer and confined to one thread of execution.

pub mod gradcheck;
mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BiasAdd {
        x: usize,
        bias: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Sum {
        x: usize,
        axes: Option<Vec<usize>>,
    },
    Mean {
        x: usize,
        axes: Option<Vec<usize>>,
    },
    Reshape(usize),
    Transpose(usize),
    Resize {
        x: usize,
        up: bool,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape. Cloning shares the underlying node storage.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to one tensor on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Record a leaf that does not need a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Record a leaf whose gradient will be populated by `backward`.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }
}

fn elementwise_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

/// Validate reduction axes; returns them sorted.
fn check_axes(rank: usize, axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::InvalidInput("reduction axes are empty".into()));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::InvalidInput(format!("duplicate axis {}", pair[0])));
        }
    }
    if let Some(&bad) = sorted.iter().find(|&&a| a >= rank) {
        return Err(Error::InvalidInput(format!(
            "axis {bad} out of range for rank {rank}"
        )));
    }
    Ok(sorted)
}

/// Shape after removing `axes` (sorted); all-removed collapses to `[1]`.
fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if kept.is_empty() {
        vec![1]
    } else {
        kept
    }
}

/// Map each input flat index to its output flat index under an axes-reduction.
fn reduction_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    let mut kept_strides = vec![0usize; rank];
    let mut stride = 1;
    for &i in kept.iter().rev() {
        kept_strides[i] = stride;
        stride *= shape[i];
    }
    let mut map = vec![0usize; numel];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in map.iter_mut().enumerate() {
        let mut rem = flat;
        for i in (0..rank).rev() {
            coords[i] = rem % shape[i];
            rem /= shape[i];
        }
        *slot = (0..rank).map(|i| coords[i] * kept_strides[i]).sum();
    }
    map
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this variable is recorded on.
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar payload; panics in debug builds if not scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Accumulated gradient of a leaf (populated by `backward`).
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clear the accumulated gradient of this leaf.
    pub fn zero_grad(&self) {
        self.tape.nodes.borrow_mut()[self.id].grad = None;
    }

    fn check_same_tape(&self, other: &Var, op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{op}: operands on different tapes")))
        }
    }

    fn binary(
        &self,
        other: &Var,
        op_name: &'static str,
        make: impl Fn(usize, usize) -> Op,
        eval: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check_same_tape(other, op_name)?;
        let (va, vb) = (self.value(), other.value());
        let shape = elementwise_shapes(op_name, &va, &vb)?;
        let numel: usize = shape.iter().product();
        let a = va.data();
        let b = vb.data();
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                let x = if va.is_scalar() { a[0] } else { a[i] };
                let y = if vb.is_scalar() { b[0] } else { b[i] };
                eval(x, y)
            })
            .collect();
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, rg, make(self.id, other.id)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    /// Multiply by a plain scalar constant.
    pub fn scale(&self, c: f64) -> Var {
        let value = self.value().map(|v| v * c);
        let rg = self.tape.requires(self.id);
        self.tape.push(value, rg, Op::Scale(self.id, c))
    }

    /// Add a plain scalar constant.
    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value().map(|v| v + c);
        let rg = self.tape.requires(self.id);
        self.tape.push(value, rg, Op::AddScalar(self.id))
    }

    /// `1 - x`, the complement used by binary cross-entropy.
    pub fn one_minus(&self) -> Var {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_same_tape(other, "matmul")?;
        let (va, vb) = (self.value(), other.value());
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(m, k, n, va.data(), vb.data());
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        Ok(self
            .tape
            .push(Tensor::new(vec![m, n], data)?, rg, Op::Matmul(self.id, other.id)))
    }

    /// 2-D cross-correlation over a `[c_in, h, w]` input with a
    /// `[c_out, c_in, kh, kw]` kernel (kh, kw odd).
    pub fn conv2d(&self, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_same_tape(kernel, "conv2d")?;
        let (vx, vk) = (self.value(), kernel.value());
        let (sx, sk) = (vx.shape().to_vec(), vk.shape().to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "conv2d kernel extents must be odd, got {}x{}",
                sk[2], sk[3]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("conv2d stride must be >= 1".into()));
        }
        let (h, w, kh, kw) = (sx[1], sx[2], sk[2], sk[3]);
        let oh = (h + 2 * pad).checked_sub(kh).map(|v| v / stride + 1);
        let ow = (w + 2 * pad).checked_sub(kw).map(|v| v / stride + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "conv2d output size is non-positive for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                )))
            }
        };
        let dims = kernels::ConvDims {
            c_in: sx[0],
            h,
            w,
            c_out: sk[0],
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let data = kernels::conv2d_forward(&dims, vx.data(), vk.data());
        let rg = self.tape.requires(self.id) || self.tape.requires(kernel.id);
        Ok(self.tape.push(
            Tensor::new(vec![sk[0], oh, ow], data)?,
            rg,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
        ))
    }

    /// Add a per-channel bias `[c]` to a `[c, h, w]` volume.
    pub fn bias_add(&self, bias: &Var) -> Result<Var> {
        self.check_same_tape(bias, "bias_add")?;
        let (vx, vb) = (self.value(), bias.value());
        let (sx, sb) = (vx.shape().to_vec(), vb.shape().to_vec());
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: sx,
                rhs: sb,
            });
        }
        let hw = sx[1] * sx[2];
        let mut data = vx.data().to_vec();
        for c in 0..sx[0] {
            let bv = vb.data()[c];
            for v in &mut data[c * hw..(c + 1) * hw] {
                *v += bv;
            }
        }
        let rg = self.tape.requires(self.id) || self.tape.requires(bias.id);
        Ok(self.tape.push(
            Tensor::new(sx, data)?,
            rg,
            Op::BiasAdd {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    fn unary(&self, op: Op, eval: impl Fn(f64) -> f64) -> Var {
        let value = self.value().map(eval);
        let rg = self.tape.requires(self.id);
        self.tape.push(value, rg, op)
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu(self.id), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Logistic sigmoid with output clamped into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid(self.id), |v| {
            let s = 1.0 / (1.0 + (-v).exp());
            s.clamp(PROB_EPS, 1.0 - PROB_EPS)
        })
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log. Inputs must be strictly positive; callers clamp first.
    pub fn log(&self) -> Var {
        debug_assert!(
            self.value().data().iter().all(|&v| v > 0.0),
            "log of non-positive input; clamp first"
        );
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let v = self.value();
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidInput(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = kernels::softmax_forward(v.data(), outer, shape[axis], inner);
        let rg = self.tape.requires(self.id);
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Softmax { x: self.id, axis },
        ))
    }

    /// Sum of all elements (scalar result).
    pub fn sum(&self) -> Var {
        let total: f64 = self.value().data().iter().sum();
        let rg = self.tape.requires(self.id);
        self.tape.push(
            Tensor::scalar(total),
            rg,
            Op::Sum {
                x: self.id,
                axes: None,
            },
        )
    }

    /// Mean of all elements (scalar result).
    pub fn mean(&self) -> Var {
        let v = self.value();
        let total: f64 = v.data().iter().sum();
        let rg = self.tape.requires(self.id);
        self.tape.push(
            Tensor::scalar(total / v.len() as f64),
            rg,
            Op::Mean {
                x: self.id,
                axes: None,
            },
        )
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var> {
        let v = self.value();
        let axes = check_axes(v.shape().len(), axes)?;
        let out_shape = reduced_shape(v.shape(), &axes);
        let map = reduction_index_map(v.shape(), &axes);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (i, &x) in v.data().iter().enumerate() {
            data[map[i]] += x;
        }
        let rg = self.tape.requires(self.id);
        Ok(self.tape.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Sum {
                x: self.id,
                axes: Some(axes),
            },
        ))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var> {
        let v = self.value();
        let axes = check_axes(v.shape().len(), axes)?;
        let group: usize = axes.iter().map(|&a| v.shape()[a]).product();
        let out_shape = reduced_shape(v.shape(), &axes);
        let map = reduction_index_map(v.shape(), &axes);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (i, &x) in v.data().iter().enumerate() {
            data[map[i]] += x;
        }
        for d in &mut data {
            *d /= group as f64;
        }
        let rg = self.tape.requires(self.id);
        Ok(self.tape.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Mean {
                x: self.id,
                axes: Some(axes),
            },
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let v = self.value();
        let numel: usize = shape.iter().product();
        if numel != v.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let rg = self.tape.requires(self.id);
        Ok(self
            .tape
            .push(Tensor::new(shape, v.data().to_vec())?, rg, Op::Reshape(self.id)))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var> {
        let v = self.value();
        let s = v.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "transpose expects rank 2, got {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v.data()[i * n + j];
            }
        }
        let rg = self.tape.requires(self.id);
        Ok(self
            .tape
            .push(Tensor::new(vec![n, m], data)?, rg, Op::Transpose(self.id)))
    }

    /// Bilinear ×2 upsample of a `[c, h, w]` volume (align-corners-false).
    pub fn upsample2x(&self) -> Result<Var> {
        self.resize(true)
    }

    /// Bilinear ×0.5 downsample; height and width must be even.
    pub fn downsample2x(&self) -> Result<Var> {
        self.resize(false)
    }

    fn resize(&self, up: bool) -> Result<Var> {
        let v = self.value();
        let s = v.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "resize expects [c, h, w], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if !up && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::InvalidInput(format!(
                "downsample needs even dimensions, got {h}x{w}"
            )));
        }
        let data = kernels::resize_forward(v.data(), c, h, w, up);
        let (oh, ow) = if up { (h * 2, w * 2) } else { (h / 2, w / 2) };
        let rg = self.tape.requires(self.id);
        Ok(self.tape.push(
            Tensor::new(vec![c, oh, ow], data)?,
            rg,
            Op::Resize { x: self.id, up },
        ))
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf that the loss depends on; accumulates across
    /// repeated calls.
    pub fn backward(&self) -> Result<()> {
        let mut nodes = self.tape.nodes.borrow_mut();
        let lid = self.id;
        if nodes[lid].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward expects a scalar loss, got shape {:?}",
                nodes[lid].value.shape()
            )));
        }
        let mut work: Vec<Option<Vec<f64>>> = (0..=lid).map(|_| None).collect();
        work[lid] = Some(vec![1.0]);
        for id in (0..=lid).rev() {
            let Some(g) = work[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            step_backward(&mut nodes, &mut work, id, g);
        }
        Ok(())
    }
}

/// Add `contrib` into the working gradient of node `pid`, reducing to a
/// scalar when the target is scalar-shaped but the contribution is not.
fn accumulate(
    nodes: &[Node],
    work: &mut [Option<Vec<f64>>],
    pid: usize,
    contrib: &[f64],
) {
    if !nodes[pid].requires_grad {
        return;
    }
    let target_len = nodes[pid].value.len();
    let slot = work[pid].get_or_insert_with(|| vec![0.0; target_len]);
    if contrib.len() == target_len {
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    } else {
        debug_assert_eq!(target_len, 1, "broadcast reduction only for scalars");
        slot[0] += contrib.iter().sum::<f64>();
    }
}

fn step_backward(nodes: &mut [Node], work: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {
            let len = nodes[id].value.len();
            let grad = nodes[id].grad.get_or_insert_with(|| vec![0.0; len]);
            for (dst, src) in grad.iter_mut().zip(&g) {
                *dst += src;
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, work, a, &g);
            accumulate(nodes, work, b, &g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, work, a, &g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(nodes, work, b, &neg);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            let a_scalar = av.len() == 1;
            let b_scalar = bv.len() == 1;
            if nodes[a].requires_grad {
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * if b_scalar { bv[0] } else { bv[i] })
                    .collect();
                accumulate(nodes, work, a, &da);
            }
            if nodes[b].requires_grad {
                let db: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * if a_scalar { av[0] } else { av[i] })
                    .collect();
                accumulate(nodes, work, b, &db);
            }
        }
        Op::Scale(x, c) => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(nodes, work, x, &dx);
        }
        Op::AddScalar(x) => accumulate(nodes, work, x, &g),
        Op::Matmul(a, b) => {
            let (m, k) = {
                let s = nodes[a].value.shape();
                (s[0], s[1])
            };
            let n = nodes[b].value.shape()[1];
            if nodes[a].requires_grad {
                let da = kernels::matmul_g_bt(m, k, n, &g, nodes[b].value.data());
                accumulate(nodes, work, a, &da);
            }
            if nodes[b].requires_grad {
                let db = kernels::matmul_at_g(m, k, n, nodes[a].value.data(), &g);
                accumulate(nodes, work, b, &db);
            }
        }
        Op::Conv2d {
            x,
            kernel,
            stride,
            pad,
        } => {
            let sx = nodes[x].value.shape().to_vec();
            let sk = nodes[kernel].value.shape().to_vec();
            let so = nodes[id].value.shape().to_vec();
            let dims = kernels::ConvDims {
                c_in: sx[0],
                h: sx[1],
                w: sx[2],
                c_out: sk[0],
                kh: sk[2],
                kw: sk[3],
                stride,
                pad,
                oh: so[1],
                ow: so[2],
            };
            if nodes[x].requires_grad {
                let dx = kernels::conv2d_dx(&dims, nodes[kernel].value.data(), &g);
                accumulate(nodes, work, x, &dx);
            }
            if nodes[kernel].requires_grad {
                let dk = kernels::conv2d_dk(&dims, nodes[x].value.data(), &g);
                accumulate(nodes, work, kernel, &dk);
            }
        }
        Op::BiasAdd { x, bias } => {
            accumulate(nodes, work, x, &g);
            if nodes[bias].requires_grad {
                let s = nodes[x].value.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let db: Vec<f64> = (0..c).map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum()).collect();
                accumulate(nodes, work, bias, &db);
            }
        }
        Op::Relu(x) => {
            let xv = nodes[x].value.data();
            let dx: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(nodes, work, x, &dx);
        }
        Op::Sigmoid(x) => {
            let s = nodes[id].value.data();
            let dx: Vec<f64> = g.iter().zip(s).map(|(gv, &sv)| gv * sv * (1.0 - sv)).collect();
            accumulate(nodes, work, x, &dx);
        }
        Op::Exp(x) => {
            let e = nodes[id].value.data();
            let dx: Vec<f64> = g.iter().zip(e).map(|(gv, &ev)| gv * ev).collect();
            accumulate(nodes, work, x, &dx);
        }
        Op::Log(x) => {
            let xv = nodes[x].value.data();
            let dx: Vec<f64> = g.iter().zip(xv).map(|(gv, &v)| gv / v).collect();
            accumulate(nodes, work, x, &dx);
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[x].value.data();
            let dx: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(gv, &v)| if v < lo || v > hi { 0.0 } else { *gv })
                .collect();
            accumulate(nodes, work, x, &dx);
        }
        Op::Softmax { x, axis } => {
            let shape = nodes[id].value.shape().to_vec();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let dx =
                kernels::softmax_backward(nodes[id].value.data(), &g, outer, shape[axis], inner);
            accumulate(nodes, work, x, &dx);
        }
        Op::Sum { x, axes } => {
            let len = nodes[x].value.len();
            let dx: Vec<f64> = match &axes {
                None => vec![g[0]; len],
                Some(axes) => {
                    let map = reduction_index_map(nodes[x].value.shape(), axes);
                    (0..len).map(|i| g[map[i]]).collect()
                }
            };
            accumulate(nodes, work, x, &dx);
        }
        Op::Mean { x, axes } => {
            let len = nodes[x].value.len();
            let dx: Vec<f64> = match &axes {
                None => vec![g[0] / len as f64; len],
                Some(axes) => {
                    let shape = nodes[x].value.shape();
                    let group: f64 = axes.iter().map(|&a| shape[a] as f64).product();
                    let map = reduction_index_map(shape, axes);
                    (0..len).map(|i| g[map[i]] / group).collect()
                }
            };
            accumulate(nodes, work, x, &dx);
        }
        Op::Reshape(x) => accumulate(nodes, work, x, &g),
        Op::Transpose(x) => {
            let s = nodes[x].value.shape();
            let (m, n) = (s[0], s[1]);
            let mut dx = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            accumulate(nodes, work, x, &dx);
        }
        Op::Resize { x, up } => {
            let s = nodes[x].value.shape();
            let dx = kernels::resize_backward(&g, s[0], s[1], s[2], up);
            accumulate(nodes, work, x, &dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn mul_by_zero_annihilates_value_and_grad() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.5, -2.0, 0.5]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = x.mul(&zero).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(a.matmul(&eye).unwrap().value(), a.value());
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let prod = a.matmul(&ones).unwrap();
        assert_eq!(prod.value().data(), &[3.0, 7.0]);
        assert_eq!(prod.shape(), vec![2, 1]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv2d_box_sum() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_non_positive_output() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(x.conv2d(&k, 1, 0).is_err());
    }

    #[test]
    fn relu_and_sigmoid_pointwise() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-3.0, 0.0, 3.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 3.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn sigmoid_output_strictly_inside_unit_interval() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-500.0, 500.0]));
        let s = x.sigmoid().value();
        assert!(s.data()[0] >= PROB_EPS && s.data()[0] < 0.5);
        assert!(s.data()[1] <= 1.0 - PROB_EPS && s.data()[1] > 0.5);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = x.softmax(0).unwrap().value();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = big.softmax(0).unwrap().value();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-9);
        assert!(s.data()[1] < 1e-9);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 4.0, -2.0]));
        let s = x.softmax(1).unwrap().value();
        for row in 0..2 {
            let sum: f64 = s.data()[row * 3..(row + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn sum_and_mean_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.sum().item(), 6.0);
        let c = tape.constant(Tensor::full(vec![2, 2], 0.75));
        assert_eq!(c.mean().item(), 0.75);
    }

    #[test]
    fn grad_of_mean_is_one_over_n() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(vec![4]));
        x.mean().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn sum_axes_reduces_correct_extents() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = x.sum_axes(&[1]).unwrap();
        assert_eq!(rows.shape(), vec![2]);
        assert_eq!(rows.value().data(), &[6.0, 15.0]);
        let cols = x.mean_axes(&[0]).unwrap();
        assert_eq!(cols.value().data(), &[2.5, 3.5, 4.5]);
        assert!(x.sum_axes(&[2]).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 4, 4], 0.3));
        for v in x.upsample2x().unwrap().value().data() {
            assert!((v - 0.3).abs() < 1e-15);
        }
        for v in x.downsample2x().unwrap().value().data() {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_of_single_pixel_replicates() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[0.7]));
        let up = x.upsample2x().unwrap();
        assert_eq!(up.shape(), vec![1, 2, 2]);
        assert_eq!(up.value().data(), &[0.7; 4]);
    }

    #[test]
    fn downsample_matches_box_average_oracle() {
        // For even sizes, align-corners-false bilinear halving samples at the
        // centers of 2x2 blocks: exactly the block average.
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 4], &data));
        let d = x.downsample2x().unwrap().value();
        let oracle = |y: usize, x2: usize| {
            let i = |r: usize, c: usize| data[r * 4 + c];
            (i(2 * y, 2 * x2) + i(2 * y, 2 * x2 + 1) + i(2 * y + 1, 2 * x2) + i(2 * y + 1, 2 * x2 + 1))
                / 4.0
        };
        for y in 0..2 {
            for x2 in 0..2 {
                assert!((d.data()[y * 2 + x2] - oracle(y, x2)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_rejects_odd_extent() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4]));
        assert!(x.downsample2x().is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[5.0, -1.0, 2.0]));
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[5.0, -1.0, 2.0]));
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[10.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(x.backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates_into_leaves() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.constant(t(&[2, 3, 3], &(0..18).map(|v| v as f64 * 0.37 - 2.0).collect::<Vec<_>>()));
            let k = tape.constant(t(&[2, 2, 3, 3], &(0..36).map(|v| (v as f64).sin()).collect::<Vec<_>>()));
            let y = x.conv2d(&k, 1, 1).unwrap().relu();
            let s = y.reshape(vec![2, 9]).unwrap().softmax(1).unwrap();
            s.sum().item().to_bits()
        };
        assert_eq!(run(), run());
    }
}


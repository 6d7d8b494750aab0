//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] is rebuilt for every optimization step. Nodes are appended in
//! evaluation order, so inputs always precede outputs and the tape is acyclic
//! by construction; [`Graph::backward`] walks it once in reverse. Gradients
//! only flow into nodes that (transitively) depend on a leaf registered with
//! `requires_grad`, which is how frozen decoder weights are kept out of the
//! update path.
//!
//! Broadcasting is deliberately narrow: equal shapes, a one-element operand
//! against anything, and a single-channel map against a multi-channel one.

mod conv;
mod upconv;

use std::cell::RefCell;

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Reflect,
    Zero,
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    PowScalar,
    PowTensor,
    Exp,
    Abs,
    Neg,
    Sigmoid,
    LeakyRelu,
    ClampMin,
    Scale,
    Conv2d,
    UpsampleConv2d,
    Upsample2x,
    SpatialGradient,
    GroupMean,
    Mean,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Constant,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::PowScalar,
        OpKind::PowTensor,
        OpKind::Exp,
        OpKind::Abs,
        OpKind::Neg,
        OpKind::Sigmoid,
        OpKind::LeakyRelu,
        OpKind::ClampMin,
        OpKind::Scale,
        OpKind::Conv2d,
        OpKind::UpsampleConv2d,
        OpKind::Upsample2x,
        OpKind::SpatialGradient,
        OpKind::GroupMean,
        OpKind::Mean,
        OpKind::Sum,
    ];

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::PowScalar => "pow_scalar_exponent",
            OpKind::PowTensor => "pow_tensor_exponent",
            OpKind::Exp => "exp",
            OpKind::Abs => "abs",
            OpKind::Neg => "neg",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::ClampMin => "clamp_min",
            OpKind::Scale => "scale",
            OpKind::Conv2d => "conv2d",
            OpKind::UpsampleConv2d => "upsample_conv2d",
            OpKind::Upsample2x => "upsample_nearest2x",
            OpKind::SpatialGradient => "spatial_gradient",
            OpKind::GroupMean => "channel_group_mean",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
        }
    }
}

/// How an operand of a binary op is indexed from a flat output position.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// Single-channel operand spread over `channels` output channels of `plane` pixels.
    Channel { channels: usize, plane: usize },
}

impl Bcast {
    /// Operand indices for output positions `0..numel`, in order.
    fn indices(self, numel: usize) -> BcastIndices {
        BcastIndices { bcast: self, pos: 0, numel, offset: 0, channel: 0, base: 0 }
    }
}

/// Division-free walk over the operand index of each output position.
struct BcastIndices {
    bcast: Bcast,
    pos: usize,
    numel: usize,
    offset: usize,
    channel: usize,
    base: usize,
}

impl Iterator for BcastIndices {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.pos == self.numel {
            return None;
        }
        let i = self.pos;
        self.pos += 1;
        Some(match self.bcast {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Channel { channels, plane } => {
                let j = self.base + self.offset;
                self.offset += 1;
                if self.offset == plane {
                    self.offset = 0;
                    self.channel += 1;
                    if self.channel == channels {
                        self.channel = 0;
                        self.base += plane;
                    }
                }
                j
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Abs,
    Neg,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Binary { kind: BinaryKind, lhs: Var, rhs: Var, lb: Bcast, rb: Bcast },
    PowScalar { input: Var, exponent: f64 },
    Unary { kind: UnaryKind, input: Var },
    LeakyRelu { input: Var, slope: f64 },
    ClampMin { input: Var, floor: f64 },
    Scale { input: Var, factor: f64 },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: conv::ConvGeom, cols: Option<Vec<T>> },
    UpConv { input: Var, kernel: Var, bias: Option<Var>, geom: upconv::UpConvGeom, pk: Vec<T>, cols: Option<Vec<T>> },
    Upsample2x { input: Var },
    SpatialGradient { input: Var },
    GroupMean { input: Var, groups: usize },
    Mean { input: Var },
    Sum { input: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => OpKind::Add,
                BinaryKind::Sub => OpKind::Sub,
                BinaryKind::Mul => OpKind::Mul,
                BinaryKind::Div => OpKind::Div,
                BinaryKind::Pow => OpKind::PowTensor,
            },
            Op::PowScalar { .. } => OpKind::PowScalar,
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => OpKind::Exp,
                UnaryKind::Abs => OpKind::Abs,
                UnaryKind::Neg => OpKind::Neg,
                UnaryKind::Sigmoid => OpKind::Sigmoid,
            },
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::ClampMin { .. } => OpKind::ClampMin,
            Op::Scale { .. } => OpKind::Scale,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::UpConv { .. } => OpKind::UpsampleConv2d,
            Op::Upsample2x { .. } => OpKind::Upsample2x,
            Op::SpatialGradient { .. } => OpKind::SpatialGradient,
            Op::GroupMean { .. } => OpKind::GroupMean,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
    // Column-matrix buffer shared by every convolution on this graph.
    scratch: RefCell<Vec<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor`'s buffer (no-op for frozen tensors).
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<(), TensorError> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn c<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None, scratch: RefCell::new(Vec::new()) }
    }

    /// Drops every node but keeps scratch memory and any injected fault, so
    /// one graph can be reused across optimization steps.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: negates every input gradient produced by ops of `kind`.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Registers a leaf. Learnable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), false, Op::Constant)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(Vec::new(), vec![value], false, Op::Constant)
    }

    /// Node ids of learnable leaves.
    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| Var(i))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast, Bcast), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Same, Bcast::Same));
        }
        if nb == 1 {
            return Ok((sa.to_vec(), Bcast::Same, Bcast::Scalar));
        }
        if na == 1 {
            return Ok((sb.to_vec(), Bcast::Scalar, Bcast::Same));
        }
        let channel = |small: &[usize], big: &[usize]| -> Option<Bcast> {
            let r = big.len();
            if r < 3 || small.len() != r || small[r - 3] != 1 {
                return None;
            }
            let same_rest = small.iter().zip(big).enumerate().all(|(i, (x, y))| i == r - 3 || x == y);
            same_rest.then(|| Bcast::Channel { channels: big[r - 3], plane: big[r - 2] * big[r - 1] })
        };
        if let Some(bc) = channel(sb, sa) {
            return Ok((sa.to_vec(), Bcast::Same, bc));
        }
        if let Some(bc) = channel(sa, sb) {
            return Ok((sb.to_vec(), bc, Bcast::Same));
        }
        Err(TensorError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Pow => "pow_tensor_exponent",
        };
        let (shape, lb, rb) = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if kind == BinaryKind::Pow {
            if let Some(&base) = av.iter().find(|v| **v <= T::zero() || v.is_nan()) {
                return Err(TensorError::InvalidPow { base: base.as_f64(), exponent: bv[0].as_f64() });
            }
        }
        let numel: usize = shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            // x^1 is exact; libm powf is not guaranteed to return x.
            BinaryKind::Pow if y == T::one() => x,
            BinaryKind::Pow => x.powf(y),
        };
        let value: Vec<T> = match (lb, rb) {
            (Bcast::Same, Bcast::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Scalar) => av.iter().map(|&x| f(x, bv[0])).collect(),
            _ => lb.indices(numel).zip(rb.indices(numel)).map(|(i, j)| f(av[i], bv[j])).collect(),
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, value, rg, Op::Binary { kind, lhs: a, rhs: b, lb, rb }))
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

    /// `base ^ exponent` with a learnable exponent. Every base value must be positive.
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Pow, base, exponent)
    }

    /// `input ^ exponent` for a fixed exponent. Non-integer exponents need positive bases.
    pub fn pow_scalar(&mut self, input: Var, exponent: f64) -> Result<Var, TensorError> {
        let xv = self.value(input);
        if exponent.fract() != 0.0 {
            if let Some(&bad) = xv.iter().find(|v| **v <= T::zero() || v.is_nan()) {
                return Err(TensorError::InvalidPow { base: bad.as_f64(), exponent });
            }
        }
        let e: T = c(exponent);
        let value = xv.iter().map(|&x| x.powf(e)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape, value, rg, Op::PowScalar { input, exponent }))
    }

    fn unary(&mut self, kind: UnaryKind, input: Var) -> Var {
        let f = |x: T| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Neg => -x,
            UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
        };
        let value = self.value(input).iter().map(|&x| f(x)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, value, rg, Op::Unary { kind, input })
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Exp, input)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Abs, input)
    }

    pub fn neg(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Neg, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, input)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let s: T = c(slope);
        let value = self.value(input).iter().map(|&x| if x > T::zero() { x } else { x * s }).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, value, rg, Op::LeakyRelu { input, slope })
    }

    /// `max(x, floor)`; the gradient is passed only where `x > floor`.
    pub fn clamp_min(&mut self, input: Var, floor: f64) -> Var {
        let f: T = c(floor);
        let value = self.value(input).iter().map(|&x| if x > f { x } else { f }).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, value, rg, Op::ClampMin { input, floor })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f: T = c(factor);
        let value = self.value(input).iter().map(|&x| x * f).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, value, rg, Op::Scale { input, factor })
    }

    /// Stride-1 convolution with "same" padding of `(k - 1) / 2`.
    ///
    /// `input` is `C×H×W` or `N×C×H×W`; `kernel` is `out_c × in_c × k × k`
    /// with odd `k`; `bias`, when given, has `out_c` elements.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var, TensorError> {
        let ks = self.shape(kernel).to_vec();
        let &[out_c, kin_c, kh, kw] = ks.as_slice() else {
            return Err(TensorError::Rank { op: "conv2d kernel", expected: "4", got: ks.len() });
        };
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::KernelShape(ks));
        }
        let is = self.shape(input).to_vec();
        let (batch, in_c, h, w) = match is.as_slice() {
            &[c, h, w] => (1, c, h, w),
            &[n, c, h, w] => (n, c, h, w),
            other => return Err(TensorError::Rank { op: "conv2d", expected: "3 or 4", got: other.len() }),
        };
        if in_c != kin_c {
            return Err(TensorError::ChannelMismatch { input: in_c, kernel: kin_c });
        }
        if let Some(b) = bias {
            if self.value(b).len() != out_c {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![out_c],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = conv::ConvGeom { batch, in_c, out_c, h, w, k: kh, padding };
        let (value, cols) = if geom.direct() {
            (conv::direct_forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), &geom), None)
        } else {
            let keep_cols = self.requires_grad(kernel);
            let mut scratch = std::mem::take(self.scratch.get_mut());
            let r = conv::forward(
                self.value(input),
                self.value(kernel),
                bias.map(|b| self.value(b)),
                &geom,
                keep_cols,
                &mut scratch,
            );
            *self.scratch.get_mut() = scratch;
            r
        };
        let shape = if is.len() == 3 { vec![out_c, h, w] } else { vec![batch, out_c, h, w] };
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(shape, value, rg, Op::Conv2d { input, kernel, bias, geom, cols }))
    }

    /// `conv2d(upsample_nearest2x(input), kernel, bias, padding)` for a 3×3
    /// kernel and a `C×H×W` input, computed on the low-resolution grid.
    pub fn upsample_conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var, TensorError> {
        let ks = self.shape(kernel).to_vec();
        let &[out_c, kin_c, 3, 3] = ks.as_slice() else {
            return Err(TensorError::KernelShape(ks));
        };
        let is = self.shape(input).to_vec();
        let &[in_c, h, w] = is.as_slice() else {
            return Err(TensorError::Rank { op: "upsample_conv2d", expected: "3", got: is.len() });
        };
        if in_c != kin_c {
            return Err(TensorError::ChannelMismatch { input: in_c, kernel: kin_c });
        }
        if let Some(b) = bias {
            if self.value(b).len() != out_c {
                return Err(TensorError::ShapeMismatch {
                    op: "upsample_conv2d bias",
                    lhs: vec![out_c],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = upconv::UpConvGeom { in_c, out_c, h, w, padding };
        let len = geom.col_rows() * h * w;
        let keep_cols = self.requires_grad(kernel);
        let mut cols = if keep_cols { vec![T::zero(); len] } else { std::mem::take(self.scratch.get_mut()) };
        if cols.len() < len {
            cols.resize(len, T::zero());
        }
        let pk = upconv::phase_kernels(self.value(kernel), &geom);
        let value = upconv::forward(
            self.value(input),
            &pk,
            bias.map(|b| self.value(b)),
            &geom,
            &mut cols[..len],
        );
        let cols = if keep_cols {
            Some(cols)
        } else {
            *self.scratch.get_mut() = cols;
            None
        };
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(vec![out_c, 2 * h, 2 * w], value, rg, Op::UpConv { input, kernel, bias, geom, pk, cols }))
    }

    /// Nearest-neighbour 2× upsampling of the last two dimensions.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        if s.len() < 3 {
            return Err(TensorError::Rank { op: "upsample_nearest2x", expected: "3 or 4", got: s.len() });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(input);
        let mut value = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut value[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..h {
                let row = &mut dp[2 * y * 2 * w..(2 * y + 1) * 2 * w];
                for x in 0..w {
                    let v = sp[y * w + x];
                    row[2 * x] = v;
                    row[2 * x + 1] = v;
                }
                dp.copy_within(2 * y * 2 * w..(2 * y + 1) * 2 * w, (2 * y + 1) * 2 * w);
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        let rg = self.requires_grad(input);
        Ok(self.push(shape, value, rg, Op::Upsample2x { input }))
    }

    /// Forward differences of a `C×H×W` map, stacked as `2C×H×W`: the first `C`
    /// channels hold `f(x+1, y) - f(x, y)` along the width, the next `C` hold
    /// `f(x, y+1) - f(x, y)` along the height. The last column/row is zero.
    pub fn spatial_gradient(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        let &[ch, h, w] = s.as_slice() else {
            return Err(TensorError::Rank { op: "spatial_gradient", expected: "3", got: s.len() });
        };
        let src = self.value(input);
        let plane = h * w;
        let mut value = vec![T::zero(); 2 * ch * plane];
        for c in 0..ch {
            let sp = &src[c * plane..(c + 1) * plane];
            let (dx, rest) = value[c * plane..].split_at_mut(plane);
            let dy = &mut rest[(ch - 1) * plane..ch * plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        dx[i] = sp[i + 1] - sp[i];
                    }
                    if y + 1 < h {
                        dy[i] = sp[i + w] - sp[i];
                    }
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(vec![2 * ch, h, w], value, rg, Op::SpatialGradient { input }))
    }

    /// Averages consecutive channel groups: `(G·K)×H×W → G×H×W`.
    pub fn channel_group_mean(&mut self, input: Var, groups: usize) -> Result<Var, TensorError> {
        let s = self.shape(input).to_vec();
        let &[ch, h, w] = s.as_slice() else {
            return Err(TensorError::Rank { op: "channel_group_mean", expected: "3", got: s.len() });
        };
        if groups == 0 || ch % groups != 0 {
            return Err(TensorError::Invalid {
                op: "channel_group_mean",
                msg: format!("{ch} channels do not split into {groups} groups"),
            });
        }
        let per = ch / groups;
        let plane = h * w;
        let src = self.value(input);
        let inv: T = c(1.0 / per as f64);
        let mut value = vec![T::zero(); groups * plane];
        for g in 0..groups {
            let dst = &mut value[g * plane..(g + 1) * plane];
            for j in 0..per {
                let sp = &src[(g * per + j) * plane..(g * per + j + 1) * plane];
                dst.iter_mut().zip(sp).for_each(|(d, &v)| *d = *d + v);
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(vec![groups, h, w], value, rg, Op::GroupMean { input, groups }))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let n = v.len().max(1);
        let value = c(v.iter().map(|x| x.as_f64()).sum::<f64>() / n as f64);
        let rg = self.requires_grad(input);
        self.push(Vec::new(), vec![value], rg, Op::Mean { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = c(self.value(input).iter().map(|x| x.as_f64()).sum::<f64>());
        let rg = self.requires_grad(input);
        self.push(Vec::new(), vec![value], rg, Op::Sum { input })
    }

    /// Per-pixel maximum over the 3 channels of a constant map. Has no backward.
    pub fn channel_max(&mut self, input: Var) -> Result<Var, TensorError> {
        if self.requires_grad(input) {
            return Err(TensorError::NotDifferentiable("channel_max"));
        }
        let out = channel_max(&self.tensor(input))?;
        Ok(self.constant(out))
    }

    /// Signs of every value fed into a non-smooth op (abs, leaky ReLU, clamp),
    /// taken relative to the op's kink.
    ///
    /// A central difference whose perturbed evaluations change this signature
    /// straddles a kink and says nothing about the analytic gradient, so
    /// finite-difference oracles compare signatures to discard such probes.
    pub fn kink_signature(&self) -> Vec<i8> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary { kind: UnaryKind::Abs, input } | Op::LeakyRelu { input, .. } => Some((input, T::zero())),
                Op::ClampMin { input, floor } => Some((input, c(floor))),
                _ => None,
            })
            .flat_map(|(input, kink)| self.value(input).iter().map(move |v| (*v, kink)))
            .map(|(v, kink)| {
                if v > kink {
                    1
                } else if v < kink {
                    -1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Back-propagates from a one-element `loss` and returns the gradients of
    /// every learnable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if ln.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(mut go) = grads[idx].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                go.iter_mut().for_each(|g| *g = -*g);
            }
            self.backward_node(node, &go, &mut grads);
        }
        // Keep learnable leaves only.
        for (i, g) in grads.iter_mut().enumerate() {
            let n = &self.nodes[i];
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let n = self.node(v);
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
    }

    /// Adds `f(i)` into the gradient of `v` at every position, writing
    /// directly when the buffer does not exist yet.
    fn add_grad(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        let n = self.node(v);
        if !n.requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(g) => g.iter_mut().enumerate().for_each(|(i, x)| *x = *x + f(i)),
            None => grads[v.0] = Some((0..n.value.len()).map(f).collect()),
        }
    }

    fn backward_node(&self, node: &Node<T>, go: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary { kind, lhs, rhs, lb: Bcast::Same, rb: Bcast::Same } => {
                let (a, b) = (self.value(lhs), self.value(rhs));
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => self.add_grad(grads, lhs, |i| go[i]),
                    BinaryKind::Mul => self.add_grad(grads, lhs, |i| b[i] * go[i]),
                    BinaryKind::Div => self.add_grad(grads, lhs, |i| go[i] / b[i]),
                    BinaryKind::Pow => self.add_grad(grads, lhs, |i| b[i] * a[i].powf(b[i] - T::one()) * go[i]),
                }
                match kind {
                    BinaryKind::Add => self.add_grad(grads, rhs, |i| go[i]),
                    BinaryKind::Sub => self.add_grad(grads, rhs, |i| -go[i]),
                    BinaryKind::Mul => self.add_grad(grads, rhs, |i| a[i] * go[i]),
                    BinaryKind::Div => self.add_grad(grads, rhs, |i| -a[i] / (b[i] * b[i]) * go[i]),
                    BinaryKind::Pow => self.add_grad(grads, rhs, |i| out[i] * a[i].ln() * go[i]),
                }
            }
            Op::Binary { kind, lhs, rhs, lb, rb } => {
                let (a, b) = (self.value(lhs), self.value(rhs));
                if let Some(ga) = self.grad_buf(grads, lhs) {
                    for ((&g, ia), ib) in go.iter().zip(lb.indices(go.len())).zip(rb.indices(go.len())) {
                        let (x, y) = (a[ia], b[ib]);
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => T::one(),
                            BinaryKind::Mul => y,
                            BinaryKind::Div => T::one() / y,
                            BinaryKind::Pow => y * x.powf(y - T::one()),
                        };
                        ga[ia] = ga[ia] + d * g;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, rhs) {
                    for (i, ((&g, ia), ib)) in go.iter().zip(lb.indices(go.len())).zip(rb.indices(go.len())).enumerate() {
                        let (x, y) = (a[ia], b[ib]);
                        let d = match kind {
                            BinaryKind::Add => T::one(),
                            BinaryKind::Sub => -T::one(),
                            BinaryKind::Mul => x,
                            BinaryKind::Div => -x / (y * y),
                            BinaryKind::Pow => out[i] * x.ln(),
                        };
                        gb[ib] = gb[ib] + d * g;
                    }
                }
            }
            Op::PowScalar { input, exponent } => {
                let x = self.value(input);
                let e: T = c(exponent);
                self.add_grad(grads, input, |i| e * x[i].powf(e - T::one()) * go[i]);
            }
            Op::Unary { kind, input } => {
                let x = self.value(input);
                match kind {
                    UnaryKind::Exp => self.add_grad(grads, input, |i| out[i] * go[i]),
                    UnaryKind::Abs => self.add_grad(grads, input, |i| {
                        if x[i] > T::zero() {
                            go[i]
                        } else if x[i] < T::zero() {
                            -go[i]
                        } else {
                            T::zero()
                        }
                    }),
                    UnaryKind::Neg => self.add_grad(grads, input, |i| -go[i]),
                    UnaryKind::Sigmoid => self.add_grad(grads, input, |i| out[i] * (T::one() - out[i]) * go[i]),
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(input);
                let s: T = c(slope);
                self.add_grad(grads, input, |i| if x[i] > T::zero() { go[i] } else { s * go[i] });
            }
            Op::ClampMin { input, floor } => {
                let x = self.value(input);
                let f: T = c(floor);
                self.add_grad(grads, input, |i| if x[i] > f { go[i] } else { T::zero() });
            }
            Op::Scale { input, factor } => {
                let f: T = c(factor);
                self.add_grad(grads, input, |i| f * go[i]);
            }
            Op::Conv2d { input, kernel, bias, ref geom, ref cols } => {
                let kv = self.value(kernel);
                if let Some(gi) = self.grad_buf(grads, input) {
                    if geom.direct() {
                        conv::direct_backward_input(go, kv, geom, gi);
                    } else {
                        conv::backward_input(go, kv, geom, gi, &mut self.scratch.borrow_mut());
                    }
                }
                if let Some(gk) = self.grad_buf(grads, kernel) {
                    match cols {
                        Some(cols) => conv::backward_kernel(go, cols, geom, gk),
                        None => conv::direct_backward_kernel(go, self.value(input), geom, gk),
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.grad_buf(grads, b) {
                        conv::backward_bias(go, geom, gb);
                    }
                }
            }
            Op::UpConv { input, kernel, bias, ref geom, ref pk, ref cols } => {
                let needs_phases = self.requires_grad(input) || self.requires_grad(kernel);
                let phases = if needs_phases { upconv::gather_phases(go, geom) } else { Vec::new() };
                if let Some(gi) = self.grad_buf(grads, input) {
                    upconv::backward_input(&phases, pk, geom, gi, &mut self.scratch.borrow_mut());
                }
                if let Some(gk) = self.grad_buf(grads, kernel) {
                    let cols = cols.as_ref().expect("columns are kept when the kernel is learnable");
                    upconv::backward_kernel(&phases, cols, geom, gk);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.grad_buf(grads, b) {
                        upconv::backward_bias(go, geom, gb);
                    }
                }
            }
            Op::Upsample2x { input } => {
                let s = self.shape(input);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(gi) = self.grad_buf(grads, input) {
                    let planes = gi.len() / (h * w);
                    for p in 0..planes {
                        let gp = &go[p * 4 * h * w..(p + 1) * 4 * h * w];
                        for y in 0..h {
                            let r0 = &gp[2 * y * 2 * w..(2 * y + 1) * 2 * w];
                            let r1 = &gp[(2 * y + 1) * 2 * w..(2 * y + 2) * 2 * w];
                            for x in 0..w {
                                let j = p * h * w + y * w + x;
                                gi[j] = gi[j] + (r0[2 * x] + r0[2 * x + 1]) + (r1[2 * x] + r1[2 * x + 1]);
                            }
                        }
                    }
                }
            }
            Op::SpatialGradient { input } => {
                let s = self.shape(input);
                let (ch, h, w) = (s[0], s[1], s[2]);
                let plane = h * w;
                if let Some(gi) = self.grad_buf(grads, input) {
                    for c in 0..ch {
                        let gx = &go[c * plane..(c + 1) * plane];
                        let gy = &go[(ch + c) * plane..(ch + c + 1) * plane];
                        let g = &mut gi[c * plane..(c + 1) * plane];
                        for y in 0..h {
                            for x in 0..w {
                                let i = y * w + x;
                                if x + 1 < w {
                                    g[i + 1] = g[i + 1] + gx[i];
                                    g[i] = g[i] - gx[i];
                                }
                                if y + 1 < h {
                                    g[i + w] = g[i + w] + gy[i];
                                    g[i] = g[i] - gy[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::GroupMean { input, groups } => {
                let s = self.shape(input);
                let plane = s[1] * s[2];
                let per = s[0] / groups;
                let inv: T = c(1.0 / per as f64);
                if let Some(gi) = self.grad_buf(grads, input) {
                    for g in 0..groups {
                        let src = &go[g * plane..(g + 1) * plane];
                        for j in 0..per {
                            let dst = &mut gi[(g * per + j) * plane..(g * per + j + 1) * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v * inv);
                        }
                    }
                }
            }
            Op::Mean { input } => {
                if let Some(gi) = self.grad_buf(grads, input) {
                    let d = go[0] / c(gi.len().max(1) as f64);
                    gi.iter_mut().for_each(|g| *g = *g + d);
                }
            }
            Op::Sum { input } => {
                if let Some(gi) = self.grad_buf(grads, input) {
                    gi.iter_mut().for_each(|g| *g = *g + go[0]);
                }
            }
        }
    }
}

/// Per-pixel maximum over channels of a `3×H×W` tensor, giving `1×H×W`.
pub fn channel_max<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (ch, h, w) = input.chw()?;
    if ch != 3 {
        return Err(TensorError::Invalid { op: "channel_max", msg: format!("expected 3 channels, got {ch}") });
    }
    let plane = h * w;
    let d = input.data();
    let out = (0..plane).map(|i| d[i].max(d[plane + i]).max(d[2 * plane + i])).collect();
    Tensor::new(&[1, h, w], out)
}

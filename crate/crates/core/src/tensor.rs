//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tensor`] is a plain value (shape + row-major data + optional gradient
//! buffer). Computation happens on a [`Tape`]: tensors are copied onto it as
//! leaves, every operation appends a node, and [`Tape::backward`] replays the
//! nodes in reverse creation order. Creation order is a topological order, so
//! each node is visited exactly once.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

fn check_shape(shape: &[usize]) -> TensorResult<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> TensorResult<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> TensorResult<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> TensorResult<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(
        shape: impl Into<Vec<usize>>,
        f: impl FnMut(usize) -> f64,
    ) -> TensorResult<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Self::new(shape, (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. The length is fixed, so shape invariants hold.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> TensorResult<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Binary {
        lhs: Var,
        rhs: Var,
        op: BinaryOp,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    ScaleBy {
        factor: Var,
        input: Var,
    },
    ScaleChannels {
        input: Var,
        weights: Var,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Bce {
        pred: Var,
        target: Var,
        eps: f64,
        /// Reduced to the mean, or kept per element.
        mean: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Which side of each nondifferentiable point the recorded ops took:
    /// relu signs, maxpool winners and BCE clamp regions. Two evaluations
    /// with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu,
                } => out.extend(
                    self.nodes[input.0]
                        .value
                        .iter()
                        .map(|&x| usize::from(x > 0.0)),
                ),
                Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
                Op::Bce { pred, eps, .. } => {
                    out.extend(self.nodes[pred.0].value.iter().map(|&p| {
                        if p < *eps {
                            0
                        } else if p > 1.0 - eps {
                            2
                        } else {
                            1
                        }
                    }))
                }
                _ => {}
            }
        }
        out
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy a tensor onto the tape. Gradients are tracked iff the tensor
    /// requires them.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape.clone(),
            tensor.data.clone(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.shape, tensor.data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> TensorResult<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let geom = ConvGeometry::new(&xs, &ks, stride, padding)?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [geom.cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ks,
                    rhs: bs.to_vec(),
                });
            }
        }
        let value = geom.forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        );
        let mut vars = vec![input, kernel];
        vars.extend(bias);
        let rg = self.rg(&vars);
        Ok(self.push(
            geom.out_shape(),
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, input: Var) -> TensorResult<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "maxpool2d needs [N,C,H,W] with even H and W".into(),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // Row-major scan; strict `>` keeps the first maximum on ties.
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            vec![s[0], s[1], oh, ow],
            out,
            Op::MaxPool2d { input, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling by a factor of 2.
    pub fn upsample_nearest(&mut self, input: Var) -> TensorResult<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "upsample_nearest needs [N,C,H,W]".into(),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.value(input);
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            vec![s[0], s[1], 2 * h, 2 * w],
            out,
            Op::Upsample { input },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
        };
        let value = self.value(input).iter().map(|&v| f(v)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(shape, value, Op::Activation { input, kind }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn binary(&mut self, lhs: Var, rhs: Var, op: BinaryOp) -> TensorResult<Var> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        if ls != rs {
            return Err(TensorError::ShapeMismatch {
                op: match op {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                },
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
        };
        let value = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(&a, &b)| f(a, b))
            .collect();
        let shape = ls.to_vec();
        let rg = self.rg(&[lhs, rhs]);
        Ok(self.push(shape, value, Op::Binary { lhs, rhs, op }, rg))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> TensorResult<Var> {
        self.binary(lhs, rhs, BinaryOp::Add)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> TensorResult<Var> {
        self.binary(lhs, rhs, BinaryOp::Sub)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> TensorResult<Var> {
        self.binary(lhs, rhs, BinaryOp::Mul)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let value = self
            .value(input)
            .iter()
            .map(|&v| scale * v + shift)
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(shape, value, Op::Affine { input, scale }, rg)
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Var {
        self.affine(input, c, 0.0)
    }

    pub fn neg(&mut self, input: Var) -> Var {
        self.affine(input, -1.0, 0.0)
    }

    /// Multiply every element of `input` by the single-element `factor`.
    pub fn scale_by(&mut self, factor: Var, input: Var) -> TensorResult<Var> {
        if self.value(factor).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(factor).to_vec(),
                rhs: vec![1],
            });
        }
        let c = self.value(factor)[0];
        let value = self.value(input).iter().map(|&v| c * v).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[factor, input]);
        Ok(self.push(shape, value, Op::ScaleBy { factor, input }, rg))
    }

    /// Elementwise product of `[N,C,H,W]` input with weights shared across the
    /// batch: `[C,H,W]` (per position) or `[C,1,1]` (per channel).
    pub fn scale_channels(&mut self, input: Var, weights: Var) -> TensorResult<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weights).to_vec();
        let per_channel = match (xs.as_slice(), ws.as_slice()) {
            ([_, c, h, w], [wc, wh, ww]) if c == wc && h == wh && w == ww => false,
            ([_, c, _, _], [wc, 1, 1]) if c == wc => true,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "scale_channels",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        let plane = xs[2] * xs[3];
        let chw = xs[1] * plane;
        let (x, w) = (self.value(input), self.value(weights));
        let value = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % chw;
                v * if per_channel { w[j / plane] } else { w[j] }
            })
            .collect();
        let rg = self.rg(&[input, weights]);
        Ok(self.push(xs, value, Op::ScaleChannels { input, weights }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> TensorResult<Var> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.value(input).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(input).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(input).to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(shape, value, Op::Reshape { input }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        let rg = self.rg(&[input]);
        self.push(vec![1], vec![s], Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[input]);
        self.push(vec![1], vec![m], Op::Mean { input }, rg)
    }

    /// Mean binary cross entropy `-(1/N) Σ q ln p + (1-q) ln(1-p)` with the
    /// prediction clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, pred: Var, target: Var, eps: f64) -> TensorResult<Var> {
        let terms = self.bce_terms(pred, target, eps)?;
        let loss = -terms.iter().sum::<f64>() / terms.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                pred,
                target,
                eps,
                mean: true,
            },
            rg,
        ))
    }

    /// Per-element cross entropy, same shape as `pred`, unreduced.
    pub fn bce_map(&mut self, pred: Var, target: Var, eps: f64) -> TensorResult<Var> {
        let terms = self.bce_terms(pred, target, eps)?;
        let shape = self.shape(pred).to_vec();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            shape,
            terms.into_iter().map(|t| -t).collect(),
            Op::Bce {
                pred,
                target,
                eps,
                mean: false,
            },
            rg,
        ))
    }

    fn bce_terms(&self, pred: Var, target: Var, eps: f64) -> TensorResult<Vec<f64>> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: ps.to_vec(),
                rhs: ts.to_vec(),
            });
        }
        let (p, q) = (self.value(pred), self.value(target));
        Ok(p.iter()
            .zip(q)
            .map(|(&p, &q)| {
                let c = p.clamp(eps, 1.0 - eps);
                q * c.ln() + (1.0 - q) * (1.0 - c).ln()
            })
            .collect())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => node.grad = Some(delta.to_vec()),
        }
    }

    /// Fill gradient buffers with d`loss`/d(node) for every node that
    /// requires a gradient. Previous gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let geom =
                    ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)
                        .expect("validated at forward");
                let (gx, gk, gb) = geom.backward(self.value(input), self.value(kernel), g);
                self.accumulate(input, &gx);
                self.accumulate(kernel, &gk);
                if let Some(b) = bias {
                    self.accumulate(b, &gb);
                }
            }
            Op::MaxPool2d { input, ref argmax } => {
                let mut gx = vec![0.0; self.value(input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                self.accumulate(input, &gx);
            }
            Op::Upsample { input } => {
                let s = self.shape(input).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut gx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            gx[p * h * w + (y / 2) * w + x / 2] += g[p * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(input, &gx);
            }
            Op::Activation { input, kind } => {
                let y = &self.nodes[i].value;
                let x = self.value(input);
                let gx: Vec<f64> = match kind {
                    Activation::Sigmoid => {
                        y.iter().zip(g).map(|(&y, &g)| g * y * (1.0 - y)).collect()
                    }
                    Activation::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
                    Activation::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                };
                self.accumulate(input, &gx);
            }
            Op::Binary { lhs, rhs, op } => match op {
                BinaryOp::Add => {
                    self.accumulate(lhs, g);
                    self.accumulate(rhs, g);
                }
                BinaryOp::Sub => {
                    self.accumulate(lhs, g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(rhs, &neg);
                }
                BinaryOp::Mul => {
                    let ga: Vec<f64> = g.iter().zip(self.value(rhs)).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(self.value(lhs)).map(|(g, a)| g * a).collect();
                    self.accumulate(lhs, &ga);
                    self.accumulate(rhs, &gb);
                }
            },
            Op::Affine { input, scale } => {
                let gx: Vec<f64> = g.iter().map(|g| g * scale).collect();
                self.accumulate(input, &gx);
            }
            Op::ScaleBy { factor, input } => {
                let c = self.value(factor)[0];
                let gf: f64 = g.iter().zip(self.value(input)).map(|(g, x)| g * x).sum();
                let gx: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.accumulate(factor, &[gf]);
                self.accumulate(input, &gx);
            }
            Op::ScaleChannels { input, weights } => {
                let xs = self.shape(input).to_vec();
                let plane = xs[2] * xs[3];
                let chw = xs[1] * plane;
                let per_channel = self.value(weights).len() == xs[1];
                let (x, w) = (self.value(input), self.value(weights));
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                for (idx, (&gv, &xv)) in g.iter().zip(x).enumerate() {
                    let j = idx % chw;
                    let wj = if per_channel { j / plane } else { j };
                    gx[idx] = gv * w[wj];
                    gw[wj] += gv * xv;
                }
                self.accumulate(input, &gx);
                self.accumulate(weights, &gw);
            }
            Op::Reshape { input } => self.accumulate(input, g),
            Op::Sum { input } => {
                let gx = vec![g[0]; self.value(input).len()];
                self.accumulate(input, &gx);
            }
            Op::Mean { input } => {
                let n = self.value(input).len();
                let gx = vec![g[0] / n as f64; n];
                self.accumulate(input, &gx);
            }
            Op::Bce {
                pred,
                target,
                eps,
                mean,
            } => {
                let n = if mean {
                    self.value(pred).len() as f64
                } else {
                    1.0
                };
                let (p, q) = (self.value(pred), self.value(target));
                let mut gp = Vec::with_capacity(p.len());
                let mut gq = Vec::with_capacity(p.len());
                for (k, (&p, &q)) in p.iter().zip(q).enumerate() {
                    let g = if mean { g[0] } else { g[k] };
                    let c = p.clamp(eps, 1.0 - eps);
                    // The clamp is flat outside [eps, 1-eps].
                    let dp = if p > eps && p < 1.0 - eps {
                        -(q / c - (1.0 - q) / (1.0 - c)) / n
                    } else {
                        0.0
                    };
                    gp.push(g * dp);
                    gq.push(-g * (c.ln() - (1.0 - c).ln()) / n);
                }
                self.accumulate(pred, &gp);
                self.accumulate(target, &gq);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shapes and loop bounds shared by the conv2d forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ks: &[usize], stride: usize, padding: usize) -> TensorResult<Self> {
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument(
                "conv2d stride must be >= 1".into(),
            ));
        }
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ks[2] > ph || ks[3] > pw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        Ok(Self {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            oh: (ph - ks[2]) / stride + 1,
            ow: (pw - ks[3]) / stride + 1,
            stride,
            padding,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside the
    /// unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }

    fn forward(&self, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let &Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            ..
        } = self;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                let o_plane = &mut out[(b * cout + co) * oh * ow..][..oh * ow];
                if let Some(bias) = bias {
                    o_plane.fill(bias[co]);
                }
                for ci in 0..cin {
                    let x_plane = &x[(b * cin + ci) * h * w..][..h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                            for oy in 0..oh {
                                let Some(iy) = self.src(oy, ky, h) else {
                                    continue;
                                };
                                let x_row = &x_plane[iy * w..][..w];
                                let o_row = &mut o_plane[oy * ow..][..ow];
                                for (ox, o) in o_row.iter_mut().enumerate() {
                                    if let Some(ix) = self.src(ox, kx, w) {
                                        *o += wv * x_row[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], k: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let &Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            ..
        } = self;
        let mut gx = vec![0.0; x.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gb = vec![0.0; cout];
        for b in 0..n {
            for co in 0..cout {
                let g_plane = &g[(b * cout + co) * oh * ow..][..oh * ow];
                gb[co] += g_plane.iter().sum::<f64>();
                for ci in 0..cin {
                    let x_off = (b * cin + ci) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                            let wv = k[kidx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let Some(iy) = self.src(oy, ky, h) else {
                                    continue;
                                };
                                let row = x_off + iy * w;
                                for ox in 0..ow {
                                    if let Some(ix) = self.src(ox, kx, w) {
                                        let gv = g_plane[oy * ow + ox];
                                        acc += gv * x[row + ix];
                                        gx[row + ix] += gv * wv;
                                    }
                                }
                            }
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
        (gx, gk, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::zeros(vec![0, 3]).is_err());
        assert!(Tensor::zeros(Vec::<usize>::new()).is_err());
    }

    #[test]
    fn conv_all_ones_3x3_padding_1() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap());
        let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(vec![1]).unwrap());
        let y = tape.conv2d(x, k, Some(b), 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(
            tape.value(y),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 3, 4, 5], |i| i as f64).unwrap());
        let k = tape.constant(Tensor::zeros(vec![1, 3, 1, 1]).unwrap());
        let b = tape.constant(t(&[1], &[0.75]));
        let y = tape.conv2d(x, k, Some(b), 1, 0).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.75));
    }

    #[test]
    fn conv_1x1_is_scalar_multiply() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]).unwrap());
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]).unwrap());
        let err = tape.conv2d(x, k, None, 1, 1).unwrap_err().to_string();
        assert!(
            err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn conv_output_shape_formula() {
        for stride in 1..=3 {
            for padding in 0..=2 {
                for (h, w) in [(5, 7), (8, 8), (3, 4)] {
                    let mut tape = Tape::new();
                    let x = tape.constant(Tensor::zeros(vec![2, 2, h, w]).unwrap());
                    let k = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]).unwrap());
                    match tape.conv2d(x, k, None, stride, padding) {
                        Ok(y) => assert_eq!(
                            tape.shape(y),
                            &[
                                2,
                                3,
                                (h + 2 * padding - 3) / stride + 1,
                                (w + 2 * padding - 3) / stride + 1
                            ]
                        ),
                        Err(_) => assert!(h + 2 * padding < 3 || w + 2 * padding < 3),
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y), &[4.0]);

        let c = tape.constant(Tensor::full(vec![1, 2, 4, 4], 1.5).unwrap());
        let y = tape.maxpool2d(c).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 1.5));

        let odd = tape.constant(Tensor::zeros(vec![1, 1, 3, 4]).unwrap());
        assert!(tape.maxpool2d(odd).is_err());
    }

    #[test]
    fn maxpool_4x4_matches_window_scan() {
        let data: Vec<f64> = [3, 15, 7, 0, 12, 1, 9, 14, 5, 8, 2, 11, 13, 4, 10, 6]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut expected = vec![];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(data[(2 * oy + dy) * 4 + 2 * ox + dx]);
                    }
                }
                expected.push(m);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4, 4], &data));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y), expected.as_slice());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]).with_requires_grad(true));
        let y = tape.maxpool2d(x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_and_inverts_pool() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
        let u = tape.upsample_nearest(x).unwrap();
        assert_eq!(
            tape.value(u),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let p = tape.maxpool2d(u).unwrap();
        assert_eq!(tape.value(p), tape.value(x));

        let l = tape.sum(u);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, -1.0, 2.0]).with_requires_grad(true));
        let s = tape.sigmoid(x);
        let th = tape.tanh(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s)[0], 0.5);
        assert_eq!(tape.value(th)[0], 0.0);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap()[0], 0.25);
        for v in [-800.0, -30.0, 0.0, 30.0, 800.0] {
            let s = sigmoid(v);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
        for v in [-30.0, -1.0, 0.0, 1.0, 30.0] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.0, 1.0]).with_requires_grad(true));
        let r = tape.relu(x);
        let l = tape.sum(r);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]).with_requires_grad(true));
        let b = tape.constant(t(&[2, 2], &[0.5, 4.0, -1.0, 2.0]));
        let ones = tape.constant(Tensor::full(vec![2, 2], 1.0).unwrap());
        let m = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(m), tape.value(a));
        let na = tape.neg(a);
        let z = tape.add(a, na).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));

        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), tape.value(b));

        let wrong = tape.constant(Tensor::zeros(vec![4]).unwrap());
        assert!(matches!(
            tape.add(a, wrong),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]).unwrap().with_requires_grad(true));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let f = |tape: &mut Tape, x: Var| {
            let s = tape.sigmoid(x);
            let m = tape.mul(s, x).unwrap();
            tape.sum(m)
        };
        let x0 = t(&[3], &[0.3, -1.2, 0.8]).with_requires_grad(true);

        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let l = f(&mut tape, x);
        tape.backward(l).unwrap();
        let single = tape.grad(x).unwrap().to_vec();

        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let a = f(&mut tape, x);
        let b = f(&mut tape, x);
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        let double = tape.grad(x).unwrap();
        for (s, d) in single.iter().zip(double) {
            assert_eq!(2.0 * s, *d);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let m = tape.mul(x, c).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let x0 = Tensor::from_fn(vec![1, 2, 6, 6], |i| ((i * 37) % 11) as f64 - 5.0).unwrap();
        let k0 = Tensor::from_fn(vec![3, 2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.1).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&x0);
            let k = tape.leaf(&k0);
            let y = tape.conv2d(x, k, None, 1, 1).unwrap();
            let y = tape.tanh(y);
            tape.value(y).to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn scale_channels_per_channel_and_per_position() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 2, 1, 2], 2.0).unwrap());
        let wc = tape.constant(t(&[2, 1, 1], &[1.0, 3.0]));
        let y = tape.scale_channels(x, wc).unwrap();
        assert_eq!(tape.value(y), &[2.0, 2.0, 6.0, 6.0]);
        let wp = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.scale_channels(x, wp).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0, 8.0]);
        let bad = tape.constant(t(&[3, 1, 1], &[1.0, 2.0, 3.0]));
        assert!(tape.scale_channels(x, bad).is_err());
    }

    #[test]
    fn bce_map_sums_to_mean_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[2, 2], &[0.1, 0.4, 0.7, 0.95]).with_requires_grad(true));
        let q = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.5, 1.0]));
        let mean = tape.bce(p, q, 1e-7).unwrap();
        let map = tape.bce_map(p, q, 1e-7).unwrap();
        assert_eq!(tape.shape(map), &[2, 2]);
        let total: f64 = tape.value(map).iter().sum();
        assert!((total / 4.0 - tape.value(mean)[0]).abs() < 1e-15);
        let s = tape.mean(map);
        tape.backward(s).unwrap();
        let g_map = tape.grad(p).unwrap().to_vec();
        tape.backward(mean).unwrap();
        let g_mean = tape.grad(p).unwrap();
        assert!(g_map.iter().zip(g_mean).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn branch_pattern_tracks_relu_sign() {
        let pattern = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[2], &[v, 1.0]));
            tape.relu(x);
            tape.branch_pattern()
        };
        assert_eq!(pattern(0.5), pattern(0.6));
        assert_ne!(pattern(0.5), pattern(-0.5));
    }
}

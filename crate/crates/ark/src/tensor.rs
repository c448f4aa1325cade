//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every differentiable operation of one forward pass and
//! replays it in reverse to accumulate gradients. Tapes are rebuilt per forward
//! pass and confined to a single thread; parallelism happens across independent
//! tapes.

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for tensor with {ndim} dimensions")]
    AxisOutOfRange { axis: usize, ndim: usize },
    #[error("invalid shape {shape:?} for buffer of length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("backward() already called on this tape; record a new forward pass first")]
    BackwardTwice,
    #[error("tensor is not attached to this tape")]
    Detached,
}

/// Row-major dense tensor. `node_id` links the value to the tape that produced
/// it; plain data tensors (parameters between steps, images, labels) carry
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub node_id: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
            node_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Copy of this tensor with no tape linkage and no gradient requirement.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddBias { a: NodeId, b: NodeId },
    AddChanBias { a: NodeId, b: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Pow { a: NodeId, p: f64 },
    Conv2d { input: NodeId, kernels: NodeId, stride: usize },
    ReduceSum { a: NodeId, axes: Vec<usize> },
    ReduceMean { a: NodeId, axes: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRow { a: NodeId, row: usize },
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
    CrossEntropyRows { logits: NodeId, classes: Vec<usize> },
    Mse { a: NodeId, b: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Wengert list for one forward pass. Operations are recorded in topological
/// order by construction; `backward` visits them once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            values: values.clone(),
            requires_grad,
        });
        self.grads.push(None);
        Tensor {
            shape,
            values,
            requires_grad,
            grad: None,
            node_id: Some(id),
        }
    }

    /// Record `t` as a leaf. Gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.push(
            Op::Leaf,
            t.shape.clone(),
            t.values.clone(),
            t.requires_grad,
        )
    }

    /// Node id for an input tensor, creating a constant leaf when the tensor
    /// is not yet on the tape.
    fn input(&mut self, t: &Tensor) -> NodeId {
        match t.node_id {
            Some(id) if id < self.nodes.len() => id,
            _ => self.leaf(&t.detached()).node_id.unwrap(),
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&a.values, &b.values, &mut out, m, k, n);
        let (ia, ib) = (self.input(a), self.input(b));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::Matmul { a: ia, b: ib }, vec![m, n], out, rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor, TensorError> {
        let values = if b.is_scalar() {
            a.values.iter().map(|&x| f(x, b.values[0])).collect()
        } else if a.shape == b.shape {
            a.values
                .iter()
                .zip(&b.values)
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        };
        let (ia, ib) = (self.input(a), self.input(b));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(make(ia, ib), a.shape.clone(), values, rg))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        let values = a.values.iter().map(|&x| x * c).collect();
        let ia = self.input(a);
        let rg = self.rg(ia);
        Ok(self.push(Op::Scale { a: ia, c }, a.shape.clone(), values, rg))
    }

    /// Row-broadcast bias add: `a` is `[m, n]`, `b` is `[n]`.
    pub fn add_bias(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape.len() != 2 || b.numel() != a.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let n = a.shape[1];
        let values = a
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.values[i % n])
            .collect();
        let (ia, ib) = (self.input(a), self.input(b));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::AddBias { a: ia, b: ib }, a.shape.clone(), values, rg))
    }

    /// Per-channel bias add: `a` is `[c, h, w]`, `b` is `[c]`.
    pub fn add_chan_bias(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape.len() != 3 || b.numel() != a.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_chan_bias",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let plane = a.shape[1] * a.shape[2];
        let values = a
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.values[i / plane])
            .collect();
        let (ia, ib) = (self.input(a), self.input(b));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::AddChanBias { a: ia, b: ib }, a.shape.clone(), values, rg))
    }

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> Tensor {
        let values = a.values.iter().map(|&x| f(x)).collect();
        let ia = self.input(a);
        let rg = self.rg(ia);
        self.push(make(ia), a.shape.clone(), values, rg)
    }

    /// View one row of a 2-D tensor under a new shape with the same element
    /// count; gradients scatter back into that row.
    pub fn slice_row(
        &mut self,
        a: &Tensor,
        row: usize,
        out_shape: Vec<usize>,
    ) -> Result<Tensor, TensorError> {
        if a.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_row",
                lhs: a.shape.clone(),
                rhs: out_shape,
            });
        }
        let (n, d) = (a.shape[0], a.shape[1]);
        if row >= n {
            return Err(TensorError::AxisOutOfRange { axis: row, ndim: n });
        }
        let len: usize = out_shape.iter().product();
        if len != d {
            return Err(TensorError::InvalidShape {
                shape: out_shape,
                len: d,
            });
        }
        let values = a.values[row * d..(row + 1) * d].to_vec();
        let ia = self.input(a);
        let rg = self.rg(ia);
        Ok(self.push(Op::SliceRow { a: ia, row }, out_shape, values, rg))
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x.max(0.0), |a| Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, sigmoid, |a| Op::Sigmoid { a })
    }

    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor, TensorError> {
        if lo > hi {
            return Err(TensorError::Config(format!(
                "clamp bounds out of order: {lo} > {hi}"
            )));
        }
        Ok(self.unary(a, |x| x.clamp(lo, hi), |a| Op::Clamp { a, lo, hi }))
    }

    pub fn powf(&mut self, a: &Tensor, p: f64) -> Tensor {
        self.unary(a, |x| x.powf(p), |a| Op::Pow { a, p })
    }

    /// 2-D cross-correlation (no kernel flip) with "same" zero padding for odd
    /// kernels. `input` is `[c_in, h, w]`, `kernels` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernels: &Tensor,
        stride: usize,
    ) -> Result<Tensor, TensorError> {
        if input.shape.len() != 3 || kernels.shape.len() != 4 || input.shape[0] != kernels.shape[1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape.clone(),
                rhs: kernels.shape.clone(),
            });
        }
        let (kh, kw) = (kernels.shape[2], kernels.shape[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config(format!(
                "conv2d requires odd kernel sizes, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be >= 1".into()));
        }
        let (h, w) = (input.shape[1], input.shape[2]);
        if kh > h || kw > w {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape.clone(),
                rhs: kernels.shape.clone(),
            });
        }
        let c_out = kernels.shape[0];
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let oh = (h + 2 * ph - kh) / stride + 1;
        let ow = (w + 2 * pw - kw) / stride + 1;
        let values = conv2d_forward(
            &input.values,
            &kernels.values,
            input.shape[0],
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
        );
        let (ii, ik) = (self.input(input), self.input(kernels));
        let rg = self.rg(ii) || self.rg(ik);
        Ok(self.push(
            Op::Conv2d {
                input: ii,
                kernels: ik,
                stride,
            },
            vec![c_out, oh, ow],
            values,
            rg,
        ))
    }

    pub fn reduce_sum(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        self.reduce(a, axes, false)
    }

    pub fn reduce_mean(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        self.reduce(a, axes, true)
    }

    fn reduce(&mut self, a: &Tensor, axes: &[usize], mean: bool) -> Result<Tensor, TensorError> {
        for &ax in axes {
            if ax >= a.shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis: ax,
                    ndim: a.shape.len(),
                });
            }
        }
        let out_shape: Vec<usize> = a
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let out_len = out_shape.iter().product::<usize>().max(1);
        let mut out = vec![0.0; out_len];
        for (i, &v) in a.values.iter().enumerate() {
            out[reduced_index(i, &a.shape, axes)] += v;
        }
        let count: usize = axes.iter().map(|&ax| a.shape[ax]).product();
        if mean {
            for v in &mut out {
                *v /= count as f64;
            }
        }
        let ia = self.input(a);
        let rg = self.rg(ia);
        let axes = axes.to_vec();
        let op = if mean {
            Op::ReduceMean { a: ia, axes }
        } else {
            Op::ReduceSum { a: ia, axes }
        };
        Ok(self.push(op, out_shape, out, rg))
    }

    /// Stack row vectors (shape `[n]` or `[1, n]`) into an `[m, n]` matrix.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of zero tensors".into()));
        }
        let n = parts[0].numel();
        let mut values = Vec::with_capacity(parts.len() * n);
        let mut ids = Vec::with_capacity(parts.len());
        for p in parts {
            if p.numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            values.extend_from_slice(&p.values);
            ids.push(self.input(p));
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(
            Op::ConcatRows { parts: ids },
            vec![parts.len(), n],
            values,
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits over every element, in the
    /// overflow-safe form `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(
        &mut self,
        logits: &Tensor,
        targets: &Tensor,
    ) -> Result<Tensor, TensorError> {
        if logits.shape != targets.shape {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: logits.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        let k = logits.numel() as f64;
        let loss = logits
            .values
            .iter()
            .zip(&targets.values)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / k;
        let il = self.input(logits);
        let rg = self.rg(il);
        Ok(self.push(
            Op::BceWithLogits {
                logits: il,
                targets: targets.values.clone(),
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Mean `-log softmax(row)[class]` over the rows of `logits` (`[m, k]`),
    /// computed via max-subtracted log-sum-exp.
    pub fn cross_entropy_rows(
        &mut self,
        logits: &Tensor,
        classes: &[usize],
    ) -> Result<Tensor, TensorError> {
        let rows = if logits.shape.len() == 2 {
            logits.shape[0]
        } else {
            1
        };
        if logits.shape.len() > 2 || rows != classes.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: logits.shape.clone(),
                rhs: vec![classes.len()],
            });
        }
        let k = *logits.shape.last().unwrap();
        let mut total = 0.0;
        for (row, &c) in classes.iter().enumerate() {
            if c >= k {
                return Err(TensorError::Contract(format!(
                    "class index {c} out of range for {k} classes"
                )));
            }
            let z = &logits.values[row * k..(row + 1) * k];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[c];
        }
        let il = self.input(logits);
        let rg = self.rg(il);
        Ok(self.push(
            Op::CrossEntropyRows {
                logits: il,
                classes: classes.to_vec(),
            },
            vec![1],
            vec![total / classes.len() as f64],
            rg,
        ))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let n = a.numel() as f64;
        let loss = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let (ia, ib) = (self.input(a), self.input(b));
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Op::Mse { a: ia, b: ib }, vec![1], vec![loss], rg))
    }

    /// Reverse sweep from a scalar `output`. Errors on a second call without
    /// re-recording the forward pass.
    pub fn backward(&mut self, output: &Tensor) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let out_id = output.node_id.ok_or(TensorError::Detached)?;
        if out_id >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        if self.nodes[out_id].values.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[out_id].shape
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[out_id] = Some(vec![1.0]);

        for id in (0..=out_id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let up = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &up);
            self.grads[id] = Some(up);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].values.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn propagate(&mut self, id: NodeId, up: &[f64]) {
        let node = self.nodes[id].clone();
        match node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a].shape[1];
                // dA = dC . B^T
                let bt = transpose(&self.nodes[b].values, k, n);
                let mut da = vec![0.0; m * k];
                matmul_into(up, &bt, &mut da, m, n, k);
                // dB = A^T . dC
                let at = transpose(&self.nodes[a].values, m, k);
                let mut db = vec![0.0; k * n];
                matmul_into(&at, up, &mut db, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add { a, b } => {
                self.accumulate(a, up);
                self.accumulate_broadcast(b, up);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, up);
                let neg: Vec<f64> = up.iter().map(|&g| -g).collect();
                self.accumulate_broadcast(b, &neg);
            }
            Op::Mul { a, b } => {
                let bv = &self.nodes[b].values;
                let da: Vec<f64> = if bv.len() == 1 {
                    up.iter().map(|&g| g * bv[0]).collect()
                } else {
                    up.iter().zip(bv).map(|(&g, &y)| g * y).collect()
                };
                let av = &self.nodes[a].values;
                let db: Vec<f64> = up.iter().zip(av).map(|(&g, &x)| g * x).collect();
                self.accumulate(a, &da);
                self.accumulate_broadcast(b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = up.iter().map(|&g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddBias { a, b } => {
                self.accumulate(a, up);
                let n = self.nodes[b].values.len();
                let mut db = vec![0.0; n];
                for (i, &g) in up.iter().enumerate() {
                    db[i % n] += g;
                }
                self.accumulate(b, &db);
            }
            Op::AddChanBias { a, b } => {
                self.accumulate(a, up);
                let c = self.nodes[b].values.len();
                let plane = up.len() / c;
                let mut db = vec![0.0; c];
                for (i, &g) in up.iter().enumerate() {
                    db[i / plane] += g;
                }
                self.accumulate(b, &db);
            }
            Op::Relu { a } => {
                // Subgradient at 0 fixed to 0: gradient passes only where input > 0.
                let av = &self.nodes[a].values;
                let da: Vec<f64> = up
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = up
                    .iter()
                    .zip(&node.values)
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Clamp { a, lo, hi } => {
                let av = &self.nodes[a].values;
                let da: Vec<f64> = up
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Pow { a, p } => {
                let av = &self.nodes[a].values;
                let da: Vec<f64> = up
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| g * p * x.powf(p - 1.0))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
            } => {
                let ishape = self.nodes[input].shape.clone();
                let kshape = self.nodes[kernels].shape.clone();
                let (di, dk) = conv2d_backward(
                    up,
                    &self.nodes[input].values,
                    &self.nodes[kernels].values,
                    &ishape,
                    &kshape,
                    stride,
                    &node.shape,
                );
                self.accumulate(input, &di);
                self.accumulate(kernels, &dk);
            }
            Op::ReduceSum { a, ref axes } | Op::ReduceMean { a, ref axes } => {
                let mean = matches!(node.op, Op::ReduceMean { .. });
                let in_shape = self.nodes[a].shape.clone();
                let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
                let scale = if mean { 1.0 / count as f64 } else { 1.0 };
                let mut da = vec![0.0; self.nodes[a].values.len()];
                for (i, d) in da.iter_mut().enumerate() {
                    *d = up[reduced_index(i, &in_shape, &axes)] * scale;
                }
                self.accumulate(a, &da);
            }
            Op::ConcatRows { parts } => {
                let n = up.len() / parts.len();
                for (row, &p) in parts.iter().enumerate() {
                    self.accumulate(p, &up[row * n..(row + 1) * n]);
                }
            }
            Op::SliceRow { a, row } => {
                let d = up.len();
                let mut da = vec![0.0; self.nodes[a].values.len()];
                da[row * d..(row + 1) * d].copy_from_slice(up);
                self.accumulate(a, &da);
            }
            Op::BceWithLogits { logits, targets } => {
                let g = up[0] / targets.len() as f64;
                let lv = &self.nodes[logits].values;
                let dl: Vec<f64> = lv
                    .iter()
                    .zip(&targets)
                    .map(|(&z, &y)| g * (sigmoid(z) - y))
                    .collect();
                self.accumulate(logits, &dl);
            }
            Op::CrossEntropyRows { logits, classes } => {
                let k = *self.nodes[logits].shape.last().unwrap();
                let g = up[0] / classes.len() as f64;
                let lv = self.nodes[logits].values.clone();
                let mut dl = vec![0.0; lv.len()];
                for (row, &c) in classes.iter().enumerate() {
                    let z = &lv[row * k..(row + 1) * k];
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..k {
                        let p = (z[j] - m).exp() / denom;
                        dl[row * k + j] = g * (p - if j == c { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::Mse { a, b } => {
                let g = 2.0 * up[0] / self.nodes[a].values.len() as f64;
                let (av, bv) = (&self.nodes[a].values, &self.nodes[b].values);
                let da: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| g * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|&d| -d).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
        }
    }

    // b may be a scalar broadcast against a larger lhs.
    fn accumulate_broadcast(&mut self, b: NodeId, up: &[f64]) {
        if self.nodes[b].values.len() == 1 && up.len() > 1 {
            let s: f64 = up.iter().sum();
            self.accumulate(b, &[s]);
        } else {
            self.accumulate(b, up);
        }
    }

    /// Accumulated gradient of a tape tensor, if any flowed into it.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node_id?;
        self.grads.get(id)?.as_deref()
    }

    pub fn grad_by_id(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id)?.as_deref()
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn reduced_index(flat: usize, shape: &[usize], axes: &[usize]) -> usize {
    let mut rem = flat;
    let mut coords = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        coords[i] = rem % shape[i];
        rem /= shape[i];
    }
    let mut out = 0;
    for (i, &c) in coords.iter().enumerate() {
        if !axes.contains(&i) {
            out = out * shape[i] + c;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernels: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f64> {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input[(ci * h + iy as usize) * w + ix as usize]
                                * kernels[((co * c_in + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(
    up: &[f64],
    input: &[f64],
    kernels: &[f64],
    ishape: &[usize],
    kshape: &[usize],
    stride: usize,
    oshape: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    let (oh, ow) = (oshape[1], oshape[2]);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut di = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernels.len()];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = up[(co * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ii = (ci * h + iy as usize) * w + ix as usize;
                            let ki = ((co * c_in + ci) * kh + ky) * kw + kx;
                            di[ii] += g * kernels[ki];
                            dk[ki] += g * input[ii];
                        }
                    }
                }
            }
        }
    }
    (di, dk)
}

/// Result of comparing tape gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the tape gradient of a scalar-valued `f` at `input` against central
/// finite differences with the given step, element by element.
pub fn grad_check<F>(
    f: F,
    input: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::Config("grad_check step must be > 0".into()));
    }
    let mut probe = input.detached().with_grad();

    let mut tape = Tape::new();
    let x = tape.leaf(&probe);
    let out = f(&mut tape, &x)?;
    if !out.is_scalar() {
        return Err(TensorError::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            out.shape
        )));
    }
    tape.backward(&out)?;
    let analytic = tape
        .grad(&x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);

    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let x = tape.leaf(&t.detached());
        Ok(f(&mut tape, &x)?.values[0])
    };

    let mut max_rel_err: f64 = 0.0;
    for i in 0..probe.numel() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let fp = eval(&probe)?;
        probe.values[i] = orig - step;
        let fm = eval(&probe)?;
        probe.values[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs());
        let err = if denom > 1e-6 {
            (a - numeric).abs() / denom
        } else {
            (a - numeric).abs()
        };
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradCheckReport {
        pass: max_rel_err <= tol,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, values).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(&i2, &a).unwrap();
        assert_eq!(c.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projection_row() {
        let mut tape = Tape::new();
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(&p, &b).unwrap();
        assert_eq!(c.values, vec![5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(vec![3, 4]);
        let b = Tensor::zeros(vec![3, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![3, 4]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = randt(&mut rng, vec![4, 2]);
        let a = randt(&mut rng, vec![3, 4]);
        let report = grad_check(
            |tape, x| {
                let c = tape.matmul(x, &b)?;
                tape.reduce_sum(&c, &[0, 1])
            },
            &a,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn relu_sign_split() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(&x);
        assert_eq!(y.values, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_zero_at_zero() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0])
            .unwrap()
            .with_grad();
        let x = tape.leaf(&x);
        let y = tape.relu(&x);
        let s = tape.reduce_sum(&y, &[0]).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = Tensor::scalar(0.0);
        let y = tape.sigmoid(&x);
        assert_eq!(y.values[0], 0.5);
    }

    #[test]
    fn power_gradient_analytic() {
        let x = Tensor::scalar(2.0);
        let report = grad_check(|tape, x| Ok(tape.powf(x, 3.0)), &x, 1e-5, 1e-4).unwrap();
        assert!(report.pass);
        // dy/dx = 3 * 2^2 = 12
        let mut tape = Tape::new();
        let xl = tape.leaf(&x.clone().with_grad());
        let y = tape.powf(&xl, 3.0);
        tape.backward(&y).unwrap();
        assert!((tape.grad(&xl).unwrap()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = tape.conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.shape, vec![1, 3, 3]);
        assert_eq!(y.values, x.values);
    }

    #[test]
    fn conv2d_zero_kernel() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let k = Tensor::zeros(vec![2, 1, 3, 3]);
        let y = tape.conv2d(&x, &k, 1).unwrap();
        assert!(y.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_even_kernel_rejected() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![1, 4, 4]);
        let k = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(
            tape.conv2d(&x, &k, 1),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randt(&mut rng, vec![2, 5, 5]);
        let k = randt(&mut rng, vec![3, 2, 3, 3]);
        let report = grad_check(
            |tape, x| {
                let y = tape.conv2d(x, &k, 1)?;
                tape.reduce_sum(&y, &[0, 1, 2])
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "input grad err {}", report.max_rel_err);
        let x2 = x.clone();
        let report = grad_check(
            |tape, k| {
                let y = tape.conv2d(&x2, k, 1)?;
                tape.reduce_sum(&y, &[0, 1, 2])
            },
            &k,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "kernel grad err {}", report.max_rel_err);
    }

    #[test]
    fn reduce_mean_forward_and_backward() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = tape.reduce_mean(&x, &[0]).unwrap();
        assert_eq!(m.values, vec![2.0]);

        let mut tape = Tape::new();
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .with_grad();
        let xl = tape.leaf(&x);
        let m = tape.reduce_mean(&xl, &[0]).unwrap();
        tape.backward(&m).unwrap();
        assert_eq!(tape.grad(&xl).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn global_average_pool_of_constant_map() {
        let mut tape = Tape::new();
        let c = 3.5;
        let x = Tensor::new(vec![3, 4, 4], vec![c; 48]).unwrap();
        let pooled = tape.reduce_mean(&x, &[1, 2]).unwrap();
        assert_eq!(pooled.shape, vec![3]);
        assert_eq!(pooled.values, vec![c; 3]);
    }

    #[test]
    fn reduce_axis_out_of_range() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![3]);
        assert!(matches!(
            tape.reduce_mean(&x, &[1]),
            Err(TensorError::AxisOutOfRange { axis: 1, ndim: 1 })
        ));
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randt(&mut rng, vec![5]);
        let report = grad_check(|tape, x| tape.reduce_sum(x, &[0]), &x, 1e-5, 1e-4).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn grad_check_relu_sum_exact_away_from_zero() {
        let x = Tensor::new(vec![4], vec![-0.7, 0.3, 1.4, -2.0]).unwrap();
        let report = grad_check(
            |tape, x| {
                let y = tape.relu(x);
                tape.reduce_sum(&y, &[0])
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = Tensor::zeros(vec![3]);
        let err = grad_check(|tape, x| Ok(tape.relu(x)), &x, 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0).with_grad());
        let y = tape.powf(&x, 2.0);
        tape.backward(&y).unwrap();
        assert_eq!(tape.backward(&y), Err(TensorError::BackwardTwice));
    }

    #[test]
    fn no_grad_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let y = tape.powf(&x, 2.0);
        assert!(!y.requires_grad);
        // Scalar output with no differentiable inputs: backward succeeds, no grads.
        tape.backward(&y).unwrap();
        assert!(tape.grad(&x).is_none());
    }

    #[test]
    fn composed_mlp_bce_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w1 = randt(&mut rng, vec![8, 6]);
        let b1 = randt(&mut rng, vec![6]);
        let w2 = randt(&mut rng, vec![6, 3]);
        let targets = Tensor::new(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let x = randt(&mut rng, vec![1, 8]);
        let report = grad_check(
            |tape, x| {
                let h = tape.matmul(x, &w1)?;
                let h = tape.add_bias(&h, &b1)?;
                let h = tape.relu(&h);
                let logits = tape.matmul(&h, &w2)?;
                tape.bce_with_logits(&logits, &targets)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_upstream_propagates_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let y = tape.powf(&x, 2.0);
        let s = tape.reduce_sum(&y, &[0]).unwrap();
        let z = tape.scale(&s, 0.0).unwrap();
        tape.backward(&z).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randt(&mut rng, vec![4, 4]);
        let b = randt(&mut rng, vec![4, 4]);
        let run = || {
            let mut tape = Tape::new();
            let c = tape.matmul(&a, &b).unwrap();
            let s = tape.sigmoid(&c);
            s.values
        };
        assert_eq!(run(), run());
    }
}

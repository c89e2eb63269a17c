//! Dense double-precision arrays and a recording reverse-mode autodiff graph.
//!
//! The op set is deliberately small: exactly what a convolutional frame
//! classifier needs. Convolution is cross-correlation (no kernel flip),
//! stride and padding in time are fixed at 1 and 0, and the only broadcast
//! is the bias add over (T, F).

use crate::error::{Error, Result};

/// Dense row-major array of f64 with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack of mixed shapes {:?} vs {:?}",
                    first.shape, item.shape
                )));
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Copies out the `index`-th slice along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::Shape("index_axis0 on scalar".into()));
        }
        let n = self.shape[0];
        if index >= n {
            return Err(Error::Shape(format!(
                "index {index} out of range for axis of {n}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Tensor::new(self.shape[1..].to_vec(), data)
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::Shape(format!(
                "{what} must be rank 3, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "{what} must be rank 2, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// One recorded operation; inputs always precede the output node.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        dilation_t: usize,
        stride_f: usize,
        pad_f: usize,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    Pointwise {
        input: NodeId,
        weights: NodeId,
        collapse_freq: bool,
    },
    Relu {
        input: NodeId,
    },
    FreqMaxPool {
        input: NodeId,
        window: usize,
    },
    TimeMajor {
        input: NodeId,
    },
    LogSoftmax {
        input: NodeId,
        axis: usize,
    },
    Nll {
        input: NodeId,
        target: usize,
    },
    NllRows {
        input: NodeId,
        targets: Vec<usize>,
    },
    Row {
        input: NodeId,
        index: usize,
    },
    Sum {
        input: NodeId,
    },
    Mean {
        input: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    MeanMany {
        inputs: Vec<NodeId>,
    },
}

/// Recording computation graph: applying an operation appends a node, and
/// `backward` replays the record in reverse to accumulate adjoints.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Inserts a tensor as a leaf node.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Inserts a leaf that will never need a gradient (e.g. input windows).
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn node(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad()
    }

    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id.0].item()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, t: Tensor, op: Op) -> NodeId {
        self.nodes.push(t);
        self.ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// 2-D convolution (cross-correlation) over a [C_in, T, F] input with a
    /// [C_out, C_in, k_t, k_f] kernel. Time: stride 1, no padding, dilation
    /// `dilation_t`. Frequency: stride `stride_f`, zero padding `pad_f`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        dilation_t: usize,
        stride_f: usize,
        pad_f: usize,
    ) -> Result<NodeId> {
        let (c_in, t_in, f_in) = self.nodes[input.0].dims3("conv2d input")?;
        let kshape = self.nodes[kernel.0].shape();
        if kshape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be rank 4, got {kshape:?}"
            )));
        }
        let (c_out, kc_in, k_t, k_f) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c_in}, kernel expects {kc_in}"
            )));
        }
        if dilation_t == 0 || stride_f == 0 {
            return Err(Error::Shape(
                "conv2d dilation and stride must be >= 1".into(),
            ));
        }
        let needed = (k_t - 1) * dilation_t + 1;
        if t_in < needed {
            return Err(Error::WindowTooShort { needed, got: t_in });
        }
        if f_in + 2 * pad_f < k_f {
            return Err(Error::Shape(format!(
                "frequency extent {f_in} (+2*{pad_f} pad) smaller than kernel {k_f}"
            )));
        }
        let t_out = t_in - (k_t - 1) * dilation_t;
        let f_out = (f_in + 2 * pad_f - k_f) / stride_f + 1;

        let x = self.nodes[input.0].data();
        let k = self.nodes[kernel.0].data();
        let mut out = vec![0.0; c_out * t_out * f_out];
        for o in 0..c_out {
            for i in 0..c_in {
                let kplane = &k[(o * c_in + i) * k_t * k_f..][..k_t * k_f];
                let xplane = &x[i * t_in * f_in..][..t_in * f_in];
                for t in 0..t_out {
                    let orow = &mut out[(o * t_out + t) * f_out..][..f_out];
                    for kt in 0..k_t {
                        let xrow = &xplane[(t + kt * dilation_t) * f_in..][..f_in];
                        let krow = &kplane[kt * k_f..][..k_f];
                        for (f, slot) in orow.iter_mut().enumerate() {
                            let f0 = (f * stride_f) as isize - pad_f as isize;
                            let lo = (-f0).max(0) as usize;
                            let hi = k_f.min((f_in as isize - f0).max(0) as usize);
                            let mut acc = 0.0;
                            for kf in lo..hi {
                                acc += xrow[(f0 + kf as isize) as usize] * krow[kf];
                            }
                            *slot += acc;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![c_out, t_out, f_out], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                dilation_t,
                stride_f,
                pad_f,
            },
        ))
    }

    /// Adds a per-channel bias over (T, F): the only broadcast in the core.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, t, f) = self.nodes[input.0].dims3("bias_add input")?;
        let bshape = self.nodes[bias.0].shape();
        if bshape != [c] {
            return Err(Error::Shape(format!(
                "bias shape {bshape:?} does not match {c} channels"
            )));
        }
        let x = self.nodes[input.0].data();
        let b = self.nodes[bias.0].data();
        let mut out = x.to_vec();
        for ch in 0..c {
            let bv = b[ch];
            for v in &mut out[ch * t * f..(ch + 1) * t * f] {
                *v += bv;
            }
        }
        let t = Tensor::new(vec![c, t, f], out)?;
        Ok(self.push(t, Op::BiasAdd { input, bias }))
    }

    /// Fully connected layer applied independently at every time step.
    /// With `collapse_freq` the weights span the whole frequency extent
    /// ([C_out, C_in*F] -> output [C_out, T, 1]); otherwise they are 1x1
    /// ([C_out, C_in] -> output [C_out, T, F]).
    pub fn pointwise(
        &mut self,
        input: NodeId,
        weights: NodeId,
        collapse_freq: bool,
    ) -> Result<NodeId> {
        let (c_in, t_len, f_in) = self.nodes[input.0].dims3("pointwise input")?;
        let (c_out, cols) = self.nodes[weights.0].dims2("pointwise weights")?;
        let expected = if collapse_freq { c_in * f_in } else { c_in };
        if cols != expected {
            return Err(Error::Shape(format!(
                "pointwise weights have {cols} columns, input needs {expected} \
                 (C_in={c_in}, F={f_in}, collapse_freq={collapse_freq})"
            )));
        }
        let x = self.nodes[input.0].data();
        let w = self.nodes[weights.0].data();
        let (out, shape) = if collapse_freq {
            let mut out = vec![0.0; c_out * t_len];
            for o in 0..c_out {
                let wrow = &w[o * cols..][..cols];
                for t in 0..t_len {
                    let mut acc = 0.0;
                    for i in 0..c_in {
                        let xrow = &x[(i * t_len + t) * f_in..][..f_in];
                        let wseg = &wrow[i * f_in..][..f_in];
                        for (xv, wv) in xrow.iter().zip(wseg) {
                            acc += xv * wv;
                        }
                    }
                    out[o * t_len + t] = acc;
                }
            }
            (out, vec![c_out, t_len, 1])
        } else {
            let mut out = vec![0.0; c_out * t_len * f_in];
            for o in 0..c_out {
                let wrow = &w[o * cols..][..cols];
                let orow = &mut out[o * t_len * f_in..][..t_len * f_in];
                for (i, &wv) in wrow.iter().enumerate() {
                    let xplane = &x[i * t_len * f_in..][..t_len * f_in];
                    for (ov, xv) in orow.iter_mut().zip(xplane) {
                        *ov += wv * xv;
                    }
                }
            }
            (out, vec![c_out, t_len, f_in])
        };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Pointwise {
                input,
                weights,
                collapse_freq,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let src = &self.nodes[input.0];
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor {
            shape: src.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Relu { input })
    }

    /// Non-overlapping max pool over frequency, ceil mode (a narrower final
    /// window is allowed, so the extent never collapses to zero).
    pub fn freq_max_pool(&mut self, input: NodeId, window: usize) -> Result<NodeId> {
        let (c, t_len, f_in) = self.nodes[input.0].dims3("freq_max_pool input")?;
        if window == 0 {
            return Err(Error::Shape("pool window must be >= 1".into()));
        }
        let f_out = f_in.div_ceil(window);
        let x = self.nodes[input.0].data();
        let mut out = vec![0.0; c * t_len * f_out];
        for ct in 0..c * t_len {
            let xrow = &x[ct * f_in..][..f_in];
            let orow = &mut out[ct * f_out..][..f_out];
            for (j, slot) in orow.iter_mut().enumerate() {
                let seg = &xrow[j * window..f_in.min((j + 1) * window)];
                *slot = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let t = Tensor::new(vec![c, t_len, f_out], out)?;
        Ok(self.push(t, Op::FreqMaxPool { input, window }))
    }

    /// Rearranges a fully collapsed [C, T, 1] map into time-major [T, C] rows.
    pub fn time_major(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, t_len, f) = self.nodes[input.0].dims3("time_major input")?;
        if f != 1 {
            return Err(Error::Shape(format!(
                "time_major requires a collapsed frequency axis, got F={f}"
            )));
        }
        let x = self.nodes[input.0].data();
        let mut out = vec![0.0; t_len * c];
        for ch in 0..c {
            for t in 0..t_len {
                out[t * c + ch] = x[ch * t_len + t];
            }
        }
        let t = Tensor::new(vec![t_len, c], out)?;
        Ok(self.push(t, Op::TimeMajor { input }))
    }

    pub fn log_softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[input.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let lanes = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.nodes[input.0].data();
        let mut out = vec![0.0; x.len()];
        for ou in 0..outer {
            for inn in 0..inner {
                let base = ou * lanes * inner + inn;
                let mut max = f64::NEG_INFINITY;
                for j in 0..lanes {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..lanes {
                    sum += (x[base + j * inner] - max).exp();
                }
                let lse = max + sum.ln();
                for j in 0..lanes {
                    out[base + j * inner] = x[base + j * inner] - lse;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::LogSoftmax { input, axis }))
    }

    /// Negative log-likelihood of one target from a log-probability vector.
    pub fn nll(&mut self, log_probs: NodeId, target: usize) -> Result<NodeId> {
        let shape = self.nodes[log_probs.0].shape();
        if shape.len() != 1 {
            return Err(Error::Shape(format!(
                "nll expects a rank-1 input, got {shape:?}"
            )));
        }
        let s = shape[0];
        if target >= s {
            return Err(Error::LabelOutOfRange {
                label: target,
                num_targets: s,
            });
        }
        let v = -self.nodes[log_probs.0].data()[target];
        Ok(self.push(
            Tensor::scalar(v),
            Op::Nll {
                input: log_probs,
                target,
            },
        ))
    }

    /// Per-row negative log-likelihood over [R, S] log-probabilities.
    pub fn nll_rows(&mut self, log_probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, s) = self.nodes[log_probs.0].dims2("nll_rows input")?;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {rows} posterior rows",
                targets.len()
            )));
        }
        for &target in targets {
            if target >= s {
                return Err(Error::LabelOutOfRange {
                    label: target,
                    num_targets: s,
                });
            }
        }
        let x = self.nodes[log_probs.0].data();
        let out: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(r, &y)| -x[r * s + y])
            .collect();
        let t = Tensor::new(vec![rows], out)?;
        Ok(self.push(
            t,
            Op::NllRows {
                input: log_probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Copies row `index` out of a rank-2 tensor.
    pub fn row(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let (rows, cols) = self.nodes[input.0].dims2("row input")?;
        if index >= rows {
            return Err(Error::Shape(format!(
                "row {index} out of range for {rows} rows"
            )));
        }
        let data = self.nodes[input.0].data()[index * cols..(index + 1) * cols].to_vec();
        let t = Tensor::new(vec![cols], data)?;
        Ok(self.push(t, Op::Row { input, index }))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = self.nodes[input.0].data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum { input })
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let n = self.nodes[input.0].numel();
        let v = self.nodes[input.0].data().iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(v), Op::Mean { input })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.nodes[lhs.0].shape() != self.nodes[rhs.0].shape() {
            return Err(Error::Shape(format!(
                "mul of mismatched shapes {:?} vs {:?}",
                self.nodes[lhs.0].shape(),
                self.nodes[rhs.0].shape()
            )));
        }
        let data = self.nodes[lhs.0]
            .data()
            .iter()
            .zip(self.nodes[rhs.0].data())
            .map(|(a, b)| a * b)
            .collect();
        let t = Tensor::new(self.nodes[lhs.0].shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { lhs, rhs }))
    }

    /// Mean of several scalar nodes (the minibatch reduction).
    pub fn mean_many(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Shape("mean_many over zero inputs".into()));
        }
        for &id in inputs {
            if self.nodes[id.0].numel() != 1 {
                return Err(Error::Shape("mean_many expects scalar inputs".into()));
            }
        }
        let v = inputs
            .iter()
            .map(|&id| self.nodes[id.0].data()[0])
            .sum::<f64>()
            / inputs.len() as f64;
        Ok(self.push(
            Tensor::scalar(v),
            Op::MeanMany {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// True when a node's gradient feeds anything: interior nodes always do,
    /// leaves only when flagged. Lets conv skip the input adjoint for windows.
    fn wants_grad(&self, id: NodeId) -> bool {
        !matches!(self.ops[id.0], Op::Leaf) || self.nodes[id.0].requires_grad()
    }

    /// Accumulates d(loss)/d(node) into every node's grad buffer. Repeated
    /// calls without `zero_grads` accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.numel()]).collect();
        adj[loss.0][0] = 1.0;

        for idx in (0..self.ops.len()).rev() {
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    dilation_t,
                    stride_f,
                    pad_f,
                } => {
                    let (input, kernel) = (*input, *kernel);
                    let (dilation_t, stride_f, pad_f) = (*dilation_t, *stride_f, *pad_f);
                    let (c_in, t_in, f_in) = self.nodes[input.0].dims3("conv2d input")?;
                    let kshape = self.nodes[kernel.0].shape();
                    let (c_out, k_t, k_f) = (kshape[0], kshape[2], kshape[3]);
                    let t_out = t_in - (k_t - 1) * dilation_t;
                    let f_out = (f_in + 2 * pad_f - k_f) / stride_f + 1;
                    let want_dx = self.wants_grad(input);
                    let want_dk = self.wants_grad(kernel);
                    if !want_dx && !want_dk {
                        continue;
                    }
                    let gout = std::mem::take(&mut adj[idx]);
                    let x = self.nodes[input.0].data();
                    let k = self.nodes[kernel.0].data();
                    // Split the adjoint buffers out so x/k stay borrowable.
                    let mut dx = if want_dx {
                        std::mem::take(&mut adj[input.0])
                    } else {
                        vec![]
                    };
                    let mut dk = if want_dk {
                        std::mem::take(&mut adj[kernel.0])
                    } else {
                        vec![]
                    };
                    for o in 0..c_out {
                        for i in 0..c_in {
                            let kbase = (o * c_in + i) * k_t * k_f;
                            let xbase = i * t_in * f_in;
                            for t in 0..t_out {
                                let grow = &gout[(o * t_out + t) * f_out..][..f_out];
                                for kt in 0..k_t {
                                    let xoff = xbase + (t + kt * dilation_t) * f_in;
                                    let koff = kbase + kt * k_f;
                                    for (f, &g) in grow.iter().enumerate() {
                                        if g == 0.0 {
                                            continue;
                                        }
                                        let f0 = (f * stride_f) as isize - pad_f as isize;
                                        let lo = (-f0).max(0) as usize;
                                        let hi = k_f.min((f_in as isize - f0).max(0) as usize);
                                        for kf in lo..hi {
                                            let xi = xoff + (f0 + kf as isize) as usize;
                                            if want_dx {
                                                dx[xi] += g * k[koff + kf];
                                            }
                                            if want_dk {
                                                dk[koff + kf] += g * x[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_dx {
                        adj[input.0] = dx;
                    }
                    if want_dk {
                        adj[kernel.0] = dk;
                    }
                    adj[idx] = gout;
                }
                Op::BiasAdd { input, bias } => {
                    let (input, bias) = (*input, *bias);
                    let (c, t, f) = self.nodes[input.0].dims3("bias_add input")?;
                    let gout = std::mem::take(&mut adj[idx]);
                    for (gv, dv) in gout.iter().zip(adj[input.0].iter_mut()) {
                        *dv += gv;
                    }
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for gv in &gout[ch * t * f..(ch + 1) * t * f] {
                            acc += gv;
                        }
                        adj[bias.0][ch] += acc;
                    }
                    adj[idx] = gout;
                }
                Op::Pointwise {
                    input,
                    weights,
                    collapse_freq,
                } => {
                    let (input, weights, collapse_freq) = (*input, *weights, *collapse_freq);
                    let (c_in, t_len, f_in) = self.nodes[input.0].dims3("pointwise input")?;
                    let (c_out, cols) = self.nodes[weights.0].dims2("pointwise weights")?;
                    let want_dx = self.wants_grad(input);
                    let gout = std::mem::take(&mut adj[idx]);
                    let x = self.nodes[input.0].data();
                    let w = self.nodes[weights.0].data();
                    let mut dx = if want_dx {
                        std::mem::take(&mut adj[input.0])
                    } else {
                        vec![]
                    };
                    let mut dw = std::mem::take(&mut adj[weights.0]);
                    if collapse_freq {
                        for o in 0..c_out {
                            let wrow = &w[o * cols..][..cols];
                            let dwrow = &mut dw[o * cols..][..cols];
                            for t in 0..t_len {
                                let g = gout[o * t_len + t];
                                if g == 0.0 {
                                    continue;
                                }
                                for i in 0..c_in {
                                    let xoff = (i * t_len + t) * f_in;
                                    for f in 0..f_in {
                                        dwrow[i * f_in + f] += g * x[xoff + f];
                                        if want_dx {
                                            dx[xoff + f] += g * wrow[i * f_in + f];
                                        }
                                    }
                                }
                            }
                        }
                    } else {
                        for o in 0..c_out {
                            let wrow = &w[o * cols..][..cols];
                            let dwrow = &mut dw[o * cols..][..cols];
                            let grow = &gout[o * t_len * f_in..][..t_len * f_in];
                            for i in 0..c_in {
                                let xplane = &x[i * t_len * f_in..][..t_len * f_in];
                                let mut acc = 0.0;
                                for (gv, xv) in grow.iter().zip(xplane) {
                                    acc += gv * xv;
                                }
                                dwrow[i] += acc;
                                if want_dx {
                                    let wv = wrow[i];
                                    let dxplane = &mut dx[i * t_len * f_in..][..t_len * f_in];
                                    for (dv, gv) in dxplane.iter_mut().zip(grow) {
                                        *dv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                    if want_dx {
                        adj[input.0] = dx;
                    }
                    adj[weights.0] = dw;
                    adj[idx] = gout;
                }
                Op::Relu { input } => {
                    let input = *input;
                    let gout = std::mem::take(&mut adj[idx]);
                    let x = self.nodes[input.0].data();
                    for ((dv, gv), xv) in adj[input.0].iter_mut().zip(&gout).zip(x) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                    adj[idx] = gout;
                }
                Op::FreqMaxPool { input, window } => {
                    let (input, window) = (*input, *window);
                    let (c, t_len, f_in) = self.nodes[input.0].dims3("freq_max_pool input")?;
                    let f_out = f_in.div_ceil(window);
                    let gout = std::mem::take(&mut adj[idx]);
                    let x = self.nodes[input.0].data();
                    let mut dx = std::mem::take(&mut adj[input.0]);
                    for ct in 0..c * t_len {
                        let xrow = &x[ct * f_in..][..f_in];
                        for j in 0..f_out {
                            let lo = j * window;
                            let hi = f_in.min(lo + window);
                            let mut best = lo;
                            for f in lo + 1..hi {
                                if xrow[f] > xrow[best] {
                                    best = f;
                                }
                            }
                            dx[ct * f_in + best] += gout[ct * f_out + j];
                        }
                    }
                    adj[input.0] = dx;
                    adj[idx] = gout;
                }
                Op::TimeMajor { input } => {
                    let input = *input;
                    let (c, t_len, _) = self.nodes[input.0].dims3("time_major input")?;
                    let gout = std::mem::take(&mut adj[idx]);
                    for ch in 0..c {
                        for t in 0..t_len {
                            adj[input.0][ch * t_len + t] += gout[t * c + ch];
                        }
                    }
                    adj[idx] = gout;
                }
                Op::LogSoftmax { input, axis } => {
                    let (input, axis) = (*input, *axis);
                    let shape = self.nodes[idx].shape();
                    let lanes = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let gout = std::mem::take(&mut adj[idx]);
                    let y = self.nodes[idx].data();
                    for ou in 0..outer {
                        for inn in 0..inner {
                            let base = ou * lanes * inner + inn;
                            let mut gsum = 0.0;
                            for j in 0..lanes {
                                gsum += gout[base + j * inner];
                            }
                            for j in 0..lanes {
                                let pos = base + j * inner;
                                adj[input.0][pos] += gout[pos] - y[pos].exp() * gsum;
                            }
                        }
                    }
                    adj[idx] = gout;
                }
                Op::Nll { input, target } => {
                    let g = adj[idx][0];
                    adj[input.0][*target] -= g;
                }
                Op::NllRows { input, targets } => {
                    let input = *input;
                    let s = self.nodes[input.0].shape()[1];
                    let gout = std::mem::take(&mut adj[idx]);
                    for (r, &y) in targets.iter().enumerate() {
                        adj[input.0][r * s + y] -= gout[r];
                    }
                    adj[idx] = gout;
                }
                Op::Row { input, index } => {
                    let (input, index) = (*input, *index);
                    let cols = self.nodes[input.0].shape()[1];
                    let gout = std::mem::take(&mut adj[idx]);
                    for (j, gv) in gout.iter().enumerate() {
                        adj[input.0][index * cols + j] += gv;
                    }
                    adj[idx] = gout;
                }
                Op::Sum { input } => {
                    let g = adj[idx][0];
                    if g != 0.0 {
                        for dv in adj[input.0].iter_mut() {
                            *dv += g;
                        }
                    }
                }
                Op::Mean { input } => {
                    let n = self.nodes[input.0].numel() as f64;
                    let g = adj[idx][0] / n;
                    if g != 0.0 {
                        for dv in adj[input.0].iter_mut() {
                            *dv += g;
                        }
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    let gout = std::mem::take(&mut adj[idx]);
                    let a: Vec<f64> = self.nodes[lhs.0].data().to_vec();
                    let b: Vec<f64> = self.nodes[rhs.0].data().to_vec();
                    for ((dv, gv), bv) in adj[lhs.0].iter_mut().zip(&gout).zip(&b) {
                        *dv += gv * bv;
                    }
                    for ((dv, gv), av) in adj[rhs.0].iter_mut().zip(&gout).zip(&a) {
                        *dv += gv * av;
                    }
                    adj[idx] = gout;
                }
                Op::MeanMany { inputs } => {
                    let g = adj[idx][0] / inputs.len() as f64;
                    let inputs = inputs.clone();
                    for id in inputs {
                        adj[id.0][0] += g;
                    }
                }
            }
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            match node.grad.as_mut() {
                Some(g) => {
                    for (gv, av) in g.iter_mut().zip(&a) {
                        *gv += av;
                    }
                }
                None => node.grad = Some(a),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of a scalar-valued function at x.
    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            grad[i] = (up - down) / (2.0 * step);
        }
        grad
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv_time_extent_dilation_1() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 7, 1]));
        let k = g.leaf(Tensor::zeros([1, 1, 3, 1]));
        let y = g.conv2d(x, k, 1, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 1]);
    }

    #[test]
    fn conv_time_extent_dilation_3() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 7, 1]));
        let k = g.leaf(Tensor::zeros([1, 1, 3, 1]));
        let y = g.conv2d(x, k, 3, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
    }

    #[test]
    fn conv_all_ones_sums_taps() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled([1, 5, 1], 1.0));
        let k = g.leaf(Tensor::filled([1, 1, 3, 1], 1.0));
        let y = g.conv2d(x, k, 1, 1, 0).unwrap();
        assert_eq!(g.data(y), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn conv_rejects_short_window_and_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 4, 1]));
        let k = g.leaf(Tensor::zeros([1, 1, 3, 1]));
        match g.conv2d(x, k, 2, 1, 0) {
            Err(Error::WindowTooShort { needed: 5, got: 4 }) => {}
            other => panic!("expected WindowTooShort, got {other:?}"),
        }
        let k2 = g.leaf(Tensor::zeros([1, 2, 3, 1]));
        assert!(matches!(g.conv2d(x, k2, 1, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xdata = rand_vec(&mut rng, 2 * 9 * 4);
        let kdata = rand_vec(&mut rng, 3 * 2 * 3 * 2);

        let run = |xd: &[f64], kd: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(
                Tensor::new([2, 9, 4], xd.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let k = g.leaf(
                Tensor::new([3, 2, 3, 2], kd.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let y = g.conv2d(x, k, 2, 1, 1).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            (
                g.item(loss),
                g.grad(x).unwrap().to_vec(),
                g.grad(k).unwrap().to_vec(),
            )
        };
        let (_, dx, dk) = run(&xdata, &kdata);

        let fd_x = finite_diff(|xd| run(xd, &kdata).0, &xdata, 1e-6);
        let fd_k = finite_diff(|kd| run(&xdata, kd).0, &kdata, 1e-6);
        assert!(
            max_rel_err(&dx, &fd_x) < 1e-5,
            "input grad err {}",
            max_rel_err(&dx, &fd_x)
        );
        assert!(
            max_rel_err(&dk, &fd_k) < 1e-5,
            "kernel grad err {}",
            max_rel_err(&dk, &fd_k)
        );
    }

    #[test]
    fn conv_extent_formula_over_grid() {
        for t in 1..24usize {
            for k_t in 1..5usize {
                for d in 1..4usize {
                    if t < (k_t - 1) * d + 1 {
                        continue;
                    }
                    let mut g = Graph::new();
                    let x = g.leaf(Tensor::zeros([1, t, 2]));
                    let k = g.leaf(Tensor::zeros([1, 1, k_t, 1]));
                    let y = g.conv2d(x, k, d, 1, 0).unwrap();
                    assert_eq!(g.shape(y)[1], t - (k_t - 1) * d);
                }
            }
        }
    }

    #[test]
    fn pointwise_identity_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xdata = rand_vec(&mut rng, 3 * 6 * 4);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([3, 6, 4], xdata.clone()).unwrap());
        let w = g.leaf(Tensor::new([3, 3], eye).unwrap());
        let y = g.pointwise(x, w, false).unwrap();
        assert_eq!(g.data(y), xdata.as_slice());
    }

    #[test]
    fn pointwise_collapse_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([4, 10, 3]));
        let w = g.leaf(Tensor::zeros([8, 12]));
        let y = g.pointwise(x, w, true).unwrap();
        assert_eq!(g.shape(y), &[8, 10, 1]);

        let bad = g.leaf(Tensor::zeros([8, 11]));
        assert!(matches!(g.pointwise(x, bad, true), Err(Error::Shape(_))));
    }

    #[test]
    fn pointwise_equals_reshaped_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xdata = rand_vec(&mut rng, 4 * 6 * 3);
        let wdata = rand_vec(&mut rng, 5 * 12);

        // Collapsing pointwise vs an explicit 1xF convolution.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([4, 6, 3], xdata.clone()).unwrap());
        let w = g.leaf(Tensor::new([5, 12], wdata.clone()).unwrap());
        let y_pw = g.pointwise(x, w, true).unwrap();
        let k = g.leaf(Tensor::new([5, 4, 1, 3], wdata.clone()).unwrap());
        let y_conv = g.conv2d(x, k, 1, 1, 0).unwrap();
        let max_diff = g
            .data(y_pw)
            .iter()
            .zip(g.data(y_conv))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_diff < 1e-12,
            "collapsing pointwise vs 1xF conv diff {max_diff}"
        );

        // 1x1 pointwise vs a 1x1 convolution.
        let w1data = rand_vec(&mut rng, 5 * 4);
        let w1 = g.leaf(Tensor::new([5, 4], w1data.clone()).unwrap());
        let y_pw1 = g.pointwise(x, w1, false).unwrap();
        let k1 = g.leaf(Tensor::new([5, 4, 1, 1], w1data).unwrap());
        let y_conv1 = g.conv2d(x, k1, 1, 1, 0).unwrap();
        let max_diff = g
            .data(y_pw1)
            .iter()
            .zip(g.data(y_conv1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "1x1 pointwise vs conv diff {max_diff}");
    }

    #[test]
    fn pointwise_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xdata = rand_vec(&mut rng, 3 * 5 * 2);
        let wdata = rand_vec(&mut rng, 4 * 6);
        let run = |xd: &[f64], wd: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(
                Tensor::new([3, 5, 2], xd.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let w = g.leaf(
                Tensor::new([4, 6], wd.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let y = g.pointwise(x, w, true).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            (
                g.item(loss),
                g.grad(x).unwrap().to_vec(),
                g.grad(w).unwrap().to_vec(),
            )
        };
        let (_, dx, dw) = run(&xdata, &wdata);
        let fd_x = finite_diff(|xd| run(xd, &wdata).0, &xdata, 1e-6);
        let fd_w = finite_diff(|wd| run(&xdata, wd).0, &wdata, 1e-6);
        assert!(max_rel_err(&dx, &fd_x) < 1e-5);
        assert!(max_rel_err(&dw, &fd_w) < 1e-5);
    }

    #[test]
    fn log_softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled([4], 0.7));
        let y = g.log_softmax(x, 0).unwrap();
        for &v in g.data(y) {
            assert_close(v, (1.0f64 / 4.0).ln(), 1e-12);
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = rand_vec(&mut rng, 6 * 5)
            .iter()
            .map(|v| v * 8.0)
            .collect::<Vec<_>>();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([6, 5], data).unwrap());
        let y = g.log_softmax(x, 1).unwrap();
        for r in 0..6 {
            let lse: f64 = g.data(y)[r * 5..(r + 1) * 5].iter().map(|v| v.exp()).sum();
            assert_close(lse, 1.0, 1e-9);
        }
    }

    #[test]
    fn nll_certain_prediction_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([3], vec![0.0, -30.0, -30.0]).unwrap());
        let y = g.nll(x, 0).unwrap();
        assert_eq!(g.item(y), 0.0);
        assert!(matches!(
            g.nll(x, 3),
            Err(Error::LabelOutOfRange {
                label: 3,
                num_targets: 3
            })
        ));
    }

    #[test]
    fn nll_log_softmax_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = rand_vec(&mut rng, 5);
        let target = 2;
        let run = |ld: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new([5], ld.to_vec()).unwrap().with_requires_grad());
            let lp = g.log_softmax(x, 0).unwrap();
            let loss = g.nll(lp, target).unwrap();
            g.backward(loss).unwrap();
            (g.item(loss), g.grad(x).unwrap().to_vec())
        };
        let (_, dx) = run(&logits);

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for (i, &g_i) in dx.iter().enumerate() {
            let softmax = (logits[i] - max).exp() / z;
            let expected = softmax - if i == target { 1.0 } else { 0.0 };
            assert_close(g_i, expected, 1e-10);
        }
        let fd = finite_diff(|ld| run(ld).0, &logits, 1e-6);
        assert!(max_rel_err(&dx, &fd) < 1e-5);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new([4], vec![9.0, -2.0, 0.5, 3.0])
                .unwrap()
                .with_requires_grad(),
        );
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new([3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .with_requires_grad(),
        );
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([3]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_accumulates_and_reset_restores() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new([3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .with_requires_grad(),
        );
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let doubled: Vec<f64> = first.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), doubled.as_slice());

        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn unreachable_nodes_have_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new([2], vec![1.0, 2.0])
                .unwrap()
                .with_requires_grad(),
        );
        let unused = g.leaf(
            Tensor::new([2], vec![5.0, 6.0])
                .unwrap()
                .with_requires_grad(),
        );
        let dead_branch = g.mul(unused, unused).unwrap();
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(dead_branch).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn three_layer_net_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let xdata = rand_vec(&mut rng, 2 * 9 * 3);
        let k1 = rand_vec(&mut rng, 3 * 2 * 3 * 3);
        let k2 = rand_vec(&mut rng, 3 * 3 * 3);
        let w = rand_vec(&mut rng, 4 * 9);
        let b = rand_vec(&mut rng, 3);

        let run = |params: &[f64]| -> (f64, Vec<f64>) {
            let (p1, rest) = params.split_at(k1.len());
            let (p2, rest) = rest.split_at(k2.len());
            let (pw, pb) = rest.split_at(w.len());
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([2, 9, 3], xdata.clone()).unwrap());
            let kk1 = g.leaf(
                Tensor::new([3, 2, 3, 3], p1.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let kk2 = g.leaf(
                Tensor::new([3, 3, 3, 1], p2.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let ww = g.leaf(
                Tensor::new([4, 9], pw.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let bb = g.leaf(Tensor::new([3], pb.to_vec()).unwrap().with_requires_grad());
            let h1 = g.conv2d(x, kk1, 1, 1, 1).unwrap();
            let h1b = g.bias_add(h1, bb).unwrap();
            let h1r = g.relu(h1b);
            let h2 = g.conv2d(h1r, kk2, 2, 1, 0).unwrap();
            let h2r = g.relu(h2);
            let h3 = g.pointwise(h2r, ww, true).unwrap();
            let tm = g.time_major(h3).unwrap();
            let lp = g.log_softmax(tm, 1).unwrap();
            let nll = g.nll_rows(lp, &[1, 3, 0]).unwrap();
            let loss = g.mean(nll);
            g.backward(loss).unwrap();
            let mut grads = Vec::new();
            for id in [kk1, kk2, ww, bb] {
                grads.extend_from_slice(g.grad(id).unwrap());
            }
            (g.item(loss), grads)
        };

        let mut params = Vec::new();
        params.extend_from_slice(&k1);
        params.extend_from_slice(&k2);
        params.extend_from_slice(&w);
        params.extend_from_slice(&b);
        let (_, analytic) = run(&params);
        let numeric = finite_diff(|p| run(p).0, &params, 1e-6);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "3-layer net grad err {err}");
    }

    #[test]
    fn freq_max_pool_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(
                [1, 2, 5],
                vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, -5.0, -2.0, -0.5, -3.0],
            )
            .unwrap()
            .with_requires_grad(),
        );
        let y = g.freq_max_pool(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 3]);
        assert_eq!(g.data(y), &[5.0, 2.0, 3.0, -1.0, -0.5, -3.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(
            g.grad(x).unwrap(),
            &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn time_major_round_trip_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xdata = rand_vec(&mut rng, 3 * 4);
        let run = |xd: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(
                Tensor::new([3, 4, 1], xd.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let tm = g.time_major(x).unwrap();
            let sq = g.mul(tm, tm).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            (g.item(loss), g.grad(x).unwrap().to_vec())
        };
        let (_, dx) = run(&xdata);
        let fd = finite_diff(|xd| run(xd).0, &xdata, 1e-6);
        assert!(max_rel_err(&dx, &fd) < 1e-5);
    }

    #[test]
    fn mean_many_averages_scalars() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0).with_requires_grad());
        let b = g.leaf(Tensor::scalar(5.0).with_requires_grad());
        let m = g.mean_many(&[a, b]).unwrap();
        assert_eq!(g.item(m), 3.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.5]);
        assert_eq!(g.grad(b).unwrap(), &[0.5]);
    }
}

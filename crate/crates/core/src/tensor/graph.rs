use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    LogSoftmax {
        input: Var,
        probs: Vec<f64>,
    },
    Log {
        input: Var,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        // flat source indices when the operands are broadcast
        index: Option<(Vec<usize>, Vec<usize>)>,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Select {
        input: Var,
        start: usize,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    SpatialMean {
        input: Var,
    },
    ChannelMean {
        input: Var,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation tape. Nodes are appended in creation order, which is a valid
/// topological order; `backward` walks it in reverse exactly once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn split_nc(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape.get(1).copied().unwrap_or(1);
    let rest = shape.iter().skip(2).product();
    (n, c, rest)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present when it was created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn conv_geom(
        &self,
        name: &str,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        transposed: bool,
    ) -> Result<([usize; 5], [usize; 5])> {
        let x = self.value(input).dims5().map_err(|e| Error::shape(format!("{name} input: {e}")))?;
        let w = self.value(weight).dims5().map_err(|e| Error::shape(format!("{name} weight: {e}")))?;
        let (w_in, w_out) = if transposed { (w[0], w[1]) } else { (w[1], w[0]) };
        if x[1] != w_in {
            return Err(Error::shape(format!(
                "{name}: input channels (Cin={}) do not match weight in-channels (Cin={w_in})",
                x[1]
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [w_out] {
                return Err(Error::shape(format!(
                    "{name}: bias shape {bs:?} does not match output channels (Cout={w_out})"
                )));
            }
        }
        Ok((x, w))
    }

    /// 3-d cross-correlation with zero padding. Weight layout `[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (x, w) = self.conv_geom("conv3d", input, weight, bias, false)?;
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = kernels::conv_output_len(x[2 + a], w[2 + a], stride[a], pad[a]).ok_or_else(|| {
                Error::shape(format!(
                    "conv3d: kernel {} does not fit axis {a} of length {} with padding {} and stride {}",
                    w[2 + a],
                    x[2 + a],
                    pad[a],
                    stride[a]
                ))
            })?;
        }
        let geom = ConvGeom {
            n: x[0],
            cin: x[1],
            cout: w[0],
            input: [x[2], x[3], x[4]],
            kernel: [w[2], w[3], w[4]],
            stride,
            pad,
            output,
        };
        let data = kernels::conv3d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[x[0], w[0], output[0], output[1], output[2]], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv { input, weight, bias, geom }, &inputs))
    }

    /// Transposed convolution without padding; output length `(in - 1) * stride + kernel`.
    /// Weight layout `[Cin, Cout, kd, kh, kw]`.
    pub fn conv3d_transposed(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
    ) -> Result<Var> {
        if stride.contains(&0) {
            return Err(Error::invalid("conv3d_transposed: stride components must be >= 1"));
        }
        let (x, w) = self.conv_geom("conv3d_transposed", input, weight, bias, true)?;
        let output = [0, 1, 2].map(|a| (x[2 + a] - 1) * stride[a] + w[2 + a]);
        // Described as the strided convolution it is the adjoint of: that
        // convolution maps the expanded grid (Cout channels) to the input grid.
        let geom = ConvGeom {
            n: x[0],
            cin: w[1],
            cout: w[0],
            input: output,
            kernel: [w[2], w[3], w[4]],
            stride,
            pad: [0; 3],
            output: [x[2], x[3], x[4]],
        };
        let mut data = kernels::conv3d_grad_input(&geom, self.value(input).data(), self.value(weight).data());
        if let Some(b) = bias {
            let plane: usize = output.iter().product();
            let bv = self.value(b).data();
            for (idx, chunk) in data.chunks_mut(plane).enumerate() {
                let c = bv[idx % w[1]];
                chunk.iter_mut().for_each(|v| *v += c);
            }
        }
        let value = Tensor::new(&[x[0], w[1], output[0], output[1], output[2]], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::ConvT { input, weight, bias, geom }, &inputs))
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "instance_norm expects [N, C, spatial...], got {shape:?}"
            )));
        }
        let (n, c, plane) = split_nc(&shape);
        if plane < 2 {
            return Err(Error::shape(format!(
                "instance_norm needs at least 2 spatial voxels per slice, got shape {shape:?}"
            )));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!(
                    "instance_norm: {name} shape {:?} does not match channels (C={c})",
                    self.shape(v)
                )));
            }
        }
        let (out, xhat, inv_std) = kernels::instance_norm_forward(
            n,
            c,
            plane,
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(format!("leaky_relu slope {slope} must lie in (0, 1)")));
        }
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, Op::LeakyRelu { input, slope }, &[input]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid { input }, &[input])
    }

    /// Softmax over axis 1.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() < 2 {
            return Err(Error::shape(format!("softmax_channel expects [N, C, ...], got {:?}", x.shape())));
        }
        let data = softmax(x.shape(), x.data());
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(value, Op::Softmax { input }, &[input]))
    }

    /// Log of the softmax over axis 1, computed stably.
    pub fn log_softmax_channel(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() < 2 {
            return Err(Error::shape(format!(
                "log_softmax_channel expects [N, C, ...], got {:?}",
                x.shape()
            )));
        }
        let (n, c, rest) = split_nc(x.shape());
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * c * rest;
            for s in 0..rest {
                let m = (0..c).map(|k| src[base + k * rest + s]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|k| (src[base + k * rest + s] - m).exp()).sum::<f64>().ln();
                for k in 0..c {
                    out[base + k * rest + s] = src[base + k * rest + s] - lse;
                }
            }
        }
        let probs = out.iter().map(|v| v.exp()).collect();
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(value, Op::LogSoftmax { input, probs }, &[input]))
    }

    pub fn log(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push(value, Op::Log { input }, &[input])
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            let value = Tensor::new(&sa, data)?;
            return Ok(self.push(value, Op::Binary { kind, a, b, index: None }, &[a, b]));
        }
        let (shape, ia, ib) = broadcast_index(&sa, &sb)?;
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                index: Some((ia, ib)),
            },
            &[a, b],
        ))
    }

    /// Elementwise sum; operands must have equal rank with each axis equal or 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push(value, Op::Affine { input, scale }, &[input])
    }

    pub fn scale(&mut self, input: Var, scale: f64) -> Var {
        self.affine(input, scale, 0.0)
    }

    /// Concatenate along axis 1.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape(format!("concat_channels expects [N, C, ...], got {base:?}")));
        }
        let mut channels = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(format!(
                    "concat_channels: shape {s:?} is incompatible with {base:?} outside the channel axis"
                )));
            }
            channels += s[1];
        }
        let (n, _, rest) = split_nc(&base);
        let mut data = Vec::with_capacity(n * channels * rest);
        for b in 0..n {
            for v in inputs {
                let t = self.value(*v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * rest..(b + 1) * c * rest]);
            }
        }
        let mut shape = base.clone();
        shape[1] = channels;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, inputs))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn select_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(Error::shape(format!(
                "select_channels: range {start}..{} out of bounds for shape {shape:?}",
                start + len
            )));
        }
        let (n, c, rest) = split_nc(&shape);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * len * rest);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * rest..(b * c + start + len) * rest]);
        }
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Select { input, start }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { input }, &[input])
    }

    /// Mean over all spatial axes: `[N, C, ...] -> [N, C, 1, ..., 1]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!("spatial_mean expects [N, C, spatial...], got {shape:?}")));
        }
        let (n, c, rest) = split_nc(&shape);
        let src = self.value(input).data();
        let data = src.chunks(rest).take(n * c).map(|ch| ch.iter().sum::<f64>() / rest as f64).collect();
        let mut out_shape = vec![n, c];
        out_shape.resize(shape.len(), 1);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::SpatialMean { input }, &[input]))
    }

    /// Mean over axis 1 keeping it as a singleton.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("channel_mean expects [N, C, ...], got {shape:?}")));
        }
        let (n, c, rest) = split_nc(&shape);
        let src = self.value(input).data();
        let mut data = vec![0.0; n * rest];
        for b in 0..n {
            for k in 0..c {
                let plane = &src[(b * c + k) * rest..][..rest];
                for (o, v) in data[b * rest..(b + 1) * rest].iter_mut().zip(plane) {
                    *o += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= c as f64);
        let mut out_shape = shape.clone();
        out_shape[1] = 1;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::ChannelMean { input }, &[input]))
    }

    /// Max over axis 1 keeping it as a singleton. Ties route the gradient to the lowest channel.
    pub fn channel_max(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("channel_max expects [N, C, ...], got {shape:?}")));
        }
        let (n, c, rest) = split_nc(&shape);
        let src = self.value(input).data();
        let mut data = vec![f64::NEG_INFINITY; n * rest];
        let mut argmax = vec![0; n * rest];
        for b in 0..n {
            for k in 0..c {
                let plane = &src[(b * c + k) * rest..][..rest];
                for (s, v) in plane.iter().enumerate() {
                    if *v > data[b * rest + s] {
                        data[b * rest + s] = *v;
                        argmax[b * rest + s] = (b * c + k) * rest + s;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = 1;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::ChannelMax { input, argmax }, &[input]))
    }

    /// Piecewise-branch signature of the recorded forward pass: the sign of every
    /// leaky_relu input and every channel_max argmax. Two passes with equal
    /// signatures lie on the same smooth piece, so finite differences between
    /// them are free of kink error.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => {
                    pattern.extend(self.value(*input).data().iter().map(|&v| usize::from(v > 0.0)))
                }
                Op::ChannelMax { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    /// Reverse pass from a one-element `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if let (Op::Leaf, Some(g), Some(acc)) = (&node.op, g, node.grad.as_mut()) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, contribution: Vec<f64>| accumulate(grads, v, contribution);
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.wants(*input) {
                    send(*input, kernels::conv3d_grad_input(geom, g, self.value(*weight).data()));
                }
                if self.wants(*weight) {
                    send(*weight, kernels::conv3d_grad_weight(geom, g, self.value(*input).data()));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let plane = geom.output.iter().product();
                    send(b, kernels::channel_sums(geom.n, geom.cout, plane, g));
                }
            }
            Op::ConvT {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.wants(*input) {
                    send(*input, kernels::conv3d_forward(geom, g, self.value(*weight).data(), None));
                }
                if self.wants(*weight) {
                    send(*weight, kernels::conv3d_grad_weight(geom, self.value(*input).data(), g));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let plane = geom.input.iter().product();
                    send(b, kernels::channel_sums(geom.n, geom.cin, plane, g));
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, plane) = split_nc(node.value.shape());
                let gv = self.value(*gamma).data();
                if self.wants(*input) {
                    let m = plane as f64;
                    let mut gin = vec![0.0; g.len()];
                    for idx in 0..n * c {
                        let r = idx * plane..(idx + 1) * plane;
                        let (gs, xs) = (&g[r.clone()], &xhat[r.clone()]);
                        let gam = gv[idx % c];
                        let sum_g: f64 = gs.iter().sum::<f64>() * gam;
                        let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() * gam;
                        let k = inv_std[idx] / m;
                        for ((o, gi), xi) in gin[r].iter_mut().zip(gs).zip(xs) {
                            *o = k * (m * gam * gi - sum_g - xi * sum_gx);
                        }
                    }
                    send(*input, gin);
                }
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; c];
                    for idx in 0..n * c {
                        let r = idx * plane..(idx + 1) * plane;
                        gg[idx % c] += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    send(*gamma, gg);
                }
                if self.wants(*beta) {
                    send(*beta, kernels::channel_sums(n, c, plane, g));
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let gin = g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi }).collect();
                send(*input, gin);
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                send(*input, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect());
            }
            Op::Softmax { input } => {
                let (n, c, rest) = split_nc(node.value.shape());
                let p = node.value.data();
                let mut gin = vec![0.0; g.len()];
                for b in 0..n {
                    let base = b * c * rest;
                    for s in 0..rest {
                        let dot: f64 = (0..c).map(|k| g[base + k * rest + s] * p[base + k * rest + s]).sum();
                        for k in 0..c {
                            let i = base + k * rest + s;
                            gin[i] = p[i] * (g[i] - dot);
                        }
                    }
                }
                send(*input, gin);
            }
            Op::LogSoftmax { input, probs } => {
                let (n, c, rest) = split_nc(node.value.shape());
                let mut gin = vec![0.0; g.len()];
                for b in 0..n {
                    let base = b * c * rest;
                    for s in 0..rest {
                        let total: f64 = (0..c).map(|k| g[base + k * rest + s]).sum();
                        for k in 0..c {
                            let i = base + k * rest + s;
                            gin[i] = g[i] - probs[i] * total;
                        }
                    }
                }
                send(*input, gin);
            }
            Op::Log { input } => {
                let x = self.value(*input).data();
                send(*input, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
            }
            Op::Binary { kind, a, b, index } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (ga, gb) = binary_grads(*kind, g, va, vb, index.as_ref());
                if self.wants(*a) {
                    send(*a, ga);
                }
                if self.wants(*b) {
                    send(*b, gb);
                }
            }
            Op::Affine { input, scale } => {
                send(*input, g.iter().map(|v| v * scale).collect());
            }
            Op::Concat { inputs } => {
                let (n, _, rest) = split_nc(node.value.shape());
                let mut offset = 0;
                let total = node.value.shape()[1];
                for v in inputs {
                    let c = self.shape(*v)[1];
                    if self.wants(*v) {
                        let mut gi = Vec::with_capacity(n * c * rest);
                        for b in 0..n {
                            let start = (b * total + offset) * rest;
                            gi.extend_from_slice(&g[start..start + c * rest]);
                        }
                        send(*v, gi);
                    }
                    offset += c;
                }
            }
            Op::Select { input, start } => {
                let shape = self.shape(*input);
                let (n, c, rest) = split_nc(shape);
                let len = node.value.shape()[1];
                let mut gin = vec![0.0; n * c * rest];
                for b in 0..n {
                    let dst = (b * c + start) * rest;
                    gin[dst..dst + len * rest].copy_from_slice(&g[b * len * rest..(b + 1) * len * rest]);
                }
                send(*input, gin);
            }
            Op::Sum { input } => {
                send(*input, vec![g[0]; self.value(*input).numel()]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                send(*input, vec![g[0] / n as f64; n]);
            }
            Op::SpatialMean { input } => {
                let (n, c, rest) = split_nc(self.shape(*input));
                let mut gin = Vec::with_capacity(n * c * rest);
                for gi in g.iter().take(n * c) {
                    gin.extend(std::iter::repeat_n(gi / rest as f64, rest));
                }
                send(*input, gin);
            }
            Op::ChannelMean { input } => {
                let (n, c, rest) = split_nc(self.shape(*input));
                let mut gin = Vec::with_capacity(n * c * rest);
                for b in 0..n {
                    for _ in 0..c {
                        gin.extend(g[b * rest..(b + 1) * rest].iter().map(|v| v / c as f64));
                    }
                }
                send(*input, gin);
            }
            Op::ChannelMax { input, argmax } => {
                let mut gin = vec![0.0; self.value(*input).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    gin[src] += gi;
                }
                send(*input, gin);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match grads[v.0].as_mut() {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => grads[v.0] = Some(contribution),
    }
}

fn binary_grads(
    kind: BinaryKind,
    g: &[f64],
    va: &[f64],
    vb: &[f64],
    index: Option<&(Vec<usize>, Vec<usize>)>,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; va.len()];
    let mut gb = vec![0.0; vb.len()];
    let mut step = |o: usize, i: usize, j: usize| {
        let (x, y, gi) = (va[i], vb[j], g[o]);
        match kind {
            BinaryKind::Add => {
                ga[i] += gi;
                gb[j] += gi;
            }
            BinaryKind::Sub => {
                ga[i] += gi;
                gb[j] -= gi;
            }
            BinaryKind::Mul => {
                ga[i] += gi * y;
                gb[j] += gi * x;
            }
            BinaryKind::Div => {
                ga[i] += gi / y;
                gb[j] -= gi * x / (y * y);
            }
        }
    };
    match index {
        None => (0..g.len()).for_each(|o| step(o, o, o)),
        Some((ia, ib)) => {
            for (o, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                step(o, i, j);
            }
        }
    }
    (ga, gb)
}

// Output shape plus flat source index per output element for each operand.
fn broadcast_index(sa: &[usize], sb: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if sa.len() != sb.len() {
        return Err(Error::shape(format!("cannot broadcast {sa:?} with {sb:?}: rank differs")));
    }
    let mut shape = Vec::with_capacity(sa.len());
    for (&a, &b) in sa.iter().zip(sb) {
        if a != b && a != 1 && b != 1 {
            return Err(Error::shape(format!("cannot broadcast {sa:?} with {sb:?}")));
        }
        shape.push(a.max(b));
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; s.len()];
        let mut acc = 1;
        for k in (0..s.len()).rev() {
            st[k] = if s[k] == 1 { 0 } else { acc };
            acc *= s[k];
        }
        st
    };
    let (sta, stb) = (strides(sa), strides(sb));
    let total: usize = shape.iter().product();
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        ia.push(oa);
        ib.push(ob);
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            oa += sta[k];
            ob += stb[k];
            if idx[k] < shape[k] {
                break;
            }
            oa -= sta[k] * shape[k];
            ob -= stb[k] * shape[k];
            idx[k] = 0;
        }
    }
    Ok((shape, ia, ib))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax over axis 1 of a raw buffer.
pub(crate) fn softmax(shape: &[usize], src: &[f64]) -> Vec<f64> {
    let (n, c, rest) = split_nc(shape);
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        let base = b * c * rest;
        for s in 0..rest {
            let m = (0..c).map(|k| src[base + k * rest + s]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (src[base + k * rest + s] - m).exp();
                out[base + k * rest + s] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * rest + s] /= z;
            }
        }
    }
    out
}

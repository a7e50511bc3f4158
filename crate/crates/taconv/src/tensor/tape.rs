//! The recording tape: forward ops append nodes, `backward` replays them in
//! exact reverse order. No in-place mutation of recorded values, so the
//! reverse pass sees precisely the forward state.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::{check_finite, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, pad: usize },
    BranchMax { branches: Vec<NodeId>, winner: Vec<u32> },
    Relu { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    GlobalAvgPool { input: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    Add { lhs: NodeId, rhs: NodeId },
    Affine { input: NodeId, scale: f64 },
    Mul { lhs: NodeId, rhs: NodeId },
    Sum { input: NodeId },
    ScaleIndex { input: NodeId, coeffs: NodeId, index: usize },
    SynthKernel { weights: NodeId, basis: Arc<Vec<f64>>, n_basis: usize, k: usize },
}

/// Reverse-mode tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copy of a node's value as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), requires_grad: false, grad: None }
    }

    /// Record a tensor as a leaf; gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        check_finite(&t.data, "leaf tensor")?;
        Ok(self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient (inputs, labels-as-data, ...).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("constant: shape {:?} vs len {}", shape, data.len())));
        }
        check_finite(&data, "constant leaf")?;
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// Leaf whose gradient is tracked regardless of the source tensor flag
    /// (used for attacks that differentiate w.r.t. the input image).
    pub fn leaf_with_grad(&mut self, t: &Tensor) -> Result<NodeId> {
        check_finite(&t.data, "leaf tensor")?;
        Ok(self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf))
    }

    /// Direct cross-correlation (no kernel flip) with zero padding.
    ///
    /// `input` is `[N,C,H,W]`, `kernel` `[O,C,k,k]`; output spatial extent is
    /// `(H + 2*pad - k) / stride + 1` with floor division.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::Usage("conv2d: stride must be >= 1".into()));
        }
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and kernel, got {:?} and {:?}",
                ishape, kshape
            )));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (o, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: kernel must be square, got {}x{}", kh, kw)));
        }
        if kh % 2 == 0 {
            return Err(Error::Usage(format!("conv2d: kernel size must be odd, got {}", kh)));
        }
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {} channels but kernel expects {}",
                c, kc
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {}",
                h + 2 * pad,
                w + 2 * pad,
                kh
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let idata = &self.nodes[input.0].data;
        let kdata = &self.nodes[kernel.0].data;
        let mut out = vec![0.0; n * o * oh * ow];
        for bn in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for dy in 0..kh {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let iv = idata[((bn * c + ic) * h + iy as usize) * w + ix as usize];
                                    let kv = kdata[((oc * c + ic) * kh + dy) * kw + dx];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((bn * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        check_finite(&out, "conv2d output")?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(vec![n, o, oh, ow], out, needs, Op::Conv2d { input, kernel, stride, pad }))
    }

    /// Elementwise maximum over branches; ties go to the lowest branch index
    /// so branch 0 wins whenever it matches the max.
    pub fn branch_max(&mut self, branches: &[NodeId]) -> Result<NodeId> {
        if branches.is_empty() {
            return Err(Error::Usage("branch_max: empty branch list".into()));
        }
        let shape = self.shape(branches[0]).to_vec();
        for &b in &branches[1..] {
            if self.shape(b) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "branch_max: branch shapes differ, {:?} vs {:?}",
                    shape,
                    self.shape(b)
                )));
            }
        }
        let numel: usize = shape.iter().product();
        let mut out = self.nodes[branches[0].0].data.clone();
        let mut winner = vec![0u32; numel];
        for (bi, &b) in branches.iter().enumerate().skip(1) {
            let bdata = &self.nodes[b.0].data;
            for i in 0..numel {
                if bdata[i] > out[i] {
                    out[i] = bdata[i];
                    winner[i] = bi as u32;
                }
            }
        }
        let needs = branches.iter().any(|&b| self.needs(b));
        Ok(self.push(shape, out, needs, Op::BranchMax { branches: branches.to_vec(), winner }))
    }

    /// `max(x, 0)` with subgradient 0 at 0.
    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(input);
        Ok(self.push(shape, out, needs, Op::Relu { input }))
    }

    /// Affine map `x[N,D] @ w[D,M] + b[M]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Shape(format!(
                "linear: incompatible shapes x{:?} w{:?} b{:?}",
                xs, ws, bs
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let x = &self.nodes[input.0].data;
        let w = &self.nodes[weight.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = b[j];
                for p in 0..d {
                    acc += x[i * d + p] * w[p * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        check_finite(&out, "linear output")?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(vec![n, m], out, needs, Op::Linear { input, weight, bias }))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("global_avg_pool expects [N,C,H,W], got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = &self.nodes[input.0].data;
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * h * w;
                out[bn * c + ch] = x[base..base + h * w].iter().sum::<f64>() * inv;
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![n, c], out, needs, Op::GlobalAvgPool { input }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction. Returns a scalar (shape `[1]`).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                s,
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        for &l in labels {
            if l >= k {
                return Err(Error::Data(format!("label {} out of range [0,{})", l, k)));
            }
        }
        let x = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= (row[labels[i]] - mx) - z.ln();
        }
        loss /= n as f64;
        check_finite(std::slice::from_ref(&loss), "cross-entropy loss")?;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, input: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        if !scale.is_finite() || !shift.is_finite() {
            return Err(Error::NonFinite("affine coefficients".into()));
        }
        let shape = self.shape(input).to_vec();
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|v| scale * v + shift).collect();
        check_finite(&out, "affine output")?;
        let needs = self.needs(input);
        Ok(self.push(shape, out, needs, Op::Affine { input, scale }))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let shape = self.shape(lhs).to_vec();
        let out: Vec<f64> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(&self.nodes[rhs.0].data)
            .map(|(a, b)| a + b)
            .collect();
        check_finite(&out, "add output")?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(shape, out, needs, Op::Add { lhs, rhs }))
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let shape = self.shape(lhs).to_vec();
        let out: Vec<f64> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(&self.nodes[rhs.0].data)
            .map(|(a, b)| a * b)
            .collect();
        check_finite(&out, "mul output")?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(shape, out, needs, Op::Mul { lhs, rhs }))
    }

    /// Full reduction to a scalar (shape `[1]`).
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[input.0].data.iter().sum();
        check_finite(std::slice::from_ref(&total), "sum output")?;
        let needs = self.needs(input);
        Ok(self.push(vec![1], vec![total], needs, Op::Sum { input }))
    }

    /// Multiply a node by one element of a coefficient vector: `coeffs[index] * input`.
    /// Differentiable in both the node and the selected coefficient.
    pub fn scale_index(&mut self, input: NodeId, coeffs: NodeId, index: usize) -> Result<NodeId> {
        let cs = self.shape(coeffs).to_vec();
        if cs.len() != 1 || index >= cs[0] {
            return Err(Error::Shape(format!(
                "scale_index: coeffs {:?} has no index {}",
                cs, index
            )));
        }
        let beta = self.nodes[coeffs.0].data[index];
        let shape = self.shape(input).to_vec();
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|v| beta * v).collect();
        check_finite(&out, "scale_index output")?;
        let needs = self.needs(input) || self.needs(coeffs);
        Ok(self.push(shape, out, needs, Op::ScaleIndex { input, coeffs, index }))
    }

    /// Linear combination of fixed basis functions: weights `[O,C,n_basis]`
    /// against `basis` holding `n_basis` stacked `k x k` planes, producing
    /// kernels `[O,C,k,k]`.
    pub fn synth_kernel(
        &mut self,
        weights: NodeId,
        basis: Arc<Vec<f64>>,
        n_basis: usize,
        k: usize,
    ) -> Result<NodeId> {
        let ws = self.shape(weights).to_vec();
        if ws.len() != 3 || ws[2] != n_basis {
            return Err(Error::Shape(format!(
                "synth_kernel: weights {:?} vs n_basis {}",
                ws, n_basis
            )));
        }
        if basis.len() != n_basis * k * k {
            return Err(Error::Shape(format!(
                "synth_kernel: basis has {} values, expected {}",
                basis.len(),
                n_basis * k * k
            )));
        }
        let (o, c) = (ws[0], ws[1]);
        let kk = k * k;
        let w = &self.nodes[weights.0].data;
        let mut out = vec![0.0; o * c * kk];
        for oc in 0..o * c {
            let wrow = &w[oc * n_basis..(oc + 1) * n_basis];
            let orow = &mut out[oc * kk..(oc + 1) * kk];
            for (i, &wi) in wrow.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                let f = &basis[i * kk..(i + 1) * kk];
                for (ov, &fv) in orow.iter_mut().zip(f) {
                    *ov += wi * fv;
                }
            }
        }
        check_finite(&out, "synth_kernel output")?;
        let needs = self.needs(weights);
        Ok(self.push(vec![o, c, k, k], out, needs, Op::SynthKernel { weights, basis, n_basis, k }))
    }

    /// Reverse pass from a scalar loss. Populates per-node gradients in the
    /// exact reverse of recording order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.dispatch_backward(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                check_finite(g, "gradient")?;
            }
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let len = self.nodes[id.0].data.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len]);
        for (a, b) in grad.iter_mut().zip(contrib) {
            *a += *b;
        }
    }

    fn dispatch_backward(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Ops are matched by moving cheap copies of their index fields out of
        // the node so `self` stays borrowable.
        enum Plan {
            None,
            Two(NodeId, Vec<f64>, NodeId, Vec<f64>),
            Three(NodeId, Vec<f64>, NodeId, Vec<f64>, NodeId, Vec<f64>),
            Many(Vec<(NodeId, Vec<f64>)>),
        }
        let plan = match &self.nodes[i].op {
            Op::Leaf => Plan::None,
            Op::Conv2d { input, kernel, stride, pad } => {
                let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                let ishape = self.nodes[input.0].shape.clone();
                let kshape = self.nodes[kernel.0].shape.clone();
                let oshape = self.nodes[i].shape.clone();
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (o, kh, kw) = (kshape[0], kshape[2], kshape[3]);
                let (oh, ow) = (oshape[2], oshape[3]);
                let idata = &self.nodes[input.0].data;
                let kdata = &self.nodes[kernel.0].data;
                let mut dinput = vec![0.0; idata.len()];
                let mut dkernel = vec![0.0; kdata.len()];
                for bn in 0..n {
                    for oc in 0..o {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[((bn * o + oc) * oh + oy) * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..c {
                                    for dy in 0..kh {
                                        let iy = (oy * stride + dy) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for dx in 0..kw {
                                            let ix = (ox * stride + dx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let ii = ((bn * c + ic) * h + iy as usize) * w + ix as usize;
                                            let ki = ((oc * c + ic) * kh + dy) * kw + dx;
                                            dinput[ii] += go * kdata[ki];
                                            dkernel[ki] += go * idata[ii];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Plan::Two(input, dinput, kernel, dkernel)
            }
            Op::BranchMax { branches, winner } => {
                let branches = branches.clone();
                let winner = winner.clone();
                let mut per: Vec<(NodeId, Vec<f64>)> = branches
                    .iter()
                    .map(|&b| (b, vec![0.0; g.len()]))
                    .collect();
                for (idx, &wb) in winner.iter().enumerate() {
                    per[wb as usize].1[idx] = g[idx];
                }
                Plan::Many(per)
            }
            Op::Relu { input } => {
                let input = *input;
                let x = &self.nodes[input.0].data;
                let dg: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                Plan::Many(vec![(input, dg)])
            }
            Op::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xs = self.nodes[input.0].shape.clone();
                let (n, d) = (xs[0], xs[1]);
                let m = self.nodes[weight.0].shape[1];
                let x = &self.nodes[input.0].data;
                let w = &self.nodes[weight.0].data;
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; d * m];
                let mut db = vec![0.0; m];
                for bn in 0..n {
                    for j in 0..m {
                        let go = g[bn * m + j];
                        if go == 0.0 {
                            continue;
                        }
                        db[j] += go;
                        for p in 0..d {
                            dx[bn * d + p] += go * w[p * m + j];
                            dw[p * m + j] += go * x[bn * d + p];
                        }
                    }
                }
                Plan::Three(input, dx, weight, dw, bias, db)
            }
            Op::GlobalAvgPool { input } => {
                let input = *input;
                let s = self.nodes[input.0].shape.clone();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for bn in 0..n {
                    for ch in 0..c {
                        let gv = g[bn * c + ch] * inv;
                        let base = (bn * c + ch) * h * w;
                        dx[base..base + h * w].iter_mut().for_each(|v| *v += gv);
                    }
                }
                Plan::Many(vec![(input, dx)])
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dl = vec![0.0; probs.len()];
                for bn in 0..n {
                    for j in 0..k {
                        let one_hot = if labels[bn] == j { 1.0 } else { 0.0 };
                        dl[bn * k + j] = scale * (probs[bn * k + j] - one_hot);
                    }
                }
                Plan::Many(vec![(logits, dl)])
            }
            Op::Add { lhs, rhs } => Plan::Two(*lhs, g.to_vec(), *rhs, g.to_vec()),
            Op::Affine { input, scale } => {
                let (input, scale) = (*input, *scale);
                let dx: Vec<f64> = g.iter().map(|gv| gv * scale).collect();
                Plan::Many(vec![(input, dx)])
            }
            Op::Mul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let a = &self.nodes[lhs.0].data;
                let b = &self.nodes[rhs.0].data;
                let da: Vec<f64> = g.iter().zip(b).map(|(gv, bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(a).map(|(gv, av)| gv * av).collect();
                Plan::Two(lhs, da, rhs, db)
            }
            Op::Sum { input } => {
                let input = *input;
                let dx = vec![g[0]; self.nodes[input.0].data.len()];
                Plan::Many(vec![(input, dx)])
            }
            Op::ScaleIndex { input, coeffs, index } => {
                let (input, coeffs, index) = (*input, *coeffs, *index);
                let beta = self.nodes[coeffs.0].data[index];
                let x = &self.nodes[input.0].data;
                let dx: Vec<f64> = g.iter().map(|gv| gv * beta).collect();
                let mut dc = vec![0.0; self.nodes[coeffs.0].data.len()];
                dc[index] = g.iter().zip(x).map(|(gv, xv)| gv * xv).sum();
                Plan::Two(input, dx, coeffs, dc)
            }
            Op::SynthKernel { weights, basis, n_basis, k } => {
                let weights = *weights;
                let (n_basis, k) = (*n_basis, *k);
                let basis = Arc::clone(basis);
                let kk = k * k;
                let oc_count = self.nodes[weights.0].data.len() / n_basis;
                let mut dw = vec![0.0; oc_count * n_basis];
                for oc in 0..oc_count {
                    let grow = &g[oc * kk..(oc + 1) * kk];
                    for bi in 0..n_basis {
                        let f = &basis[bi * kk..(bi + 1) * kk];
                        dw[oc * n_basis + bi] = grow.iter().zip(f).map(|(gv, fv)| gv * fv).sum();
                    }
                }
                Plan::Many(vec![(weights, dw)])
            }
        };
        match plan {
            Plan::None => {}
            Plan::Two(a, da, b, db) => {
                self.acc_grad(a, &da);
                self.acc_grad(b, &db);
            }
            Plan::Three(a, da, b, db, c, dc) => {
                self.acc_grad(a, &da);
                self.acc_grad(b, &db);
                self.acc_grad(c, &dc);
            }
            Plan::Many(list) => {
                for (id, d) in list {
                    self.acc_grad(id, &d);
                }
            }
        }
        Ok(())
    }
}

//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]: every operation appends a node holding its
//! output values, a same-shape gradient accumulator and enough of the
//! inputs to run the backward rule. Node handles ([`Var`]) are plain
//! indices, so the tape is a topologically ordered arena and backward is
//! a single reverse sweep with `+=` accumulation on fan-out.
//!
//! Convolution is cross-correlation (no kernel flip). Losses treat the
//! target as a constant, so gradients flow into the prediction only.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be scalar, got {len} values")]
    NonScalarLoss { len: usize },
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("{0}")]
    Divisibility(String),
    #[error("kernel size {0} unsupported (odd sizes only)")]
    BadKernel(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulScalarVar { x: usize, s: usize },
    Relu(usize),
    Sigmoid(usize),
    MatMul { a: usize, b: usize },
    Transpose(usize),
    Reshape(usize),
    SoftmaxLastAxis(usize),
    L2NormalizeRows { x: usize, norms: Vec<f64> },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        padding: Padding,
    },
    DepthwiseConv3x3 { x: usize, w: usize },
    ConcatChannels(Vec<usize>),
    PixelShuffle { x: usize, r: usize },
    PixelUnshuffle { x: usize, r: usize },
    GlobalAvgPool(usize),
    ChannelScale { x: usize, s: usize },
    SumAll(usize),
    MeanAll(usize),
    MraeLoss {
        rc: usize,
        gt: Vec<f64>,
        mask: Option<Vec<bool>>,
        eps: f64,
    },
    L1Loss {
        rc: usize,
        gt: Vec<f64>,
        mask: Option<Vec<bool>>,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Denominator floor for the relative MRAE; the target is zero on
/// masked-out background and near-zero targets must not explode.
pub const MRAE_EPS: f64 = 1e-4;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite tensor value"
        );
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            shape,
            values,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant/input leaf.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Clear all gradients and allow another backward pass.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.backward_done = false;
    }

    /// Multiply-accumulate count of the convolution, depthwise and matrix
    /// ops recorded on this tape (forward pass only).
    pub fn macs(&self) -> u64 {
        let mut total = 0u64;
        for node in &self.nodes {
            total += match &node.op {
                Op::Conv2d { w, .. } => {
                    let sw = &self.nodes[*w].shape;
                    let (co, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                    (co * oh * ow * sw[1] * sw[2] * sw[3]) as u64
                }
                Op::DepthwiseConv3x3 { .. } => {
                    (node.shape[0] * node.shape[1] * node.shape[2] * 9) as u64
                }
                Op::MatMul { a, .. } => {
                    let k = self.nodes[*a].shape[1];
                    (node.shape[0] * node.shape[1] * k) as u64
                }
                _ => 0,
            };
        }
        total
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Mul(a.0, b.0)))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Scale(x.0, c))
    }

    /// Multiply by a learnable scalar (a 1-element tensor).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.nodes[s.0].values.len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "scalar multiplier has shape {:?}",
                self.nodes[s.0].shape
            )));
        }
        let sv = self.nodes[s.0].values[0];
        let values = self.nodes[x.0].values.iter().map(|v| v * sv).collect();
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            values,
            Op::MulScalarVar { x: x.0, s: s.0 },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(self.nodes[x.0].shape.clone(), values, Op::Sigmoid(x.0))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bb) in orow.iter_mut().zip(brow) {
                    *o += aip * bb;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("transpose {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(x.0)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.nodes[x.0].values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.nodes[x.0].shape
            )));
        }
        let values = self.nodes[x.0].values.clone();
        Ok(self.push(shape.to_vec(), values, Op::Reshape(x.0)))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = &self.nodes[x.0].shape;
        let n = *s.last().ok_or_else(|| {
            TensorError::ShapeMismatch("softmax on 0-d tensor".into())
        })?;
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0f64; xv.len()];
        for (row_in, row_out) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in row_out.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(s.clone(), out, Op::SoftmaxLastAxis(x.0)))
    }

    /// Normalize each row of a `[R,N]` matrix to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("l2 normalize {s:?}")));
        }
        let n = s[1];
        let xv = &self.nodes[x.0].values;
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = vec![0.0f64; xv.len()];
        for (row_in, row_out) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let norm = row_in.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = v / norm;
            }
        }
        Ok(self.push(s.clone(), out, Op::L2NormalizeRows { x: x.0, norms }))
    }

    /// Cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]`
    /// plus per-channel bias. `Same` zero-pads to keep H,W.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (
            self.nodes[x.0].shape.clone(),
            self.nodes[w.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d x{sx:?} w{sw:?} b{sb:?}"
            )));
        }
        let (ci, h, wdt) = (sx[0], sx[1], sx[2]);
        let (co, wci, k, k2) = (sw[0], sw[1], sw[2], sw[3]);
        if k != k2 || k % 2 == 0 {
            return Err(TensorError::BadKernel(k));
        }
        if wci != ci {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input channels {ci} vs kernel channels {wci}"
            )));
        }
        if sb[0] != co {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias {} vs out channels {co}",
                sb[0]
            )));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        let (oh, ow) = match padding {
            Padding::Same => (h, wdt),
            Padding::Valid => {
                if h < k || wdt < k {
                    return Err(TensorError::ShapeMismatch(format!(
                        "valid conv needs input >= {k}x{k}, got {h}x{wdt}"
                    )));
                }
                (h - k + 1, wdt - k + 1)
            }
        };
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0f64; co * oh * ow];
        for c_out in 0..co {
            let plane = &mut out[c_out * oh * ow..(c_out + 1) * oh * ow];
            plane.fill(bv[c_out]);
            for c_in in 0..ci {
                let xplane = &xv[c_in * h * wdt..(c_in + 1) * h * wdt];
                for ky in 0..k {
                    for kx in 0..k {
                        let weight = wv[((c_out * ci + c_in) * k + ky) * k + kx];
                        if weight == 0.0 {
                            continue;
                        }
                        accumulate_shifted(
                            plane, xplane, weight, oh, ow, h, wdt, ky, kx, pad,
                        );
                    }
                }
            }
        }
        Ok(self.push(
            vec![co, oh, ow],
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                padding,
            },
        ))
    }

    /// Per-channel 3x3 cross-correlation (same padding, no bias);
    /// `w: [C,3,3]`.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (sx, sw) = (
            self.nodes[x.0].shape.clone(),
            self.nodes[w.0].shape.clone(),
        );
        if sx.len() != 3 || sw.len() != 3 || sw[1] != 3 || sw[2] != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "depthwise conv x{sx:?} w{sw:?}"
            )));
        }
        if sw[0] != sx[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "depthwise conv channels {} vs {}",
                sx[0], sw[0]
            )));
        }
        let (c, h, wdt) = (sx[0], sx[1], sx[2]);
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let mut out = vec![0.0f64; c * h * wdt];
        for ch in 0..c {
            let plane = &mut out[ch * h * wdt..(ch + 1) * h * wdt];
            let xplane = &xv[ch * h * wdt..(ch + 1) * h * wdt];
            for ky in 0..3 {
                for kx in 0..3 {
                    let weight = wv[(ch * 3 + ky) * 3 + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    accumulate_shifted(plane, xplane, weight, h, wdt, h, wdt, ky, kx, 1);
                }
            }
        }
        Ok(self.push(sx, out, Op::DepthwiseConv3x3 { x: x.0, w: w.0 }))
    }

    /// Stack `[C_i,H,W]` tensors along the channel axis in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = &self.nodes[parts[0].0].shape;
        if first.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "concat expects [C,H,W], got {first:?}"
            )));
        }
        let (h, w) = (first[1], first[2]);
        let mut c_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat spatial mismatch: {first:?} vs {s:?}"
                )));
            }
            c_total += s[0];
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        Ok(self.push(
            vec![c_total, h, w],
            out,
            Op::ConcatChannels(parts.iter().map(|p| p.0).collect()),
        ))
    }

    /// Space-to-depth: `[C,H,W] -> [C*r^2, H/r, W/r]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!("unshuffle {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(TensorError::Divisibility(format!(
                "pixel_unshuffle: {h}x{w} not divisible by r={r}"
            )));
        }
        let (oh, ow) = (h / r, w / r);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0f64; c * r * r * oh * ow];
        for ch in 0..c {
            for u in 0..r {
                for v in 0..r {
                    let oc = ch * r * r + u * r + v;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out[(oc * oh + oy) * ow + ox] =
                                xv[(ch * h + oy * r + u) * w + ox * r + v];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![c * r * r, oh, ow],
            out,
            Op::PixelUnshuffle { x: x.0, r },
        ))
    }

    /// Depth-to-space: `[C,H,W] -> [C/r^2, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!("shuffle {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if r == 0 || c % (r * r) != 0 {
            return Err(TensorError::Divisibility(format!(
                "pixel_shuffle: {c} channels not divisible by r^2={}",
                r * r
            )));
        }
        let oc = c / (r * r);
        let (oh, ow) = (h * r, w * r);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0f64; c * h * w];
        for och in 0..oc {
            for u in 0..r {
                for v in 0..r {
                    let ic = och * r * r + u * r + v;
                    for iy in 0..h {
                        for ix in 0..w {
                            out[(och * oh + iy * r + u) * ow + ix * r + v] =
                                xv[(ic * h + iy) * w + ix];
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![oc, oh, ow], out, Op::PixelShuffle { x: x.0, r }))
    }

    /// `[C,H,W] -> [C]` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!("pool {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = &self.nodes[x.0].values;
        let out = (0..c)
            .map(|ch| xv[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        Ok(self.push(vec![c], out, Op::GlobalAvgPool(x.0)))
    }

    /// Scale each channel of `x: [C,H,W]` by `s: [C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (sx, ss) = (&self.nodes[x.0].shape, &self.nodes[s.0].shape);
        if sx.len() != 3 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "channel_scale x{sx:?} s{ss:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let xv = &self.nodes[x.0].values;
        let sv = &self.nodes[s.0].values;
        let mut out = vec![0.0f64; c * h * w];
        for ch in 0..c {
            let f = sv[ch];
            for (o, v) in out[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(&xv[ch * h * w..(ch + 1) * h * w])
            {
                *o = v * f;
            }
        }
        Ok(self.push(sx.clone(), out, Op::ChannelScale { x: x.0, s: s.0 }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].values.iter().sum::<f64>();
        self.push(vec![1], vec![total], Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].values.len();
        let total = self.nodes[x.0].values.iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![total], Op::MeanAll(x.0))
    }

    fn loss_mask(
        &self,
        rc: Var,
        gt: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Option<Vec<bool>>, TensorError> {
        let shape = &self.nodes[rc.0].shape;
        if gt.len() != self.nodes[rc.0].values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "loss target has {} values for shape {shape:?}",
                gt.len()
            )));
        }
        match mask {
            None => Ok(None),
            Some(m) => {
                if shape.len() != 3 || m.len() != shape[1] * shape[2] {
                    return Err(TensorError::ShapeMismatch(format!(
                        "loss mask has {} bits for shape {shape:?}",
                        m.len()
                    )));
                }
                if !m.iter().any(|&b| b) {
                    return Err(TensorError::Invalid("loss mask is degenerate".into()));
                }
                Ok(Some(m.to_vec()))
            }
        }
    }

    /// Mean over (masked) voxels of `|rc - gt| / max(gt, eps)`; the mask
    /// is per pixel and applies across all channels.
    pub fn mrae_loss(
        &mut self,
        rc: Var,
        gt: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let mask = self.loss_mask(rc, gt, mask)?;
        let shape = &self.nodes[rc.0].shape;
        let px_per_plane = if shape.len() == 3 { shape[1] * shape[2] } else { 0 };
        let rcv = &self.nodes[rc.0].values;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, (r, g)) in rcv.iter().zip(gt).enumerate() {
            if let Some(m) = &mask {
                if !m[i % px_per_plane] {
                    continue;
                }
            }
            total += (r - g).abs() / g.max(MRAE_EPS);
            count += 1;
        }
        let value = total / count as f64;
        Ok(self.push(
            vec![1],
            vec![value],
            Op::MraeLoss {
                rc: rc.0,
                gt: gt.to_vec(),
                mask,
                eps: MRAE_EPS,
            },
        ))
    }

    /// Mean over (masked) voxels of `|rc - gt|`.
    pub fn l1_loss(
        &mut self,
        rc: Var,
        gt: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let mask = self.loss_mask(rc, gt, mask)?;
        let shape = &self.nodes[rc.0].shape;
        let px_per_plane = if shape.len() == 3 { shape[1] * shape[2] } else { 0 };
        let rcv = &self.nodes[rc.0].values;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, (r, g)) in rcv.iter().zip(gt).enumerate() {
            if let Some(m) = &mask {
                if !m[i % px_per_plane] {
                    continue;
                }
            }
            total += (r - g).abs();
            count += 1;
        }
        let value = total / count as f64;
        Ok(self.push(
            vec![1],
            vec![value],
            Op::L1Loss {
                rc: rc.0,
                gt: gt.to_vec(),
                mask,
            },
        ))
    }

    /// Reverse sweep from a scalar loss; gradients accumulate on fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let n = self.nodes[loss.0].values.len();
        if n != 1 {
            return Err(TensorError::NonScalarLoss { len: n });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            // split off the current node so input gradients can be borrowed mutably
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[*a].grad[j] += g;
                        before[*b].grad[j] += g;
                    }
                }
                Op::Sub(a, b) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[*a].grad[j] += g;
                        before[*b].grad[j] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    if *a == *b {
                        for (j, &g) in node.grad.iter().enumerate() {
                            let v = before[*a].values[j];
                            before[*a].grad[j] += 2.0 * g * v;
                        }
                    } else {
                        for (j, &g) in node.grad.iter().enumerate() {
                            let (av, bv) = (before[*a].values[j], before[*b].values[j]);
                            before[*a].grad[j] += g * bv;
                            before[*b].grad[j] += g * av;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[*x].grad[j] += g * c;
                    }
                }
                Op::MulScalarVar { x, s } => {
                    let sv = before[*s].values[0];
                    let mut ds = 0.0;
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[*x].grad[j] += g * sv;
                        ds += g * before[*x].values[j];
                    }
                    before[*s].grad[0] += ds;
                }
                Op::Relu(x) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        if before[*x].values[j] > 0.0 {
                            before[*x].grad[j] += g;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        let y = node.values[j];
                        before[*x].grad[j] += g * y * (1.0 - y);
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (before[*a].shape[0], before[*a].shape[1]);
                    let nn = before[*b].shape[1];
                    // dA = dY B^T
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let brow = &before[*b].values[p * nn..(p + 1) * nn];
                            let grow = &node.grad[i2 * nn..(i2 + 1) * nn];
                            for (g, bb) in grow.iter().zip(brow) {
                                acc += g * bb;
                            }
                            before[*a].grad[i2 * k + p] += acc;
                        }
                    }
                    // dB = A^T dY
                    for p in 0..k {
                        for i2 in 0..m {
                            let aip = before[*a].values[i2 * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &node.grad[i2 * nn..(i2 + 1) * nn];
                            let brow = &mut before[*b].grad[p * nn..(p + 1) * nn];
                            for (bg, g) in brow.iter_mut().zip(grow) {
                                *bg += aip * g;
                            }
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (n2, m2) = (node.shape[0], node.shape[1]);
                    for i2 in 0..n2 {
                        for j2 in 0..m2 {
                            before[*x].grad[j2 * n2 + i2] += node.grad[i2 * m2 + j2];
                        }
                    }
                }
                Op::Reshape(x) => {
                    for (j, &g) in node.grad.iter().enumerate() {
                        before[*x].grad[j] += g;
                    }
                }
                Op::SoftmaxLastAxis(x) => {
                    let n2 = *node.shape.last().unwrap();
                    for (row, (yrow, grow)) in node
                        .values
                        .chunks_exact(n2)
                        .zip(node.grad.chunks_exact(n2))
                        .enumerate()
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        let xgrad = &mut before[*x].grad[row * n2..(row + 1) * n2];
                        for ((xg, y), g) in xgrad.iter_mut().zip(yrow).zip(grow) {
                            *xg += y * (g - dot);
                        }
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    let n2 = node.shape[1];
                    for (row, norm) in norms.iter().enumerate() {
                        let yrow = &node.values[row * n2..(row + 1) * n2];
                        let grow = &node.grad[row * n2..(row + 1) * n2];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        let xgrad = &mut before[*x].grad[row * n2..(row + 1) * n2];
                        for ((xg, y), g) in xgrad.iter_mut().zip(yrow).zip(grow) {
                            *xg += (g - y * dot) / norm;
                        }
                    }
                }
                Op::Conv2d { x, w, b, padding } => {
                    let k = before[*w].shape[2];
                    let pad = match padding {
                        Padding::Same => k / 2,
                        Padding::Valid => 0,
                    };
                    conv2d_backward(
                        &mut before[..],
                        node,
                        *x,
                        *w,
                        Some(*b),
                        k,
                        pad,
                        false,
                    );
                }
                Op::DepthwiseConv3x3 { x, w } => {
                    conv2d_backward(&mut before[..], node, *x, *w, None, 3, 1, true);
                }
                Op::ConcatChannels(parts) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let len = before[*p].values.len();
                        for (pg, g) in before[*p]
                            .grad
                            .iter_mut()
                            .zip(&node.grad[offset..offset + len])
                        {
                            *pg += g;
                        }
                        offset += len;
                    }
                }
                Op::PixelShuffle { x, r } => {
                    let (oc, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                    let (h, w2) = (oh / r, ow / r);
                    for och in 0..oc {
                        for u in 0..*r {
                            for v in 0..*r {
                                let ic = och * r * r + u * r + v;
                                for iy in 0..h {
                                    for ix in 0..w2 {
                                        before[*x].grad[(ic * h + iy) * w2 + ix] += node.grad
                                            [(och * oh + iy * r + u) * ow + ix * r + v];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::PixelUnshuffle { x, r } => {
                    let (_, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                    let c = before[*x].shape[0];
                    let (h, w2) = (before[*x].shape[1], before[*x].shape[2]);
                    for ch in 0..c {
                        for u in 0..*r {
                            for v in 0..*r {
                                let oc = ch * r * r + u * r + v;
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        before[*x].grad[(ch * h + oy * r + u) * w2 + ox * r + v] +=
                                            node.grad[(oc * oh + oy) * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w2) = (
                        before[*x].shape[0],
                        before[*x].shape[1],
                        before[*x].shape[2],
                    );
                    let inv = 1.0 / (h * w2) as f64;
                    for ch in 0..c {
                        let g = node.grad[ch] * inv;
                        for xg in &mut before[*x].grad[ch * h * w2..(ch + 1) * h * w2] {
                            *xg += g;
                        }
                    }
                }
                Op::ChannelScale { x, s } => {
                    let (c, h, w2) = (
                        before[*x].shape[0],
                        before[*x].shape[1],
                        before[*x].shape[2],
                    );
                    for ch in 0..c {
                        let f = before[*s].values[ch];
                        let mut ds = 0.0;
                        let range = ch * h * w2..(ch + 1) * h * w2;
                        let Node {
                            grad: xgrad,
                            values: xvals,
                            ..
                        } = &mut before[*x];
                        for ((xg, &g), &xvv) in xgrad[range.clone()]
                            .iter_mut()
                            .zip(&node.grad[range.clone()])
                            .zip(&xvals[range])
                        {
                            *xg += g * f;
                            ds += g * xvv;
                        }
                        before[*s].grad[ch] += ds;
                    }
                }
                Op::SumAll(x) => {
                    let g = node.grad[0];
                    for xg in &mut before[*x].grad {
                        *xg += g;
                    }
                }
                Op::MeanAll(x) => {
                    let g = node.grad[0] / before[*x].values.len() as f64;
                    for xg in &mut before[*x].grad {
                        *xg += g;
                    }
                }
                Op::MraeLoss { rc, gt, mask, eps } => {
                    let g = node.grad[0];
                    let shape = &before[*rc].shape;
                    let px = if shape.len() == 3 { shape[1] * shape[2] } else { 0 };
                    let count = match mask {
                        None => gt.len(),
                        Some(m) => {
                            m.iter().filter(|&&b| b).count() * (gt.len() / px)
                        }
                    };
                    let scale = g / count as f64;
                    for (j, gtv) in gt.iter().enumerate() {
                        if let Some(m) = mask {
                            if !m[j % px] {
                                continue;
                            }
                        }
                        let diff = before[*rc].values[j] - gtv;
                        before[*rc].grad[j] += scale * diff.signum() / gtv.max(*eps);
                    }
                }
                Op::L1Loss { rc, gt, mask } => {
                    let g = node.grad[0];
                    let shape = &before[*rc].shape;
                    let px = if shape.len() == 3 { shape[1] * shape[2] } else { 0 };
                    let count = match mask {
                        None => gt.len(),
                        Some(m) => {
                            m.iter().filter(|&&b| b).count() * (gt.len() / px)
                        }
                    };
                    let scale = g / count as f64;
                    for (j, gtv) in gt.iter().enumerate() {
                        if let Some(m) = mask {
                            if !m[j % px] {
                                continue;
                            }
                        }
                        let diff = before[*rc].values[j] - gtv;
                        before[*rc].grad[j] += scale * diff.signum();
                    }
                }
            }
        }
        Ok(())
    }
}

/// `out[oy,ox] += weight * x[oy+ky-pad, ox+kx-pad]` over the valid range,
/// with contiguous inner rows so the compiler can vectorize.
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted(
    out: &mut [f64],
    x: &[f64],
    weight: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) {
    for oy in 0..oh {
        let iy = oy + ky;
        if iy < pad || iy - pad >= h {
            continue;
        }
        let iy = iy - pad;
        // ox + kx - pad in [0, w)
        let ox_lo = pad.saturating_sub(kx);
        let ox_hi = (w + pad - kx).min(ow);
        if ox_lo >= ox_hi {
            continue;
        }
        let ix_lo = ox_lo + kx - pad;
        let orow = &mut out[oy * ow + ox_lo..oy * ow + ox_hi];
        let xrow = &x[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
        for (o, v) in orow.iter_mut().zip(xrow) {
            *o += weight * v;
        }
    }
}

/// Mirror of [`accumulate_shifted`] scattering output gradient back into
/// the input gradient: `dx[oy+ky-pad, ox+kx-pad] += weight * dout[oy,ox]`.
#[allow(clippy::too_many_arguments)]
fn scatter_shifted(
    dx: &mut [f64],
    dout: &[f64],
    weight: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) {
    for oy in 0..oh {
        let iy = oy + ky;
        if iy < pad || iy - pad >= h {
            continue;
        }
        let iy = iy - pad;
        let ox_lo = pad.saturating_sub(kx);
        let ox_hi = (w + pad - kx).min(ow);
        if ox_lo >= ox_hi {
            continue;
        }
        let ix_lo = ox_lo + kx - pad;
        let grow = &dout[oy * ow + ox_lo..oy * ow + ox_hi];
        let xrow = &mut dx[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
        for (xg, g) in xrow.iter_mut().zip(grow) {
            *xg += weight * g;
        }
    }
}

/// Dot of the output gradient with the shifted input window; the dw term.
#[allow(clippy::too_many_arguments)]
fn dot_shifted(
    dout: &[f64],
    x: &[f64],
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) -> f64 {
    let mut acc = 0.0;
    for oy in 0..oh {
        let iy = oy + ky;
        if iy < pad || iy - pad >= h {
            continue;
        }
        let iy = iy - pad;
        let ox_lo = pad.saturating_sub(kx);
        let ox_hi = (w + pad - kx).min(ow);
        if ox_lo >= ox_hi {
            continue;
        }
        let ix_lo = ox_lo + kx - pad;
        let grow = &dout[oy * ow + ox_lo..oy * ow + ox_hi];
        let xrow = &x[iy * w + ix_lo..iy * w + ix_lo + (ox_hi - ox_lo)];
        for (g, v) in grow.iter().zip(xrow) {
            acc += g * v;
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    before: &mut [Node],
    node: &Node,
    x: usize,
    w: usize,
    b: Option<usize>,
    k: usize,
    pad: usize,
    depthwise: bool,
) {
    let (oc, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
    let (ci, h, wdt) = (
        before[x].shape[0],
        before[x].shape[1],
        before[x].shape[2],
    );
    for c_out in 0..oc {
        let dplane = &node.grad[c_out * oh * ow..(c_out + 1) * oh * ow];
        if let Some(b) = b {
            before[b].grad[c_out] += dplane.iter().sum::<f64>();
        }
        let in_channels: &[usize] = &if depthwise {
            vec![c_out]
        } else {
            (0..ci).collect::<Vec<_>>()
        };
        for (slot, &c_in) in in_channels.iter().enumerate() {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = if depthwise {
                        (c_out * k + ky) * k + kx
                    } else {
                        ((c_out * ci + slot) * k + ky) * k + kx
                    };
                    let weight = before[w].values[widx];
                    // dw
                    let dw = dot_shifted(
                        dplane,
                        &before[x].values[c_in * h * wdt..(c_in + 1) * h * wdt],
                        oh,
                        ow,
                        h,
                        wdt,
                        ky,
                        kx,
                        pad,
                    );
                    before[w].grad[widx] += dw;
                    // dx
                    if weight != 0.0 {
                        let xgrad_all = &mut before[x].grad;
                        scatter_shifted(
                            &mut xgrad_all[c_in * h * wdt..(c_in + 1) * h * wdt],
                            dplane,
                            weight,
                            oh,
                            ow,
                            h,
                            wdt,
                            ky,
                            kx,
                            pad,
                        );
                    }
                }
            }
        }
    }
}

/// Maximum relative difference between analytic gradients and central
/// finite differences over (a deterministic subsample of) parameter
/// coordinates. `build` must construct a scalar loss from leaves created
/// in the order of `params`. Inputs should sit away from activation
/// kinks; the relu convention here is a zero subgradient at 0.
pub fn grad_check<F>(
    params: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    max_coords: usize,
    build: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let forward = |values: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .zip(values)
            .map(|((shape, _), vals)| tape.leaf(shape, vals.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &vars)?;
        if tape.values(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                len: tape.values(loss).len(),
            });
        }
        Ok(tape.values(loss)[0])
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(shape, vals)| tape.leaf(shape, vals.clone()))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    // coordinate list, deterministically subsampled when large
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, (_, vals)) in params.iter().enumerate() {
        for ci in 0..vals.len() {
            coords.push((pi, ci));
        }
    }
    if coords.len() > max_coords {
        // low-discrepancy stride keeps every tensor represented
        let stride = coords.len() / max_coords;
        coords = coords
            .iter()
            .step_by(stride.max(1))
            .take(max_coords)
            .cloned()
            .collect();
    }

    let base: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let mut max_rel = 0.0f64;
    for (pi, ci) in coords {
        let mut plus = base.clone();
        plus[pi][ci] += eps;
        let mut minus = base.clone();
        minus[pi][ci] -= eps;
        let fd = (forward(&plus)? - forward(&minus)?) / (2.0 * eps);
        let an = analytic[pi][ci];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

//! Wengert tape: records primitive tensor operations in forward order and
//! replays them in reverse to accumulate gradients.
//!
//! A tape is single-owner: one training step records and differentiates on
//! one tape. Tensors themselves are immutable values, so recorded inputs can
//! be shared freely.

use crate::error::{Error, Result};
use crate::kernels::{self, Axis, Padding};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// identical shapes
    None,
    /// `[1,1,C]` against `[W,H,C]`
    ChannelVec,
    /// `[W,H,1]` against `[W,H,C]`
    SpatialMap,
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Reshape { a: Var },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Softmax { a: Var, axis: Axis },
    Conv2d { input: Var, kernel: Var, stride: usize, dilation: usize, pad: Padding },
    Gap { a: Var },
    Bilinear { a: Var, ow: usize, oh: usize },
    L2Channel { a: Var },
    ChannelPos { a: Var },
    Add { a: Var, b: Var, bk: Broadcast },
    Hadamard { a: Var, b: Var, bk: Broadcast },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Scale { a: Var, k: T },
    AddScalar { a: Var },
    ConcatChannels { a: Var, b: Var },
    SumAll { a: Var },
    /// Pixel-averaged binary cross-entropy against a constant target, with
    /// predictions clamped to `[CLAMP, 1-CLAMP]`.
    Bce { pred: Var, target: Tensor<T> },
    /// Elementwise max against a constant tensor (subgradient: the input wins ties).
    MaxWith { a: Var, other: Tensor<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape { .. } => "reshape",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Softmax { .. } => "softmax_axis",
            Op::Conv2d { .. } => "conv2d",
            Op::Gap { .. } => "global_avg_pool",
            Op::Bilinear { .. } => "bilinear",
            Op::L2Channel { .. } => "normalize_l2_channel",
            Op::ChannelPos { .. } => "normalize_channel_pos",
            Op::Add { .. } => "add",
            Op::Hadamard { .. } => "hadamard",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SumAll { .. } => "sum",
            Op::Bce { .. } => "bce",
            Op::MaxWith { .. } => "max_with",
        }
    }
}

/// Prediction clamp used inside the BCE primitive.
pub const BCE_CLAMP: f64 = 1e-6;

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Scan every recorded value for NaN/Inf; names the offending node.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(Error::Corrupt { node: format!("node {} ({})", i, n.op.name()) });
            }
        }
        Ok(())
    }

    // ── shape-preserving views ───────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a }))
    }

    // ── matrix ops ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{:?} × {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected matrix, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a).data(), r, c);
        let t = Tensor::new(&[c, r], out)?;
        Ok(self.push(t, Op::Transpose { a }))
    }

    pub fn softmax_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("softmax_axis", format!("expected matrix, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::softmax_axis(self.value(a).data(), r, c, axis);
        let t = Tensor::new(&[r, c], out)?;
        Ok(self.push(t, Op::Softmax { a, axis }))
    }

    // ── spatial ops ──────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        dilation: usize,
        pad: Padding,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {:?}, kernel {:?}", si, sk)));
        }
        let (w, h, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sk[0], sk[3]);
        if sk[1] != k || sk[2] != cin {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {:?} incompatible with input {:?}", sk, si),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extent {} must be odd", k)));
        }
        if pad == Padding::Valid && (dilation * (k - 1) >= w || dilation * (k - 1) >= h) {
            return Err(Error::dim(
                "conv2d",
                format!("dilation {} with k={} exceeds input {:?}", dilation, k, si),
            ));
        }
        let ow = kernels::conv_out_extent(w, k, stride, dilation, pad);
        let oh = kernels::conv_out_extent(h, k, stride, dilation, pad);
        let out = kernels::conv2d(
            self.value(input).data(),
            self.value(kernel).data(),
            w,
            h,
            cin,
            k,
            cout,
            stride,
            dilation,
            pad,
        );
        let t = Tensor::new(&[ow, oh, cout], out)?;
        Ok(self.push(t, Op::Conv2d { input, kernel, stride, dilation, pad }))
    }

    /// Global average pool `[w,h,c] -> [1,1,c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::dim("global_avg_pool", format!("expected map, got {:?}", s)));
        }
        let (w, h, c) = (s[0], s[1], s[2]);
        let data = self.value(a).data();
        let mut out = vec![T::zero(); c];
        for p in 0..w * h {
            for ch in 0..c {
                out[ch] += data[p * c + ch];
            }
        }
        let inv = sc::<T>(1.0 / (w * h) as f64);
        for o in &mut out {
            *o *= inv;
        }
        let t = Tensor::new(&[1, 1, c], out)?;
        Ok(self.push(t, Op::Gap { a }))
    }

    /// Corner-aligned bilinear resize of `[w,h,c]` to `[ow,oh,c]`.
    pub fn bilinear(&mut self, a: Var, ow: usize, oh: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::dim("bilinear", format!("expected map, got {:?}", s)));
        }
        if ow == 0 || oh == 0 {
            return Err(Error::dim("bilinear", "zero-sized target".to_string()));
        }
        let (w, h, c) = (s[0], s[1], s[2]);
        let out = kernels::bilinear(self.value(a).data(), w, h, c, ow, oh);
        let t = Tensor::new(&[ow, oh, c], out)?;
        Ok(self.push(t, Op::Bilinear { a, ow, oh }))
    }

    pub fn normalize_l2_channel(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::dim("normalize", format!("expected map, got {:?}", s)));
        }
        let (w, h, c) = (s[0], s[1], s[2]);
        let out = kernels::l2_channel(self.value(a).data(), w * h, c);
        let t = Tensor::new(&[w, h, c], out)?;
        Ok(self.push(t, Op::L2Channel { a }))
    }

    pub fn normalize_channel_pos(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::dim("normalize", format!("expected map, got {:?}", s)));
        }
        let (w, h, c) = (s[0], s[1], s[2]);
        let out = kernels::channel_pos(self.value(a).data(), w * h, c);
        let t = Tensor::new(&[w, h, c], out)?;
        Ok(self.push(t, Op::ChannelPos { a }))
    }

    // ── elementwise ──────────────────────────────────────────────────────

    fn broadcast_kind(&self, big: Var, small: Var, op: &'static str) -> Result<Broadcast> {
        let (sb, ss) = (self.shape(big), self.shape(small));
        if sb == ss {
            return Ok(Broadcast::None);
        }
        if sb.len() == 3 && ss.len() == 3 {
            if ss[0] == 1 && ss[1] == 1 && ss[2] == sb[2] {
                return Ok(Broadcast::ChannelVec);
            }
            if ss[0] == sb[0] && ss[1] == sb[1] && ss[2] == 1 {
                return Ok(Broadcast::SpatialMap);
            }
        }
        Err(Error::dim(op, format!("non-broadcastable shapes {:?} and {:?}", sb, ss)))
    }

    /// Orders operands so the broadcast side comes second; both `add` and
    /// `hadamard` commute.
    fn binary_layout(&self, a: Var, b: Var, op: &'static str) -> Result<(Var, Var, Broadcast)> {
        if self.value(a).len() >= self.value(b).len() {
            let bk = self.broadcast_kind(a, b, op)?;
            Ok((a, b, bk))
        } else {
            let bk = self.broadcast_kind(b, a, op)?;
            Ok((b, a, bk))
        }
    }

    fn apply_binary(&self, a: Var, b: Var, bk: Broadcast, f: impl Fn(T, T) -> T) -> Vec<T> {
        let big = self.value(a).data();
        let small = self.value(b).data();
        match bk {
            Broadcast::None => big.iter().zip(small).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ChannelVec => {
                let c = small.len();
                big.iter().enumerate().map(|(i, &x)| f(x, small[i % c])).collect()
            }
            Broadcast::SpatialMap => {
                let c = self.shape(a)[2];
                big.iter().enumerate().map(|(i, &x)| f(x, small[i / c])).collect()
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bk) = self.binary_layout(a, b, "add")?;
        let out = self.apply_binary(a, b, bk, |x, y| x + y);
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Add { a, b, bk }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bk) = self.binary_layout(a, b, "hadamard")?;
        let out = self.apply_binary(a, b, bk, |x, y| x * y);
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Hadamard { a, b, bk }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        self.push(out, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { a })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = sc::<T>(k);
        let out = self.value(a).map(|v| v * kt);
        self.push(out, Op::Scale { a, k: kt })
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let kt = sc::<T>(k);
        let out = self.value(a).map(|v| v + kt);
        self.push(out, Op::AddScalar { a })
    }

    /// Channel-wise concatenation of two `[w,h,·]` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(Error::dim("concat_channels", format!("{:?} with {:?}", sa, sb)));
        }
        let (w, h, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = Vec::with_capacity(w * h * (ca + cb));
        for p in 0..w * h {
            out.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        let t = Tensor::new(&[w, h, ca + cb], out)?;
        Ok(self.push(t, Op::ConcatChannels { a, b }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { a })
    }

    /// Pixel-averaged binary cross-entropy of `pred` against the constant
    /// (non-differentiated) `target`, with predictions clamped away from 0/1.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(
                "bce",
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let lo = sc::<T>(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut acc = T::zero();
        for (&p, &g) in self.value(pred).data().iter().zip(target.data()) {
            let pc = p.max(lo).min(hi);
            acc += -(g * pc.ln() + (T::one() - g) * (T::one() - pc).ln());
        }
        let mean = acc / sc::<T>(target.len() as f64);
        Ok(self.push(Tensor::scalar(mean), Op::Bce { pred, target: target.clone() }))
    }

    /// Elementwise max against a constant tensor of the same shape.
    pub fn max_with(&mut self, a: Var, other: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != other.shape() {
            return Err(Error::dim(
                "max_with",
                format!("{:?} vs {:?}", self.shape(a), other.shape()),
            ));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(other.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let t = Tensor::new(other.shape(), out)?;
        Ok(self.push(t, Op::MaxWith { a, other: other.clone() }))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every leaf reachable or not gets an
    /// entry in the result; untouched leaves read back as exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-store for reads below; taking first avoids aliasing issues.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Reshape { a } => accumulate(&mut grads, *a, &g),
                Op::Matmul { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let da = kernels::matmul_nt(&g, self.value(*b).data(), m, n, k);
                    let db = kernels::matmul_tn(self.value(*a).data(), &g, k, m, n);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Transpose { a } => {
                    let s = self.shape(*a);
                    // g has shape [cols, rows] of the input
                    let da = kernels::transpose(&g, s[1], s[0]);
                    accumulate(&mut grads, *a, &da);
                }
                Op::Softmax { a, axis } => {
                    let s = self.shape(*a);
                    let da =
                        kernels::softmax_backward(node.value.data(), &g, s[0], s[1], *axis);
                    accumulate(&mut grads, *a, &da);
                }
                Op::Conv2d { input, kernel, stride, dilation, pad } => {
                    let si = self.shape(*input);
                    let sk = self.shape(*kernel);
                    let (di, dk) = kernels::conv2d_backward(
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        &g,
                        si[0],
                        si[1],
                        si[2],
                        sk[0],
                        sk[3],
                        *stride,
                        *dilation,
                        *pad,
                    );
                    accumulate(&mut grads, *input, &di);
                    accumulate(&mut grads, *kernel, &dk);
                }
                Op::Gap { a } => {
                    let s = self.shape(*a);
                    let (w, h, c) = (s[0], s[1], s[2]);
                    let inv = sc::<T>(1.0 / (w * h) as f64);
                    let mut da = vec![T::zero(); w * h * c];
                    for p in 0..w * h {
                        for ch in 0..c {
                            da[p * c + ch] = g[ch] * inv;
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                }
                Op::Bilinear { a, ow, oh } => {
                    let s = self.shape(*a);
                    let da = kernels::bilinear_backward(&g, s[0], s[1], s[2], *ow, *oh);
                    accumulate(&mut grads, *a, &da);
                }
                Op::L2Channel { a } => {
                    let s = self.shape(*a);
                    let da =
                        kernels::l2_channel_backward(self.value(*a).data(), &g, s[0] * s[1], s[2]);
                    accumulate(&mut grads, *a, &da);
                }
                Op::ChannelPos { a } => {
                    let s = self.shape(*a);
                    let da =
                        kernels::channel_pos_backward(self.value(*a).data(), &g, s[0] * s[1], s[2]);
                    accumulate(&mut grads, *a, &da);
                }
                Op::Add { a, b, bk } => {
                    accumulate(&mut grads, *a, &g);
                    let db = self.reduce_broadcast(*a, *b, *bk, &g, |_, gv| gv);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Hadamard { a, b, bk } => {
                    let da = self.expand_broadcast(*a, *b, *bk, &g);
                    accumulate(&mut grads, *a, &da);
                    let a_data: Vec<T> =
                        self.value(*a).data().iter().zip(&g).map(|(&x, &gv)| x * gv).collect();
                    let db = self.reduce_broadcast(*a, *b, *bk, &a_data, |_, gv| gv);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Sigmoid { a } => {
                    let da: Vec<T> = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Tanh { a } => {
                    let da: Vec<T> = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::Scale { a, k } => {
                    let da: Vec<T> = g.iter().map(|&gv| gv * *k).collect();
                    accumulate(&mut grads, *a, &da);
                }
                Op::AddScalar { a } => accumulate(&mut grads, *a, &g),
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (ca, cb) = (sa[2], sb[2]);
                    let positions = sa[0] * sa[1];
                    let mut da = vec![T::zero(); positions * ca];
                    let mut db = vec![T::zero(); positions * cb];
                    for p in 0..positions {
                        let base = p * (ca + cb);
                        da[p * ca..(p + 1) * ca].copy_from_slice(&g[base..base + ca]);
                        db[p * cb..(p + 1) * cb].copy_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::SumAll { a } => {
                    let da = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, &da);
                }
                Op::Bce { pred, target } => {
                    let lo = sc::<T>(BCE_CLAMP);
                    let hi = T::one() - lo;
                    let inv_n = sc::<T>(1.0 / target.len() as f64);
                    let da: Vec<T> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            if p < lo || p > hi {
                                T::zero() // clamp region: constant branch
                            } else {
                                g[0] * inv_n * (p - t) / (p * (T::one() - p))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, &da);
                }
                Op::MaxWith { a, other } => {
                    let da: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(other.data())
                        .zip(&g)
                        .map(|((&x, &y), &gv)| if x >= y { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, &da);
                }
            }
        }

        // Recompute slots freed by `take` above: leaves were never taken, so
        // only their entries remain. Everything else is dropped.
        let mut out: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                out[i] = Some(Tensor::new(self.nodes[i].value.shape(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Reduce a full-shaped gradient down onto the broadcast operand.
    fn reduce_broadcast(
        &self,
        big: Var,
        small: Var,
        bk: Broadcast,
        g: &[T],
        f: impl Fn(usize, T) -> T,
    ) -> Vec<T> {
        match bk {
            Broadcast::None => g.iter().enumerate().map(|(i, &gv)| f(i, gv)).collect(),
            Broadcast::ChannelVec => {
                let c = self.value(small).len();
                let mut out = vec![T::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    out[i % c] += f(i, gv);
                }
                out
            }
            Broadcast::SpatialMap => {
                let c = self.shape(big)[2];
                let mut out = vec![T::zero(); self.value(small).len()];
                for (i, &gv) in g.iter().enumerate() {
                    out[i / c] += f(i, gv);
                }
                out
            }
        }
    }

    /// For hadamard: d(big) = g ∘ broadcast(small).
    fn expand_broadcast(&self, _big: Var, small: Var, bk: Broadcast, g: &[T]) -> Vec<T> {
        let sd = self.value(small).data();
        match bk {
            Broadcast::None => g.iter().zip(sd).map(|(&gv, &s)| gv * s).collect(),
            Broadcast::ChannelVec => {
                let c = sd.len();
                g.iter().enumerate().map(|(i, &gv)| gv * sd[i % c]).collect()
            }
            Broadcast::SpatialMap => {
                let c = self.shape(_big)[2];
                g.iter().enumerate().map(|(i, &gv)| gv * sd[i / c]).collect()
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => grads[v.0] = Some(delta.to_vec()),
    }
}

/// Gradient map produced by `Tape::backward`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or exact zeros if the loss never touched it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }
}

/// Hadamard fixup: the gradient of `big` in a broadcast hadamard needs the
/// broadcast values, not the raw ones. Kept private to `backward` above.
#[cfg(test)]
mod tests {
    use super::*;

    fn tensor3(w: usize, h: usize, c: usize, f: impl FnMut(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[w, h, c], f)
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let z = tape.leaf(Tensor::zeros(&[2, 2]));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai).data(), tape.value(a).data());
        let az = tape.matmul(a, z).unwrap();
        assert!(tape.value(az).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_trivial_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let s = tape.softmax_axis(a, Axis::Row).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let b = tape.leaf(Tensor::new(&[1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
        let s = tape.softmax_axis(b, Axis::Row).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones_and_unused_leaf_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(tensor3(2, 2, 1, |i| i as f64));
        let unused = tape.leaf(Tensor::ones(&[3]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &tape).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn hadamard_self_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let sq = tape.hadamard(a, a).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(a).unwrap();
        for (gv, av) in g.data().iter().zip(tape.value(a).data()) {
            assert!((gv - 2.0 * av).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sigmoid_at_zero_and_tanh_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[3]));
        let s = tape.sigmoid(a);
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let b = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 1.0]).unwrap());
        let t = tape.tanh(b);
        let d = tape.value(t).data();
        assert!((d[0] + 0.7616).abs() < 1e-4);
        assert!(d[1].abs() < 1e-12);
        assert!((d[2] - 0.7616).abs() < 1e-4);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(tensor3(3, 2, 2, |i| i as f64 * 0.3 - 1.0));
        let ones = tape.leaf(Tensor::ones(&[3, 2, 2]));
        let out = tape.hadamard(v, ones).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(v).data());
    }

    #[test]
    fn broadcast_channel_vector_and_spatial_map() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(tensor3(2, 2, 3, |i| i as f64));
        let cvec = tape.leaf(Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let out = tape.hadamard(v, cvec).unwrap();
        assert_eq!(tape.shape(out), &[2, 2, 3]);
        assert_eq!(tape.value(out).at3(1, 0, 2), tape.value(v).at3(1, 0, 2) * 3.0);
        let smap = tape.leaf(Tensor::new(&[2, 2, 1], vec![1.0, 0.0, 2.0, 1.0]).unwrap());
        let out2 = tape.hadamard(v, smap).unwrap();
        assert_eq!(tape.value(out2).at3(1, 0, 1), 0.0);
        assert_eq!(tape.value(out2).at3(0, 1, 0), tape.value(v).at3(0, 1, 0) * 2.0);
        // non-broadcastable
        let bad = tape.leaf(Tensor::zeros(&[2, 1, 3]));
        assert!(tape.add(v, bad).is_err());
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::full(&[4, 4, 1], 0.5));
        let target = Tensor::from_fn(&[4, 4, 1], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let l = tape.bce(pred, &target).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn finiteness_check_names_node() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[1], vec![f64::INFINITY]).unwrap());
        let _ = tape.sigmoid(a);
        let err = tape.check_finite().unwrap_err().to_string();
        assert!(err.contains("node 0"));
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(tensor3(2, 1, 2, |i| i as f64));
        let b = tape.leaf(tensor3(2, 1, 1, |i| 10.0 + i as f64));
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(cat), &[2, 1, 3]);
        let w = tape.leaf(Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = tape.hadamard(cat, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 6.0]);
    }

    #[test]
    fn gap_of_constant_map() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::full(&[3, 5, 2], 1.25));
        let g = tape.global_avg_pool(v).unwrap();
        assert_eq!(tape.shape(g), &[1, 1, 2]);
        assert!(tape.value(g).data().iter().all(|&x| (x - 1.25).abs() < 1e-12));
    }
}

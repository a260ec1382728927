//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] replays the
//! node list in reverse, accumulating gradients. Values are addressed by
//! lightweight [`Var`] handles, so models never hold tensor references across
//! tape mutations.

use crate::error::{Error, Result};
use crate::kernels::{self, BnSaved, ConvGeom};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward/eval switch for layers with batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

enum OpRecord<T: Element> {
    Leaf { name: Option<String> },
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<u32> },
    Upsample2x { input: Var },
    BroadcastSpatial { input: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    GlobalAvgPool { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    Mul { a: Var, b: Var, broadcast_b: bool },
    Add { a: Var, b: Var, broadcast_b: bool },
    Concat { parts: Vec<Var> },
    Sum { input: Var },
    Bce { pred: Var, target: Tensor<T> },
    Dice { pred: Var, target: Tensor<T>, smooth: f64 },
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: OpRecord<T>,
}

/// Append-only record of one forward pass. Consumable by a single
/// [`Tape::backward`] call.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: OpRecord<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::Autodiff(
                "tape already consumed by backward; start a new forward pass".into(),
            ));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input; no gradient will flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, false, OpRecord::Leaf { name: None })
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(T::from_f64(value)))
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, true, OpRecord::Leaf { name: None })
    }

    /// Records a differentiable input whose gradient can later be retrieved
    /// by name via [`Tape::named_grads`].
    pub fn leaf_named(&mut self, value: Tensor<T>, name: &str) -> Result<Var> {
        self.push(
            value,
            true,
            OpRecord::Leaf {
                name: Some(name.to_string()),
            },
        )
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(Error::shape("conv2d: stride and dilation must be >= 1"));
        }
        let geom = ConvGeom { stride, padding, dilation };
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.c != ws.c {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels but weight expects {}",
                xs.c, ws.c
            )));
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape(format!(
                "conv2d: bias shape {bs} does not match (1,{},1,1)",
                ws.n
            )));
        }
        let (oh, ow) = match (geom.out_extent(xs.h, ws.h), geom.out_extent(xs.w, ws.w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: non-positive output size for input {xs} and kernel {}x{}",
                    ws.h, ws.w
                )))
            }
        };
        debug_assert!(oh > 0 && ow > 0);
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), self.value(bias), geom);
        let req = self.requires(input) || self.requires(weight) || self.requires(bias);
        self.push(out, req, OpRecord::Conv2d { input, weight, bias, geom })
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "maxpool2x2: spatial dims must be even, got {s}"
            )));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(input));
        let req = self.requires(input);
        self.push(out, req, OpRecord::MaxPool { input, argmax })
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2x_forward(self.value(input));
        let req = self.requires(input);
        self.push(out, req, OpRecord::Upsample2x { input })
    }

    /// Replicates a `(N,C,1,1)` value over an `h x w` grid.
    pub fn broadcast_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.value(input).shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::shape(format!(
                "broadcast_spatial: expected 1x1 spatial input, got {s}"
            )));
        }
        let out = kernels::broadcast_spatial_forward(self.value(input), h, w);
        let req = self.requires(input);
        self.push(out, req, OpRecord::BroadcastSpatial { input })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        // float max would swallow NaN; propagate it so a poisoned forward
        // surfaces as a non-finite loss
        let out = self
            .value(input)
            .map(|v| if v.is_nan() { v } else { v.max(T::zero()) });
        let req = self.requires(input);
        self.push(out, req, OpRecord::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(kernels::sigmoid_scalar);
        let req = self.requires(input);
        self.push(out, req, OpRecord::Sigmoid { input })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let s = self.value(input).shape();
        let expect = Shape::new(1, s.c, 1, 1);
        if self.value(gamma).shape() != expect || self.value(beta).shape() != expect {
            return Err(Error::shape(format!(
                "batchnorm: gamma/beta must be {expect} for input {s}"
            )));
        }
        if running_mean.len() != s.c || running_var.len() != s.c {
            return Err(Error::shape("batchnorm: running stats length mismatch"));
        }
        let (out, saved) = kernels::batchnorm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode.is_train(),
            eps,
            momentum,
        );
        let req = self.requires(input) || self.requires(gamma) || self.requires(beta);
        self.push(out, req, OpRecord::BatchNorm { input, gamma, beta, saved })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool_forward(self.value(input));
        let req = self.requires(input);
        self.push(out, req, OpRecord::GlobalAvgPool { input })
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let s = self.value(input).shape();
        let ws = self.value(weight).shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::shape(format!("dense: expected 1x1 spatial input, got {s}")));
        }
        if s.c != ws.c {
            return Err(Error::shape(format!(
                "dense: input has {} channels but weight expects {}",
                s.c, ws.c
            )));
        }
        if self.value(bias).shape() != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape("dense: bias shape mismatch"));
        }
        let out = kernels::dense_forward(self.value(input), self.value(weight), self.value(bias));
        let req = self.requires(input) || self.requires(weight) || self.requires(bias);
        self.push(out, req, OpRecord::Dense { input, weight, bias })
    }

    /// Shapes must match, or `b` may carry a single channel that broadcasts
    /// across the channels of `a`.
    fn broadcast_kind(&self, a: Var, b: Var, op: &str) -> Result<bool> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(false)
        } else if sb.c == 1 && sa.c > 1 && sa.n == sb.n && sa.h == sb.h && sa.w == sb.w {
            Ok(true)
        } else {
            Err(Error::shape(format!("{op}: incompatible shapes {sa} and {sb}")))
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast_b = self.broadcast_kind(a, b, "mul")?;
        let out = self.zip(a, b, broadcast_b, |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, req, OpRecord::Mul { a, b, broadcast_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast_b = self.broadcast_kind(a, b, "add")?;
        let out = self.zip(a, b, broadcast_b, |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, req, OpRecord::Add { a, b, broadcast_b })
    }

    fn zip(&self, a: Var, b: Var, broadcast_b: bool, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let tb = self.value(b);
        let s = ta.shape();
        if !broadcast_b {
            let data = ta
                .iter()
                .zip(tb.iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(s, data)
        } else {
            let plane = s.h * s.w;
            let mut data = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                let bplane = &tb.data()[n * plane..(n + 1) * plane];
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    for i in 0..plane {
                        data[base + i] = f(ta.data()[base + i], bplane[i]);
                    }
                }
            }
            Tensor::from_vec(s, data)
        }
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels: empty part list"));
        }
        let first = self.value(parts[0]).shape();
        let mut c_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::shape(format!(
                    "concat_channels: spatial mismatch {s} vs {first}"
                )));
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let plane = first.h * first.w;
        let mut data = vec![T::zero(); out_shape.numel()];
        for n in 0..first.n {
            let mut c_off = 0;
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape().c;
                let src = &t.data()[n * pc * plane..(n + 1) * pc * plane];
                let dst_base = (n * c_total + c_off) * plane;
                data[dst_base..dst_base + pc * plane].copy_from_slice(src);
                c_off += pc;
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            Tensor::from_vec(out_shape, data),
            req,
            OpRecord::Concat { parts: parts.to_vec() },
        )
    }

    /// Full reduction to a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(input).iter() {
            acc += v;
        }
        let req = self.requires(input);
        self.push(Tensor::scalar(acc), req, OpRecord::Sum { input })
    }

    fn check_target(&self, pred: Var, target: &Tensor<T>, op: &str) -> Result<()> {
        let ps = self.value(pred).shape();
        if ps != target.shape() {
            return Err(Error::shape(format!(
                "{op}: prediction {ps} and target {} differ",
                target.shape()
            )));
        }
        if !target.iter().all(|&v| v == T::zero() || v == T::one()) {
            return Err(Error::shape(format!("{op}: target values must be exactly 0 or 1")));
        }
        Ok(())
    }

    /// Mean binary cross-entropy with predictions clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target(pred, target, "bce_loss")?;
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut acc = 0.0;
        for (&p, &y) in self.value(pred).iter().zip(target.iter()) {
            // branch clamp so NaN predictions propagate instead of being
            // silently replaced
            let pc = if p < lo {
                lo
            } else if p > hi {
                hi
            } else {
                p
            }
            .to_f64();
            let y = y.to_f64();
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let n = target.numel() as f64;
        let req = self.requires(pred);
        self.push(
            Tensor::scalar(T::from_f64(acc / n)),
            req,
            OpRecord::Bce { pred, target: target.clone() },
        )
    }

    /// Soft dice loss `1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s)`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
        self.check_target(pred, target, "dice_loss")?;
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut ysum = 0.0;
        for (&p, &y) in self.value(pred).iter().zip(target.iter()) {
            inter += p.to_f64() * y.to_f64();
            psum += p.to_f64();
            ysum += y.to_f64();
        }
        let loss = 1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth);
        let req = self.requires(pred);
        self.push(
            Tensor::scalar(T::from_f64(loss)),
            req,
            OpRecord::Dice { pred, target: target.clone(), smooth },
        )
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), g.shape());
                let dst = existing.data_mut();
                for (d, &s) in dst.iter_mut().zip(g.iter()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar loss. Populates gradients of every node
    /// with `requires_grad` on the path; differentiable leaves off the path
    /// end up with zero gradients. Consumes the tape: further ops and a
    /// second backward are rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Autodiff("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("backward without a recorded forward pass".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            // Detach the node so we can accumulate into earlier nodes.
            let node = std::mem::replace(
                &mut self.nodes[i],
                Node {
                    value: Tensor::zeros(Shape::new(0, 0, 0, 0)),
                    grad: None,
                    requires_grad: false,
                    op: OpRecord::Leaf { name: None },
                },
            );
            let g = node.grad.as_ref().expect("checked above");
            match &node.op {
                OpRecord::Leaf { .. } => {}
                OpRecord::Conv2d { input, weight, bias, geom } => {
                    let need_dx = self.requires(*input);
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        g,
                        *geom,
                        need_dx,
                    );
                    if need_dx {
                        self.accumulate(*input, dx);
                    }
                    self.accumulate(*weight, dw);
                    self.accumulate(*bias, db);
                }
                OpRecord::MaxPool { input, argmax } => {
                    let dx = kernels::maxpool2x2_backward(g, argmax, self.value(*input).shape());
                    self.accumulate(*input, dx);
                }
                OpRecord::Upsample2x { input } => {
                    let dx = kernels::upsample2x_backward(g, self.value(*input).shape());
                    self.accumulate(*input, dx);
                }
                OpRecord::BroadcastSpatial { input } => {
                    let dx = kernels::broadcast_spatial_backward(g);
                    self.accumulate(*input, dx);
                }
                OpRecord::Relu { input } => {
                    let x = self.value(*input);
                    let data = x
                        .iter()
                        .zip(g.iter())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(*input, Tensor::from_vec(x.shape(), data));
                }
                OpRecord::Sigmoid { input } => {
                    let y = &node.value;
                    let data = y
                        .iter()
                        .zip(g.iter())
                        .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                        .collect();
                    self.accumulate(*input, Tensor::from_vec(y.shape(), data));
                }
                OpRecord::BatchNorm { input, gamma, beta, saved } => {
                    let (dx, dgamma, dbeta) = kernels::batchnorm_backward(g, self.value(*gamma), saved);
                    self.accumulate(*input, dx);
                    self.accumulate(*gamma, dgamma);
                    self.accumulate(*beta, dbeta);
                }
                OpRecord::GlobalAvgPool { input } => {
                    let dx = kernels::global_avg_pool_backward(g, self.value(*input).shape());
                    self.accumulate(*input, dx);
                }
                OpRecord::Dense { input, weight, bias } => {
                    let (dx, dw, db) = kernels::dense_backward(self.value(*input), self.value(*weight), g);
                    self.accumulate(*input, dx);
                    self.accumulate(*weight, dw);
                    self.accumulate(*bias, db);
                }
                OpRecord::Mul { a, b, broadcast_b } => {
                    let ga = self.zip_grad(g, *b, *broadcast_b);
                    if *broadcast_b {
                        // db = sum over channels of g * a
                        let ta = self.value(*a);
                        let prod = Tensor::from_vec(
                            ta.shape(),
                            g.iter().zip(ta.iter()).map(|(&gv, &av)| gv * av).collect(),
                        );
                        self.accumulate(*b, kernels::reduce_channels_to_one(&prod));
                    } else {
                        let ta = self.value(*a);
                        let db = Tensor::from_vec(
                            ta.shape(),
                            g.iter().zip(ta.iter()).map(|(&gv, &av)| gv * av).collect(),
                        );
                        self.accumulate(*b, db);
                    }
                    self.accumulate(*a, ga);
                }
                OpRecord::Add { a, b, broadcast_b } => {
                    self.accumulate(*a, g.clone());
                    if *broadcast_b {
                        self.accumulate(*b, kernels::reduce_channels_to_one(g));
                    } else {
                        self.accumulate(*b, g.clone());
                    }
                }
                OpRecord::Concat { parts } => {
                    let s = g.shape();
                    let plane = s.h * s.w;
                    let mut c_off = 0;
                    for &p in parts {
                        let ps = self.value(p).shape();
                        let mut dp = vec![T::zero(); ps.numel()];
                        for n in 0..s.n {
                            let src_base = (n * s.c + c_off) * plane;
                            let dst_base = n * ps.c * plane;
                            dp[dst_base..dst_base + ps.c * plane]
                                .copy_from_slice(&g.data()[src_base..src_base + ps.c * plane]);
                        }
                        c_off += ps.c;
                        self.accumulate(p, Tensor::from_vec(ps, dp));
                    }
                }
                OpRecord::Sum { input } => {
                    let s = self.value(*input).shape();
                    self.accumulate(*input, Tensor::full(s, g.data()[0]));
                }
                OpRecord::Bce { pred, target } => {
                    let gs = g.data()[0].to_f64();
                    let p = self.value(*pred);
                    let n = p.numel() as f64;
                    let lo = BCE_CLAMP;
                    let hi = 1.0 - BCE_CLAMP;
                    let data = p
                        .iter()
                        .zip(target.iter())
                        .map(|(&pv, &yv)| {
                            let pf = pv.to_f64();
                            if pf <= lo || pf >= hi {
                                return T::zero(); // clamp region: flat
                            }
                            let y = yv.to_f64();
                            T::from_f64(gs * (pf - y) / (pf * (1.0 - pf)) / n)
                        })
                        .collect();
                    self.accumulate(*pred, Tensor::from_vec(p.shape(), data));
                }
                OpRecord::Dice { pred, target, smooth } => {
                    let gs = g.data()[0].to_f64();
                    let p = self.value(*pred);
                    let mut inter = 0.0;
                    let mut psum = 0.0;
                    let mut ysum = 0.0;
                    for (&pv, &yv) in p.iter().zip(target.iter()) {
                        inter += pv.to_f64() * yv.to_f64();
                        psum += pv.to_f64();
                        ysum += yv.to_f64();
                    }
                    let num = 2.0 * inter + smooth;
                    let den = psum + ysum + smooth;
                    let data = p
                        .iter()
                        .zip(target.iter())
                        .map(|(_, &yv)| {
                            let y = yv.to_f64();
                            T::from_f64(gs * -(2.0 * y * den - num) / (den * den))
                        })
                        .collect();
                    self.accumulate(*pred, Tensor::from_vec(p.shape(), data));
                }
            }
            self.nodes[i] = node;
        }

        // Differentiable leaves the loss never touched still report a
        // gradient: zero.
        for node in self.nodes.iter_mut() {
            if node.requires_grad && node.grad.is_none() {
                if let OpRecord::Leaf { .. } = node.op {
                    node.grad = Some(Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(())
    }

    fn zip_grad(&self, g: &Tensor<T>, b: Var, broadcast_b: bool) -> Tensor<T> {
        let tb = self.value(b);
        let s = g.shape();
        if !broadcast_b {
            Tensor::from_vec(
                s,
                g.iter().zip(tb.iter()).map(|(&gv, &bv)| gv * bv).collect(),
            )
        } else {
            let plane = s.h * s.w;
            let mut data = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                let bplane = &tb.data()[n * plane..(n + 1) * plane];
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    for i in 0..plane {
                        data[base + i] = g.data()[base + i] * bplane[i];
                    }
                }
            }
            Tensor::from_vec(s, data)
        }
    }

    /// Gradients of named leaves, in recording order. Repeated names are
    /// merged by summation.
    pub fn named_grads(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        for node in &self.nodes {
            if let OpRecord::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = &node.grad {
                    if let Some(existing) = out.iter_mut().find(|(n, _)| n == name) {
                        let dst = existing.1.data_mut();
                        for (d, &s) in dst.iter_mut().zip(g.iter()) {
                            *d += s;
                        }
                    } else {
                        out.push((name.clone(), g.clone()));
                    }
                }
            }
        }
        out
    }
}

const BCE_CLAMP: f64 = 1e-7;

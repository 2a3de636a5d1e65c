//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks the
//! tape in reverse and returns the gradient of a scalar with respect to every
//! node that depends on a trainable leaf. Nodes that only depend on constants
//! never receive gradients, so frozen sub-networks cost nothing in the
//! backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard used for every norm that appears in a denominator.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScalarMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom, cols: Vec<f64> },
    Upsample2x(Var),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    MatVec { w: Var, x: Var, b: Var },
    ChannelSoftmax(Var),
    PixelNormalize(Var),
    CrossEntropy { logits: Var, labels: Vec<u16>, ignore: u16, count: usize },
    CosineDistance(Var, Var),
    PixelCosine(Var, Var),
    BceWithLogits { logit: Var, target: f64 },
    Crop { x: Var, top: usize, left: usize },
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Values of every stop-gradient node, in creation order.
    stops: Vec<Tensor>,
    /// Values to substitute for stop-gradient nodes instead of computing
    /// them; see [`Graph::with_stop_values`].
    replay: Option<Vec<Tensor>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: the callers pass buffers sized m×k, k×n, m×n for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_h * g.out_w;
    let rows = g.in_c * g.k * g.k;
    let mut cols = vec![0.0; rows * p];
    for ci in 0..g.in_c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for ci in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = ci * g.in_h * g.in_w + iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            out[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn softmax_pixels(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3().expect("softmax on C×H×W");
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..hw {
        let mut mx = f64::NEG_INFINITY;
        for k in 0..c {
            mx = mx.max(d[k * hw + p]);
        }
        let mut z = 0.0;
        for k in 0..c {
            let e = (d[k * hw + p] - mx).exp();
            out[k * hw + p] = e;
            z += e;
        }
        for k in 0..c {
            out[k * hw + p] /= z;
        }
    }
    Tensor::from_vec(x.shape(), out).expect("same shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.stop_gradient(value)
    }

    /// Constant that acts as a stop-gradient: its value is recorded, and in
    /// a replaying graph it is replaced by the recorded value.
    pub fn stop_gradient(&mut self, value: Tensor) -> Var {
        let i = self.stops.len();
        let value = match &self.replay {
            Some(r) => r.get(i).cloned().unwrap_or(value),
            None => value,
        };
        self.stops.push(value.clone());
        self.constant(value)
    }

    /// Values of the stop-gradient nodes created so far.
    pub fn stop_values(&self) -> &[Tensor] {
        &self.stops
    }

    /// Graph whose stop-gradient nodes take `values` in order. Evaluating
    /// an objective with perturbed parameters in such a graph gives the
    /// function whose derivative backpropagation computes, which is what
    /// finite differences must be compared against.
    pub fn with_stop_values(values: Vec<Tensor>) -> Self {
        Self { replay: Some(values), ..Self::default() }
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!("{name}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let v = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(self.value(a).shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `scale · a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(&[a]);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Single-element `s` times tensor `x`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scalar_mul: first argument must have one element"));
        }
        let k = self.scalar(s);
        let v = self.value(x).map(|e| k * e);
        let ng = self.ng(&[s, x]);
        Ok(self.push(v, Op::ScalarMul(s, x), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let ng = self.ng(&[a]);
        self.push(v, Op::Mean(a), ng)
    }

    /// Sum of scalars; an empty slice yields a constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// 2-D convolution of a `C×H×W` input with a `O×C×k×k` kernel and a
    /// length-`O` bias, zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (in_c, in_h, in_w) = self.value(input).dims3()?;
        let (out_c, k) = match self.value(weight).shape() {
            &[o, c, kh, kw] if c == in_c && kh == kw => (o, kh),
            s => return Err(shape_err(format!("conv2d: kernel {s:?} for {in_c} input channels"))),
        };
        if self.value(bias).shape() != [out_c] {
            return Err(shape_err(format!("conv2d: bias {:?} for {out_c} outputs", self.value(bias).shape())));
        }
        if stride == 0 || in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(shape_err("conv2d: kernel larger than padded input"));
        }
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let p = geom.out_h * geom.out_w;
        let r = in_c * k * k;
        let mut out = vec![0.0; out_c * p];
        for (co, &b) in self.value(bias).data().iter().enumerate() {
            out[co * p..(co + 1) * p].fill(b);
        }
        gemm(out_c, r, p, self.value(weight).data(), (r as isize, 1), &cols, (p as isize, 1), 1.0, &mut out);
        let v = Tensor::from_vec(&[out_c, geom.out_h, geom.out_w], out)?;
        let ng = self.ng(&[input, weight, bias]);
        Ok(self.push(v, Op::Conv2d { input, weight, bias, geom, cols }, ng))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let src = self.value(a).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[ch * oh * ow + y * ow + x] = src[ch * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let v = Tensor::from_vec(&[c, oh, ow], out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Upsample2x(a), ng))
    }

    /// Per-channel `scale[c] · x[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(shape_err(format!(
                "channel_affine: {c} channels vs scale {:?} shift {:?}",
                self.value(scale).shape(),
                self.value(shift).shape()
            )));
        }
        let hw = h * w;
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| s[i / hw] * v + b[i / hw]).collect();
        let v = Tensor::from_vec(&[c, h, w], data)?;
        let ng = self.ng(&[x, scale, shift]);
        Ok(self.push(v, Op::ChannelAffine { x, scale, shift }, ng))
    }

    /// `W x + b` for `W: O×I`, `x: I`, `b: O`.
    pub fn matvec(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (o, i) = match self.value(w).shape() {
            &[o, i] => (o, i),
            s => return Err(shape_err(format!("matvec: weight {s:?}"))),
        };
        if self.value(x).len() != i || self.value(b).shape() != [o] {
            return Err(shape_err("matvec: operand sizes"));
        }
        let (wd, xd, bd) = (self.value(w).data(), self.value(x).data(), self.value(b).data());
        let data = (0..o).map(|r| bd[r] + dot(&wd[r * i..(r + 1) * i], xd)).collect();
        let v = Tensor::from_vec(&[o], data)?;
        let ng = self.ng(&[w, x, b]);
        Ok(self.push(v, Op::MatVec { w, x, b }, ng))
    }

    /// Softmax across channels at every pixel.
    pub fn channel_softmax(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims3()?;
        let v = softmax_pixels(self.value(a));
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::ChannelSoftmax(a), ng))
    }

    /// L2-normalises the channel vector at every pixel.
    pub fn pixel_normalize(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let hw = h * w;
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for p in 0..hw {
            let n = (0..c).map(|k| d[k * hw + p].powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
            for k in 0..c {
                out[k * hw + p] = d[k * hw + p] / n;
            }
        }
        let v = Tensor::from_vec(&[c, h, w], out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::PixelNormalize(a), ng))
    }

    /// Mean over non-ignored pixels of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u16], ignore: u16) -> Result<Var> {
        let (c, h, w) = self.value(logits).dims3()?;
        let hw = h * w;
        if labels.len() != hw {
            return Err(shape_err(format!("cross_entropy: {} labels for {hw} pixels", labels.len())));
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        if count == 0 {
            return Err(Error::UndefinedLoss("every pixel carries the ignore label".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= c) {
            return Err(Error::InvalidInput(format!("class id {bad} outside [0, {c})")));
        }
        let d = self.value(logits).data();
        let mut total = 0.0;
        for (p, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let mx = (0..c).map(|k| d[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).map(|k| (d[k * hw + p] - mx).exp()).sum::<f64>().ln();
            total += lse - d[l as usize * hw + p];
        }
        let v = Tensor::scalar(total / count as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), ignore, count }, ng))
    }

    /// `1 − a·b / (|a||b|)` over the flattened tensors; norms clamped at
    /// [`NORM_EPS`].
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(format!(
                "cosine_distance: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let na = ta.norm().max(NORM_EPS);
        let nb = tb.norm().max(NORM_EPS);
        let v = Tensor::scalar(1.0 - dot(ta.data(), tb.data()) / (na * nb));
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::CosineDistance(a, b), ng))
    }

    /// Mean over pixels of `1 − cos` between channel vectors.
    pub fn pixel_cosine_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_same_shape(pred, target, "pixel_cosine_loss")?;
        let (c, h, w) = self.value(pred).dims3()?;
        let hw = h * w;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let mut total = 0.0;
        for px in 0..hw {
            let (mut pp, mut tt, mut pt) = (0.0, 0.0, 0.0);
            for k in 0..c {
                let (a, b) = (p[k * hw + px], t[k * hw + px]);
                pp += a * a;
                tt += b * b;
                pt += a * b;
            }
            total += 1.0 - pt / (pp.sqrt().max(NORM_EPS) * tt.sqrt().max(NORM_EPS));
        }
        let v = Tensor::scalar(total / hw as f64);
        let ng = self.ng(&[pred, target]);
        Ok(self.push(v, Op::PixelCosine(pred, target), ng))
    }

    /// Binary cross-entropy of a single logit against a constant target.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.value(logit).len() != 1 {
            return Err(shape_err("bce_with_logits expects one logit"));
        }
        let z = self.scalar(logit);
        let v = Tensor::scalar(z.max(0.0) - target * z + (-z.abs()).exp().ln_1p());
        let ng = self.ng(&[logit]);
        Ok(self.push(v, Op::BceWithLogits { logit, target }, ng))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let v = self.value(x).crop(top, left, height, width)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Crop { x, top, left }, ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (ha, wa) != (hb, wb) {
            return Err(shape_err("concat_channels: spatial mismatch"));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::from_vec(&[ca + cb, ha, wa], data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::ConcatChannels(a, b), ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let hw = h * w;
        let d = self.value(x).data();
        let data = (0..c).map(|k| d[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let v = Tensor::from_vec(&[c], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), ng))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.nodes[v.0].needs_grad {
            let g = f();
            self.accumulate(grads, v, g);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, *a, || {
                    let d = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    Tensor::from_vec(g.shape(), d).unwrap()
                });
                self.accumulate_with(grads, *b, || {
                    let d = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    Tensor::from_vec(g.shape(), d).unwrap()
                });
            }
            Op::Affine(a, s) => self.accumulate_with(grads, *a, || g.map(|x| s * x)),
            Op::ScalarMul(s, x) => {
                self.accumulate_with(grads, *s, || Tensor::scalar(dot(gd, val(*x).data())));
                let k = val(*s).item();
                self.accumulate_with(grads, *x, || g.map(|e| k * e));
            }
            Op::Relu(a) => self.accumulate_with(grads, *a, || {
                let d = gd.iter().zip(val(*a).data()).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect();
                Tensor::from_vec(g.shape(), d).unwrap()
            }),
            Op::Exp(a) => self.accumulate_with(grads, *a, || {
                let d = gd.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                Tensor::from_vec(g.shape(), d).unwrap()
            }),
            Op::Abs(a) => self.accumulate_with(grads, *a, || {
                let d = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y.signum() * (*y != 0.0) as u8 as f64).collect();
                Tensor::from_vec(g.shape(), d).unwrap()
            }),
            Op::Sum(a) => self.accumulate_with(grads, *a, || Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => self.accumulate_with(grads, *a, || {
                let t = val(*a);
                Tensor::full(t.shape(), g.item() / t.len() as f64)
            }),
            Op::Reshape(a) => self.accumulate_with(grads, *a, || g.clone().reshape(val(*a).shape()).unwrap()),
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let p = geom.out_h * geom.out_w;
                let r = geom.in_c * geom.k * geom.k;
                let out_c = g.shape()[0];
                self.accumulate_with(grads, *weight, || {
                    let mut dw = vec![0.0; out_c * r];
                    gemm(out_c, p, r, gd, (p as isize, 1), cols, (1, p as isize), 0.0, &mut dw);
                    Tensor::from_vec(val(*weight).shape(), dw).unwrap()
                });
                self.accumulate_with(grads, *bias, || {
                    let db = (0..out_c).map(|c| gd[c * p..(c + 1) * p].iter().sum()).collect();
                    Tensor::from_vec(&[out_c], db).unwrap()
                });
                self.accumulate_with(grads, *input, || {
                    let mut dcols = vec![0.0; r * p];
                    gemm(r, out_c, p, val(*weight).data(), (1, r as isize), gd, (p as isize, 1), 0.0, &mut dcols);
                    let mut dx = vec![0.0; geom.in_c * geom.in_h * geom.in_w];
                    col2im(&dcols, geom, &mut dx);
                    Tensor::from_vec(val(*input).shape(), dx).unwrap()
                });
            }
            Op::Upsample2x(a) => self.accumulate_with(grads, *a, || {
                let (c, h, w) = val(*a).dims3().unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            dx[ch * h * w + (y / 2) * w + x / 2] += gd[ch * oh * ow + y * ow + x];
                        }
                    }
                }
                Tensor::from_vec(&[c, h, w], dx).unwrap()
            }),
            Op::ChannelAffine { x, scale, shift } => {
                let (c, h, w) = val(*x).dims3().unwrap();
                let hw = h * w;
                let s = val(*scale).data();
                self.accumulate_with(grads, *x, || {
                    let d = gd.iter().enumerate().map(|(i, v)| v * s[i / hw]).collect();
                    Tensor::from_vec(&[c, h, w], d).unwrap()
                });
                self.accumulate_with(grads, *scale, || {
                    let xd = val(*x).data();
                    let d = (0..c).map(|k| dot(&gd[k * hw..(k + 1) * hw], &xd[k * hw..(k + 1) * hw])).collect();
                    Tensor::from_vec(&[c], d).unwrap()
                });
                self.accumulate_with(grads, *shift, || {
                    let d = (0..c).map(|k| gd[k * hw..(k + 1) * hw].iter().sum()).collect();
                    Tensor::from_vec(&[c], d).unwrap()
                });
            }
            Op::MatVec { w, x, b } => {
                let (o, i) = (val(*w).shape()[0], val(*w).shape()[1]);
                self.accumulate_with(grads, *w, || {
                    let xd = val(*x).data();
                    let d = (0..o * i).map(|k| gd[k / i] * xd[k % i]).collect();
                    Tensor::from_vec(&[o, i], d).unwrap()
                });
                self.accumulate_with(grads, *x, || {
                    let wd = val(*w).data();
                    let d = (0..i).map(|c| (0..o).map(|r| wd[r * i + c] * gd[r]).sum()).collect();
                    Tensor::from_vec(val(*x).shape(), d).unwrap()
                });
                self.accumulate(grads, *b, g.clone());
            }
            Op::ChannelSoftmax(a) => self.accumulate_with(grads, *a, || {
                let (c, h, w) = node.value.dims3().unwrap();
                let hw = h * w;
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for p in 0..hw {
                    let s: f64 = (0..c).map(|k| gd[k * hw + p] * y[k * hw + p]).sum();
                    for k in 0..c {
                        dx[k * hw + p] = y[k * hw + p] * (gd[k * hw + p] - s);
                    }
                }
                Tensor::from_vec(&[c, h, w], dx).unwrap()
            }),
            Op::PixelNormalize(a) => self.accumulate_with(grads, *a, || {
                let (c, h, w) = node.value.dims3().unwrap();
                let hw = h * w;
                let (x, y) = (val(*a).data(), node.value.data());
                let mut dx = vec![0.0; y.len()];
                for p in 0..hw {
                    let n = (0..c).map(|k| x[k * hw + p].powi(2)).sum::<f64>().sqrt();
                    if n > NORM_EPS {
                        let yg: f64 = (0..c).map(|k| y[k * hw + p] * gd[k * hw + p]).sum();
                        for k in 0..c {
                            dx[k * hw + p] = (gd[k * hw + p] - y[k * hw + p] * yg) / n;
                        }
                    } else {
                        for k in 0..c {
                            dx[k * hw + p] = gd[k * hw + p] / NORM_EPS;
                        }
                    }
                }
                Tensor::from_vec(&[c, h, w], dx).unwrap()
            }),
            Op::CrossEntropy { logits, labels, ignore, count } => self.accumulate_with(grads, *logits, || {
                let probs = softmax_pixels(val(*logits));
                let (c, h, w) = probs.dims3().unwrap();
                let hw = h * w;
                let scale = g.item() / *count as f64;
                let mut d = probs.into_data();
                for (p, &l) in labels.iter().enumerate() {
                    if l == *ignore {
                        for k in 0..c {
                            d[k * hw + p] = 0.0;
                        }
                    } else {
                        d[l as usize * hw + p] -= 1.0;
                        for k in 0..c {
                            d[k * hw + p] *= scale;
                        }
                    }
                }
                Tensor::from_vec(&[c, h, w], d).unwrap()
            }),
            Op::CosineDistance(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (ra, rb) = (ta.norm(), tb.norm());
                let (na, nb) = (ra.max(NORM_EPS), rb.max(NORM_EPS));
                let ab = dot(ta.data(), tb.data());
                let gs = g.item();
                let grad_of = |x: &Tensor, other: &Tensor, raw: f64, nx: f64, ny: f64| {
                    let d = x
                        .data()
                        .iter()
                        .zip(other.data())
                        .map(|(&xi, &oi)| {
                            let norm_term = if raw > NORM_EPS { ab * xi / (nx * nx * nx * ny) } else { 0.0 };
                            -gs * (oi / (nx * ny) - norm_term)
                        })
                        .collect();
                    Tensor::from_vec(x.shape(), d).unwrap()
                };
                self.accumulate_with(grads, *a, || grad_of(ta, tb, ra, na, nb));
                self.accumulate_with(grads, *b, || grad_of(tb, ta, rb, nb, na));
            }
            Op::PixelCosine(pred, target) => {
                let (c, h, w) = val(*pred).dims3().unwrap();
                let hw = h * w;
                let (p, t) = (val(*pred).data(), val(*target).data());
                let gs = g.item() / hw as f64;
                let mut dp = vec![0.0; p.len()];
                let mut dt = vec![0.0; p.len()];
                for px in 0..hw {
                    let (mut pp, mut tt, mut pt) = (0.0, 0.0, 0.0);
                    for k in 0..c {
                        let (a, b) = (p[k * hw + px], t[k * hw + px]);
                        pp += a * a;
                        tt += b * b;
                        pt += a * b;
                    }
                    let (rp, rt) = (pp.sqrt(), tt.sqrt());
                    let (np, nt) = (rp.max(NORM_EPS), rt.max(NORM_EPS));
                    for k in 0..c {
                        let (a, b) = (p[k * hw + px], t[k * hw + px]);
                        let np_term = if rp > NORM_EPS { pt * a / (np * np * np * nt) } else { 0.0 };
                        let nt_term = if rt > NORM_EPS { pt * b / (nt * nt * nt * np) } else { 0.0 };
                        dp[k * hw + px] = -gs * (b / (np * nt) - np_term);
                        dt[k * hw + px] = -gs * (a / (np * nt) - nt_term);
                    }
                }
                self.accumulate(grads, *pred, Tensor::from_vec(&[c, h, w], dp).unwrap());
                self.accumulate(grads, *target, Tensor::from_vec(&[c, h, w], dt).unwrap());
            }
            Op::BceWithLogits { logit, target } => self.accumulate_with(grads, *logit, || {
                let z = val(*logit).item();
                let sig = 1.0 / (1.0 + (-z).exp());
                Tensor::full(val(*logit).shape(), g.item() * (sig - target))
            }),
            Op::Crop { x, top, left } => self.accumulate_with(grads, *x, || {
                let (c, h, w) = val(*x).dims3().unwrap();
                let (_, ch, cw) = g.dims3().unwrap();
                let mut dx = vec![0.0; c * h * w];
                for k in 0..c {
                    for r in 0..ch {
                        let dst = k * h * w + (top + r) * w + left;
                        let src = k * ch * cw + r * cw;
                        dx[dst..dst + cw].copy_from_slice(&gd[src..src + cw]);
                    }
                }
                Tensor::from_vec(&[c, h, w], dx).unwrap()
            }),
            Op::ConcatChannels(a, b) => {
                let na = val(*a).len();
                self.accumulate_with(grads, *a, || Tensor::from_vec(val(*a).shape(), gd[..na].to_vec()).unwrap());
                self.accumulate_with(grads, *b, || Tensor::from_vec(val(*b).shape(), gd[na..].to_vec()).unwrap());
            }
            Op::GlobalAvgPool(x) => self.accumulate_with(grads, *x, || {
                let (c, h, w) = val(*x).dims3().unwrap();
                let hw = h * w;
                let d = (0..c * hw).map(|i| gd[i / hw] / hw as f64).collect();
                Tensor::from_vec(&[c, h, w], d).unwrap()
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Central-difference check of `build` with respect to every entry of
    /// every input tensor.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
            let o = build(&mut g, &vs);
            g.scalar(o)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            for i in 0..x.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(vars[k]).map(|g| g.data()[i]).unwrap_or(0.0);
                let scale = analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-5,
                    "input {k} entry {i}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + seed) * 0.7311).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = ramp(&[2, 5, 5], 0.3);
        let w = ramp(&[3, 2, 3, 3], 1.1);
        let b = ramp(&[3], 2.0);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(vx, vw, vb, 2, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[c * 25 + iy as usize * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[o * 9 + oy * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_conv_upsample_relu() {
        check(vec![ramp(&[2, 4, 4], 0.1), ramp(&[3, 2, 3, 3], 0.9), ramp(&[3], 0.2)], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            let y = g.upsample2x(y).unwrap();
            let y = g.relu(y);
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn grad_channel_affine_and_matvec() {
        check(vec![ramp(&[2, 2, 3], 0.4), ramp(&[2, 4], 1.3), ramp(&[4], 2.2), ramp(&[2], 3.1)], |g, v| {
            let s = g.matvec(v[1], v[2], v[3]).unwrap();
            let y = g.channel_affine(v[0], s, v[3]).unwrap();
            let y = g.exp(y);
            g.mean(y)
        });
    }

    #[test]
    fn grad_softmax_normalize_cosines() {
        check(vec![ramp(&[3, 2, 2], 0.5), ramp(&[3, 2, 2], 1.7)], |g, v| {
            let a = g.channel_softmax(v[0]).unwrap();
            let b = g.pixel_normalize(v[1]).unwrap();
            let c = g.pixel_cosine_loss(a, v[1]).unwrap();
            let d = g.cosine_distance(b, v[0]).unwrap();
            let e = g.cosine_distance(a, b).unwrap();
            let s = g.add(c, d).unwrap();
            g.add(s, e).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy_and_bce() {
        let labels = [0u16, 2, 255, 1];
        check(vec![ramp(&[3, 2, 2], 0.8), t(&[], &[0.3])], move |g, v| {
            let ce = g.cross_entropy(v[0], &labels, 255).unwrap();
            let b = g.bce_with_logits(v[1], 1.0).unwrap();
            let b2 = g.bce_with_logits(v[1], 0.0).unwrap();
            let s = g.scalar_mul(v[1], ce).unwrap();
            g.add_all(&[s, b, b2]).unwrap()
        });
    }

    #[test]
    fn grad_crop_concat_pool_abs() {
        check(vec![ramp(&[2, 4, 4], 0.6), ramp(&[1, 2, 2], 1.9)], |g, v| {
            let c = g.crop(v[0], 1, 2, 2, 2).unwrap();
            let cat = g.concat_channels(c, v[1]).unwrap();
            let p = g.global_avg_pool(cat).unwrap();
            let q = g.affine(p, 2.0, 0.5);
            let q = g.abs(q);
            let s = g.sub(q, q).unwrap();
            let r = g.add(q, s).unwrap();
            let f = g.reshape(r, &[3, 1]).unwrap();
            g.sum(f)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.variable(Tensor::scalar(3.0));
        let c = g.mul(a, b).unwrap();
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2, 1, 2]));
        assert!(matches!(g.cross_entropy(x, &[255, 255], 255), Err(Error::UndefinedLoss(_))));
    }
}

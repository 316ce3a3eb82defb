use std::collections::BTreeMap;
use std::fmt;

use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numeric attributes for string-addressed operations.
pub type Attrs = BTreeMap<String, f64>;

/// A user-defined differentiable operation.
///
/// `backward` returns one entry per input; `None` means no gradient flows to that input.
pub trait Function: Send {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

pub enum Op {
    Leaf,
    /// `[n, k] × [k, m]`
    MatMul,
    /// `[n, c, ...] + [c]`, bias broadcast over every axis except 1
    BiasAdd,
    /// NCHW input, OIHW kernel.
    Conv2d { stride: usize, pad: usize },
    UpsampleNearest { factor: usize },
    Relu,
    Sigmoid,
    /// Concatenation along axis 1.
    Concat,
    Add,
    Mul,
    Scale { factor: f64 },
    Pow { exponent: f64 },
    /// `max(x, 0)`, subgradient 0 at exactly 0.
    ClampZero,
    /// Row-wise `x / max(|x|, eps)` over the last axis of `[n, d]`.
    L2Normalize { eps: f64 },
    Mean,
    Sum,
    GlobalAvgPool,
    Flatten,
    /// Mean binary cross entropy of `(prediction, target)`.
    BinaryCrossEntropy,
    /// Mean over rows of `1 - cos(prediction, target)` for `[n, d]` inputs.
    CosineLoss,
    Custom(Box<dyn Function>),
}

/// Probabilities are clamped this far away from 0 and 1 inside the cross entropy.
const BCE_CLAMP: f64 = 1e-12;

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Conv2d { stride, pad } => write!(f, "conv2d(stride={stride}, pad={pad})"),
            Op::UpsampleNearest { factor } => write!(f, "upsample_nearest(factor={factor})"),
            Op::Scale { factor } => write!(f, "scale({factor})"),
            Op::Pow { exponent } => write!(f, "pow({exponent})"),
            Op::L2Normalize { eps } => write!(f, "l2_normalize(eps={eps})"),
            other => f.write_str(other.name()),
        }
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::BiasAdd => "bias_add",
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Pow { .. } => "pow",
            Op::ClampZero => "clamp_zero",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Flatten => "flatten",
            Op::BinaryCrossEntropy => "bce",
            Op::CosineLoss => "cosine_loss",
            Op::Custom(f) => f.name(),
        }
    }

    /// Every built-in differentiable kind, by name.
    pub const DIFFERENTIABLE: &'static [&'static str] = &[
        "matmul",
        "bias_add",
        "conv2d",
        "upsample_nearest",
        "relu",
        "sigmoid",
        "concat",
        "add",
        "mul",
        "scale",
        "pow",
        "clamp_zero",
        "l2_normalize",
        "mean",
        "sum",
        "global_avg_pool",
        "flatten",
        "bce",
        "cosine_loss",
    ];

    /// Build a built-in operation from its name and numeric attributes.
    pub fn parse(kind: &str, attrs: &Attrs) -> Result<Op> {
        let get = |key: &str| -> Result<f64> {
            attrs
                .get(key)
                .copied()
                .ok_or_else(|| Error::invalid(format!("{kind}: missing attribute `{key}`")))
        };
        let get_usize = |key: &str| -> Result<usize> {
            let v = get(key)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::invalid(format!("{kind}: `{key}` must be a non-negative integer")));
            }
            Ok(v as usize)
        };
        Ok(match kind {
            "matmul" => Op::MatMul,
            "bias_add" => Op::BiasAdd,
            "conv2d" => Op::Conv2d {
                stride: get_usize("stride")?,
                pad: get_usize("pad")?,
            },
            "upsample_nearest" => Op::UpsampleNearest {
                factor: get_usize("factor")?,
            },
            "relu" => Op::Relu,
            "sigmoid" => Op::Sigmoid,
            "concat" => Op::Concat,
            "add" => Op::Add,
            "mul" => Op::Mul,
            "scale" => Op::Scale {
                factor: get("factor")?,
            },
            "pow" => Op::Pow {
                exponent: get("exponent")?,
            },
            "clamp_zero" => Op::ClampZero,
            "l2_normalize" => Op::L2Normalize {
                eps: attrs.get("eps").copied().unwrap_or(super::L2_EPS),
            },
            "mean" => Op::Mean,
            "sum" => Op::Sum,
            "global_avg_pool" => Op::GlobalAvgPool,
            "flatten" => Op::Flatten,
            "bce" => Op::BinaryCrossEntropy,
            "cosine_loss" => Op::CosineLoss,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(name, format!("expected {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match self {
            Op::Leaf => Err(Error::invalid("leaf is not an operation")),
            Op::Custom(f) => f.forward(inputs),
            Op::MatMul => {
                arity(2)?;
                matmul_forward(inputs[0], inputs[1])
            }
            Op::BiasAdd => {
                arity(2)?;
                bias_add_forward(inputs[0], inputs[1])
            }
            Op::Conv2d { stride, pad } => {
                arity(2)?;
                let geom = ConvGeom::new(inputs[0], inputs[1], *stride, *pad)?;
                Ok(geom.forward(inputs[0].values(), inputs[1].values()))
            }
            Op::UpsampleNearest { factor } => {
                arity(1)?;
                upsample_forward(inputs[0], *factor)
            }
            Op::Relu | Op::ClampZero => {
                arity(1)?;
                Ok(map(inputs[0], |x| if x > 0.0 { x } else { 0.0 }))
            }
            Op::Sigmoid => {
                arity(1)?;
                Ok(map(inputs[0], sigmoid))
            }
            Op::Concat => concat_forward(inputs),
            Op::Add | Op::Mul => {
                arity(2)?;
                same_shape(name, inputs[0], inputs[1])?;
                let vals = inputs[0]
                    .values()
                    .iter()
                    .zip(inputs[1].values())
                    .map(|(a, b)| if matches!(self, Op::Add) { a + b } else { a * b })
                    .collect();
                Tensor::new(inputs[0].shape().to_vec(), vals)
            }
            Op::Scale { factor } => {
                arity(1)?;
                Ok(map(inputs[0], |x| x * factor))
            }
            Op::Pow { exponent } => {
                arity(1)?;
                Ok(map(inputs[0], |x| x.powf(*exponent)))
            }
            Op::L2Normalize { eps } => {
                arity(1)?;
                let (n, d) = rows(name, inputs[0])?;
                let x = inputs[0].values();
                let mut out = vec![0.0; n * d];
                for r in 0..n {
                    let row = &x[r * d..(r + 1) * d];
                    let s = norm(row).max(*eps);
                    for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                        *o = v / s;
                    }
                }
                Tensor::new(vec![n, d], out)
            }
            Op::Mean => {
                arity(1)?;
                let x = inputs[0];
                Ok(Tensor::scalar(x.values().iter().sum::<f64>() / x.len() as f64))
            }
            Op::Sum => {
                arity(1)?;
                Ok(Tensor::scalar(inputs[0].values().iter().sum()))
            }
            Op::GlobalAvgPool => {
                arity(1)?;
                let (n, c, h, w) = nchw(name, inputs[0])?;
                let hw = h * w;
                let out = inputs[0]
                    .values()
                    .chunks(hw)
                    .map(|plane| plane.iter().sum::<f64>() / hw as f64)
                    .collect();
                Tensor::new(vec![n, c], out)
            }
            Op::Flatten => {
                arity(1)?;
                let x = inputs[0];
                let n = x.shape()[0];
                Tensor::new(vec![n, x.len() / n], x.values().to_vec())
            }
            Op::BinaryCrossEntropy => {
                arity(2)?;
                same_shape(name, inputs[0], inputs[1])?;
                let n = inputs[0].len() as f64;
                let total: f64 = inputs[0]
                    .values()
                    .iter()
                    .zip(inputs[1].values())
                    .map(|(&p, &t)| {
                        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                    })
                    .sum();
                Ok(Tensor::scalar(-total / n))
            }
            Op::CosineLoss => {
                arity(2)?;
                same_shape(name, inputs[0], inputs[1])?;
                let (n, d) = rows(name, inputs[0])?;
                let (p, t) = (inputs[0].values(), inputs[1].values());
                let mut total = 0.0;
                for r in 0..n {
                    let (pr, tr) = (&p[r * d..(r + 1) * d], &t[r * d..(r + 1) * d]);
                    total += 1.0 - cosine(pr, tr)?;
                }
                Ok(Tensor::scalar(total / n as f64))
            }
        }
    }

    /// Gradients with respect to each input; `needs[i]` false skips input `i`.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        Ok(match self {
            Op::Leaf => vec![],
            Op::Custom(f) => f.backward(inputs, output, g)?,
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0; n * k];
                    gemm(Mat::new(g, n, m), Mat::new(b.values(), k, m).t(), &mut ga, 0.0);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; k * m];
                    gemm(Mat::new(a.values(), n, k).t(), Mat::new(g, n, m), &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }
            Op::BiasAdd => {
                let x = inputs[0];
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    gb
                });
                vec![want(0).then(|| g.to_vec()), gb]
            }
            Op::Conv2d { stride, pad } => {
                let geom = ConvGeom::new(inputs[0], inputs[1], *stride, *pad)?;
                let (gx, gw) = geom.backward(inputs[0].values(), inputs[1].values(), g, want(0), want(1));
                vec![gx, gw]
            }
            Op::UpsampleNearest { factor } => {
                let (n, c, h, w) = nchw("upsample_nearest", inputs[0])?;
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            gx[p * h * w + (y / factor) * w + x / factor] += g[p * oh * ow + y * ow + x];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Relu | Op::ClampZero => {
                let gx = inputs[0]
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![Some(gx)]
            }
            Op::Sigmoid => {
                let gx = output.values().iter().zip(g).map(|(&y, &gi)| gi * y * (1.0 - y)).collect();
                vec![Some(gx)]
            }
            Op::Concat => concat_backward(inputs, g, needs),
            Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
            Op::Mul => {
                let (a, b) = (inputs[0].values(), inputs[1].values());
                vec![
                    want(0).then(|| g.iter().zip(b).map(|(gi, bi)| gi * bi).collect()),
                    want(1).then(|| g.iter().zip(a).map(|(gi, ai)| gi * ai).collect()),
                ]
            }
            Op::Scale { factor } => vec![Some(g.iter().map(|gi| gi * factor).collect())],
            Op::Pow { exponent } => {
                let p = *exponent;
                let gx = inputs[0]
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if p == 1.0 { gi } else { gi * p * x.powf(p - 1.0) })
                    .collect();
                vec![Some(gx)]
            }
            Op::L2Normalize { eps } => {
                let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let x = inputs[0].values();
                let y = output.values();
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let len = norm(&x[r * d..(r + 1) * d]);
                    let s = len.max(*eps);
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    // below the floor the op is a plain scaling
                    let dot: f64 = if len > *eps { yr.iter().zip(gr).map(|(a, b)| a * b).sum() } else { 0.0 };
                    for i in 0..d {
                        gx[r * d + i] = (gr[i] - yr[i] * dot) / s;
                    }
                }
                vec![Some(gx)]
            }
            Op::Mean => {
                let n = inputs[0].len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::Sum => vec![Some(vec![g[0]; inputs[0].len()])],
            Op::GlobalAvgPool => {
                let s = inputs[0].shape();
                let hw = s[2] * s[3];
                let mut gx = vec![0.0; inputs[0].len()];
                for (p, plane) in gx.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = g[p] / hw as f64);
                }
                vec![Some(gx)]
            }
            Op::Flatten => vec![Some(g.to_vec())],
            Op::BinaryCrossEntropy => {
                let n = inputs[0].len() as f64;
                let (p, t) = (inputs[0].values(), inputs[1].values());
                let gp = want(0).then(|| {
                    p.iter()
                        .zip(t)
                        .map(|(&p, &t)| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            -g[0] / n * (t / p - (1.0 - t) / (1.0 - p))
                        })
                        .collect()
                });
                let gt = want(1).then(|| {
                    p.iter()
                        .map(|&p| {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            -g[0] / n * (p.ln() - (1.0 - p).ln())
                        })
                        .collect()
                });
                vec![gp, gt]
            }
            Op::CosineLoss => {
                let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let (p, t) = (inputs[0].values(), inputs[1].values());
                let mut gp = vec![0.0; n * d];
                let mut gt = vec![0.0; n * d];
                let scale = -g[0] / n as f64;
                for r in 0..n {
                    let (pr, tr) = (&p[r * d..(r + 1) * d], &t[r * d..(r + 1) * d]);
                    let np = norm(pr);
                    let nt = norm(tr);
                    let c = cosine(pr, tr)?;
                    for i in 0..d {
                        gp[r * d + i] = scale * (tr[i] / (np * nt) - c * pr[i] / (np * np));
                        gt[r * d + i] = scale * (pr[i] / (np * nt) - c * tr[i] / (nt * nt));
                    }
                }
                vec![want(0).then_some(gp), want(1).then_some(gt)]
            }
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero vector is undefined"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.values().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rows(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::shape(op, format!("expected a [n, d] matrix, got {s:?}"))),
    }
}

fn nchw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = rows("matmul", a)?;
    let (k2, m) = rows("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; n * m];
    gemm(Mat::new(a.values(), n, k), Mat::new(b.values(), k, m), &mut out, 0.0);
    Tensor::new(vec![n, m], out)
}

fn bias_add_forward(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() < 2 || b.shape() != [x.shape()[1]] {
        return Err(Error::shape(
            "bias_add",
            format!("bias {:?} does not match axis 1 of {:?}", b.shape(), x.shape()),
        ));
    }
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = x.values().to_vec();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let bias = b.values()[i % c];
        chunk.iter_mut().for_each(|v| *v += bias);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = nchw("upsample_nearest", x)?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let src = x.values();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[p * oh * ow + y * ow + xx] = src[p * h * w + (y / factor) * w + xx / factor];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn concat_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.shape().len();
    if rank < 2 {
        return Err(Error::shape("concat", "inputs must have rank >= 2"));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    for t in inputs {
        if t.shape().len() != rank || t.shape()[0] != n || &t.shape()[2..] != rest {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?}", t.shape(), first.shape()),
            ));
        }
    }
    let inner: usize = rest.iter().product();
    let total_c: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total_c * inner);
    for s in 0..n {
        for t in inputs {
            let block = t.shape()[1] * inner;
            out.extend_from_slice(&t.values()[s * block..(s + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total_c;
    Tensor::new(shape, out)
}

fn concat_backward(inputs: &[&Tensor], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let n = inputs[0].shape()[0];
    let inner: usize = inputs[0].shape()[2..].iter().product();
    let mut grads: Vec<Option<Vec<f64>>> = inputs
        .iter()
        .zip(needs)
        .map(|(t, &need)| need.then(|| vec![0.0; t.len()]))
        .collect();
    let mut offset = 0;
    for s in 0..n {
        for (t, gi) in inputs.iter().zip(grads.iter_mut()) {
            let block = t.shape()[1] * inner;
            if let Some(gi) = gi {
                gi[s * block..(s + 1) * block].copy_from_slice(&g[offset..offset + block]);
            }
            offset += block;
        }
    }
    grads
}

/// Geometry of one NCHW convolution.
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = nchw("conv2d", x)?;
        let (o, kc, kh, kw) = match k.shape() {
            [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
            s => return Err(Error::shape("conv2d", format!("expected OIHW kernel, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source pixel for kernel tap `(ky, kx)` at output `(oy, ox)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.oh * self.ow;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * ohw;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row + oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, xx)) => plane[y * self.w + xx],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let ohw = self.oh * self.ow;
        for ci in 0..self.c {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * ohw;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                plane[y * self.w + xx] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Tensor {
        let (in_len, ohw, pl) = (self.c * self.h * self.w, self.oh * self.ow, self.patch_len());
        let mut out = vec![0.0; self.n * self.o * ohw];
        let mut cols = vec![0.0; if self.is_pointwise() { 0 } else { pl * ohw }];
        for s in 0..self.n {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let cols_ref: &[f64] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, &mut cols);
                &cols
            };
            gemm(
                Mat::new(k, self.o, pl),
                Mat::new(cols_ref, pl, ohw),
                &mut out[s * self.o * ohw..(s + 1) * self.o * ohw],
                0.0,
            );
        }
        Tensor::new(vec![self.n, self.o, self.oh, self.ow], out).expect("conv output shape")
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        g: &[f64],
        need_x: bool,
        need_k: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (in_len, ohw, pl) = (self.c * self.h * self.w, self.oh * self.ow, self.patch_len());
        let mut gx = need_x.then(|| vec![0.0; self.n * in_len]);
        let mut gk = need_k.then(|| vec![0.0; self.o * pl]);
        let mut cols = vec![0.0; pl * ohw];
        for s in 0..self.n {
            let gs = &g[s * self.o * ohw..(s + 1) * self.o * ohw];
            if let Some(gk) = gk.as_mut() {
                let xs = &x[s * in_len..(s + 1) * in_len];
                let cols_ref: &[f64] = if self.is_pointwise() {
                    xs
                } else {
                    self.im2col(xs, &mut cols);
                    &cols
                };
                gemm(Mat::new(gs, self.o, ohw), Mat::new(cols_ref, pl, ohw).t(), gk, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = &mut gx[s * in_len..(s + 1) * in_len];
                if self.is_pointwise() {
                    gemm(Mat::new(k, self.o, pl).t(), Mat::new(gs, self.o, ohw), gxs, 0.0);
                } else {
                    gemm(Mat::new(k, self.o, pl).t(), Mat::new(gs, self.o, ohw), &mut cols, 0.0);
                    self.col2im(&cols, gxs);
                }
            }
        }
        (gx, gk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_unknown_and_incomplete() {
        assert!(matches!(Op::parse("softmax", &Attrs::new()), Err(Error::UnknownOp(_))));
        assert!(matches!(
            Op::parse("conv2d", &Attrs::from([("stride".to_string(), 1.0)])),
            Err(Error::InvalidArgument(_))
        ));
        for name in Op::DIFFERENTIABLE {
            let attrs = Attrs::from([
                ("stride".to_string(), 1.0),
                ("pad".to_string(), 0.0),
                ("factor".to_string(), 2.0),
                ("exponent".to_string(), 2.0),
            ]);
            assert_eq!(Op::parse(name, &attrs).unwrap().name(), *name);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}

//! Secure layer operators and their plaintext fixed-point counterparts.
//!
//! Feature maps are `[N, C, H, W]`. Every operator has a `*_requests`
//! function listing the correlated randomness it consumes, in order, so a
//! dealer can prepare a whole network ahead of time.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::beaver::{mul_2pc, square_2pc, truncate_2pc, CorrelatedSource, MulOp, Request};
use crate::compare::{bit_to_arith, compare_requests, drelu_sign};
use crate::error::{Error, Result};
use crate::ot::OtParams;
use crate::ring::{conv2d_plain, Conv2dParams, FixedPointConfig, RingElement, RingTensor};
use crate::sharing::ShareTensor;
use crate::transport::Channel;

/// Everything one party needs to run an operator.
pub struct Ctx<'a> {
    pub ch: &'a mut Channel,
    pub src: &'a mut CorrelatedSource,
    pub rng: &'a mut ChaCha20Rng,
    pub ot: &'a OtParams,
}

/// Public coefficients of `(c / sqrt(n_x)) * w1 * x^2 + w2 * x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct X2actParams {
    pub w1: f64,
    pub w2: f64,
    pub b: f64,
    pub c: f64,
    pub n_x: u64,
}

impl X2actParams {
    /// Starts as the identity map.
    pub fn identity(n_x: u64) -> X2actParams {
        X2actParams {
            w1: 0.0,
            w2: 1.0,
            b: 0.0,
            c: 0.1,
            n_x,
        }
    }

    pub fn quad(&self) -> f64 {
        self.c / (self.n_x as f64).sqrt() * self.w1
    }

    /// `(quad, linear, bias)` as ring elements at scale `2^f`.
    pub fn encode(&self, fp: &FixedPointConfig) -> Result<(RingElement, RingElement, RingElement)> {
        if self.n_x == 0 {
            return Err(Error::Contract("x2act over an empty feature map".into()));
        }
        Ok((fp.encode(self.quad())?, fp.encode(self.w2)?, fp.encode(self.b)?))
    }
}

fn check_map(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("expected [N, C, H, W], got {shape:?}"))),
    }
}

/// Input indices of the `kernel^2` window elements (row-major), one list per
/// window position, plus the output shape.
pub fn pool_windows(shape: &[usize], kernel: usize, stride: usize) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let (n, c, h, w) = check_map(shape)?;
    let p = Conv2dParams { stride, padding: 0 };
    let oh = p.output_size(h, kernel)?;
    let ow = p.output_size(w, kernel)?;
    let mut windows = vec![Vec::with_capacity(n * c * oh * ow); kernel * kernel];
    for b in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let at = (b * h + y * stride + ki) * w + x * stride + kj;
                        windows[ki * kernel + kj].push(at);
                    }
                }
            }
        }
    }
    Ok((windows, vec![n, c, oh, ow]))
}

fn gather(x: &RingTensor, idx: &[usize], shape: &[usize]) -> Result<RingTensor> {
    RingTensor::new(shape.to_vec(), idx.iter().map(|&i| x.data()[i]).collect(), x.fp())
}

fn gather_share(x: &ShareTensor, idx: &[usize], shape: &[usize]) -> Result<ShareTensor> {
    Ok(ShareTensor::new(x.party, gather(&x.share, idx, shape)?))
}

fn broadcast_channels(bias: &RingTensor, shape: &[usize]) -> Result<RingTensor> {
    let (n, c, h, w) = check_map(shape)?;
    if bias.len() != c {
        return Err(Error::Shape(format!("bias of {} for {c} channels", bias.len())));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        for &v in bias.data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
    }
    RingTensor::new(shape.to_vec(), data, bias.fp())
}

pub fn conv_out_shape(x: &[usize], w: &[usize], params: Conv2dParams) -> Result<Vec<usize>> {
    let (n, c, h, wd) = check_map(x)?;
    let (oc, kc, kh, kw) = check_map(w)?;
    if c != kc {
        return Err(Error::Shape(format!("input {x:?} against kernel {w:?}")));
    }
    Ok(vec![n, oc, params.output_size(h, kh)?, params.output_size(wd, kw)?])
}

pub fn conv_requests(x: &[usize], w: &[usize], params: Conv2dParams) -> Result<Vec<Request>> {
    Ok(vec![
        Request::Triple {
            op: MulOp::Conv(params),
            a_shape: x.to_vec(),
            b_shape: w.to_vec(),
        },
        Request::Trunc {
            shape: conv_out_shape(x, w, params)?,
        },
    ])
}

/// Secure convolution of a shared map with a shared kernel, rescaled, plus an
/// optional shared per-channel bias.
pub fn conv2pc(
    x: &ShareTensor,
    w: &ShareTensor,
    bias: Option<&ShareTensor>,
    params: Conv2dParams,
    ctx: &mut Ctx,
) -> Result<ShareTensor> {
    let out = conv_out_shape(x.shape(), w.shape(), params)?;
    let t = ctx.src.triple(MulOp::Conv(params), x.shape(), w.shape())?;
    let y = mul_2pc(x, w, &t, ctx.ch)?;
    let p = ctx.src.trunc(&out)?;
    let y = truncate_2pc(&y, &p, ctx.ch)?;
    match bias {
        Some(b) => Ok(ShareTensor::new(y.party, y.share.add(&broadcast_channels(&b.share, &out)?)?)),
        None => Ok(y),
    }
}

fn dense_shapes(x: &[usize], w: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    match (x, w) {
        (&[n, d], &[o, wd]) if d == wd => Ok((vec![n, d, 1, 1], vec![o, d, 1, 1])),
        _ => Err(Error::Shape(format!("dense input {x:?} against weight {w:?}"))),
    }
}

pub fn dense_requests(x: &[usize], w: &[usize]) -> Result<Vec<Request>> {
    let (xs, ws) = dense_shapes(x, w)?;
    conv_requests(&xs, &ws, Conv2dParams::default())
}

/// `[N, D]` against a `[O, D]` weight, run as a 1x1 convolution.
pub fn dense2pc(x: &ShareTensor, w: &ShareTensor, bias: Option<&ShareTensor>, ctx: &mut Ctx) -> Result<ShareTensor> {
    let (xs, ws) = dense_shapes(x.shape(), w.shape())?;
    let out = vec![x.shape()[0], w.shape()[0]];
    let x4 = x.clone().reshape(xs)?;
    let w4 = w.clone().reshape(ws)?;
    conv2pc(&x4, &w4, bias, Conv2dParams::default(), ctx)?.reshape(out)
}

/// Correlated items for `y = b2a(x > 0) * x` on a tensor of `shape`.
pub fn relu_requests(shape: &[usize], fp: &FixedPointConfig) -> Vec<Request> {
    let n = shape.iter().product();
    let mut out = compare_requests(n, fp.total_bits as u32);
    for _ in 0..2 {
        out.push(Request::Triple {
            op: MulOp::Elementwise,
            a_shape: shape.to_vec(),
            b_shape: shape.to_vec(),
        });
    }
    out
}

/// Arithmetic shares of `[x > 0]`.
fn positive(x: &ShareTensor, ctx: &mut Ctx) -> Result<ShareTensor> {
    let bits = drelu_sign(x, ctx.ot, ctx.src, ctx.rng, ctx.ch)?;
    let t = ctx.src.triple(MulOp::Elementwise, x.shape(), x.shape())?;
    bit_to_arith(&bits, x.fp(), &t, ctx.ch)
}

/// One comparison batch, one conversion and one multiplication.
pub fn relu2pc(x: &ShareTensor, ctx: &mut Ctx) -> Result<ShareTensor> {
    let a = positive(x, ctx)?;
    let t = ctx.src.triple(MulOp::Elementwise, x.shape(), x.shape())?;
    mul_2pc(&a, x, &t, ctx.ch)
}

pub fn maxpool_requests(shape: &[usize], kernel: usize, stride: usize, fp: &FixedPointConfig) -> Result<Vec<Request>> {
    let (windows, out) = pool_windows(shape, kernel, stride)?;
    Ok((1..windows.len()).flat_map(|_| relu_requests(&out, fp)).collect())
}

/// Running maximum over the window in row-major order, one comparison stage
/// per element after the first: `m <- m + [v > m] * (v - m)`.
pub fn maxpool2pc(x: &ShareTensor, kernel: usize, stride: usize, ctx: &mut Ctx) -> Result<ShareTensor> {
    let (windows, out) = pool_windows(x.shape(), kernel, stride)?;
    let mut m = gather_share(x, &windows[0], &out)?;
    for idx in &windows[1..] {
        let v = gather_share(x, idx, &out)?;
        let d = v.sub(&m)?;
        let a = positive(&d, ctx)?;
        let t = ctx.src.triple(MulOp::Elementwise, &out, &out)?;
        m = m.add(&mul_2pc(&a, &d, &t, ctx.ch)?)?;
    }
    Ok(m)
}

pub fn avgpool_requests(shape: &[usize], kernel: usize, stride: usize) -> Result<Vec<Request>> {
    let (_, out) = pool_windows(shape, kernel, stride)?;
    Ok(vec![Request::Trunc { shape: out }])
}

fn window_sum(x: &RingTensor, windows: &[Vec<usize>], out: &[usize]) -> Result<RingTensor> {
    let mut acc = RingTensor::zeros(out.to_vec(), x.fp());
    for idx in windows {
        acc = acc.add(&gather(x, idx, out)?)?;
    }
    Ok(acc)
}

/// Window sum times the encoded reciprocal of the window size, rescaled.
pub fn avgpool2pc(x: &ShareTensor, kernel: usize, stride: usize, ctx: &mut Ctx) -> Result<ShareTensor> {
    let (windows, out) = pool_windows(x.shape(), kernel, stride)?;
    let inv = x.fp().encode(1.0 / (kernel * kernel) as f64)?;
    let s = window_sum(&x.share, &windows, &out)?.scale(inv);
    let p = ctx.src.trunc(&out)?;
    truncate_2pc(&ShareTensor::new(x.party, s), &p, ctx.ch)
}

pub fn x2act_requests(shape: &[usize]) -> Vec<Request> {
    vec![
        Request::Square { shape: shape.to_vec() },
        Request::Trunc { shape: shape.to_vec() },
        Request::Trunc { shape: shape.to_vec() },
    ]
}

/// Square, rescale, public affine combination, rescale.
pub fn x2act2pc(x: &ShareTensor, p: &X2actParams, ctx: &mut Ctx) -> Result<ShareTensor> {
    let fp = x.fp();
    let (quad, lin, bias) = p.encode(&fp)?;
    let pair = ctx.src.square(x.shape())?;
    let sq = square_2pc(x, &pair, ctx.ch)?;
    let tp = ctx.src.trunc(x.shape())?;
    let sq = truncate_2pc(&sq, &tp, ctx.ch)?;
    let t = sq
        .scale(quad)
        .add(&x.scale(lin))?
        .add_public_scalar(fp.ring().mul(bias, 1 << fp.frac_bits));
    let tp = ctx.src.trunc(x.shape())?;
    truncate_2pc(&t, &tp, ctx.ch)
}

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// Folds `gamma * (conv(x) + b - mean) / sqrt(var + eps) + beta` into the
/// convolution. `conv_w` is row-major with output channels outermost.
pub fn fuse_batchnorm(conv_w: &[f64], conv_b: &[f64], bn: &BatchNorm) -> Result<(Vec<f64>, Vec<f64>)> {
    let oc = conv_b.len();
    let lens = [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()];
    if oc == 0 || lens.iter().any(|&l| l != oc) || conv_w.len() % oc != 0 {
        return Err(Error::Shape(format!("batch norm over {oc} channels, stats {lens:?}")));
    }
    if let Some(v) = bn.var.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Contract(format!("batch norm variance {v} is not positive")));
    }
    let per = conv_w.len() / oc;
    let scale: Vec<f64> = (0..oc).map(|o| bn.gamma[o] / (bn.var[o] + bn.eps).sqrt()).collect();
    let w = conv_w.iter().enumerate().map(|(i, &v)| v * scale[i / per]).collect();
    let b = (0..oc).map(|o| (conv_b[o] - bn.mean[o]) * scale[o] + bn.beta[o]).collect();
    Ok((w, b))
}

/// Plaintext fixed-point operators with the rounding schedule of the secure
/// ones.
pub mod plain {
    use super::*;

    pub fn conv(x: &RingTensor, w: &RingTensor, bias: Option<&RingTensor>, params: Conv2dParams) -> Result<RingTensor> {
        let y = conv2d_plain(x, w, params)?.asr(x.fp().frac_bits as u32);
        match bias {
            Some(b) => {
                let bb = broadcast_channels(b, y.shape())?;
                y.add(&bb)
            }
            None => Ok(y),
        }
    }

    pub fn dense(x: &RingTensor, w: &RingTensor, bias: Option<&RingTensor>) -> Result<RingTensor> {
        let (xs, ws) = dense_shapes(x.shape(), w.shape())?;
        let out = vec![x.shape()[0], w.shape()[0]];
        conv(&x.clone().reshape(xs)?, &w.clone().reshape(ws)?, bias, Conv2dParams::default())?.reshape(out)
    }

    pub fn relu(x: &RingTensor) -> RingTensor {
        let r = x.ring();
        x.map(|v| if r.to_signed(v) > 0 { v } else { 0 })
    }

    pub fn maxpool(x: &RingTensor, kernel: usize, stride: usize) -> Result<RingTensor> {
        let (windows, out) = pool_windows(x.shape(), kernel, stride)?;
        let r = x.ring();
        let mut m = gather(x, &windows[0], &out)?;
        for idx in &windows[1..] {
            let v = gather(x, idx, &out)?;
            let data = m
                .data()
                .iter()
                .zip(v.data())
                .map(|(&a, &b)| if r.to_signed(b) > r.to_signed(a) { b } else { a })
                .collect();
            m = m.with_data(data)?;
        }
        Ok(m)
    }

    pub fn avgpool(x: &RingTensor, kernel: usize, stride: usize) -> Result<RingTensor> {
        let (windows, out) = pool_windows(x.shape(), kernel, stride)?;
        let inv = x.fp().encode(1.0 / (kernel * kernel) as f64)?;
        Ok(window_sum(x, &windows, &out)?.scale(inv).asr(x.fp().frac_bits as u32))
    }

    pub fn x2act(x: &RingTensor, p: &X2actParams) -> Result<RingTensor> {
        let fp = x.fp();
        let f = fp.frac_bits as u32;
        let (quad, lin, bias) = p.encode(&fp)?;
        let sq = x.mul(x)?.asr(f);
        let t = sq
            .scale(quad)
            .add(&x.scale(lin))?
            .add_scalar(fp.ring().mul(bias, 1 << f));
        Ok(t.asr(f))
    }
}

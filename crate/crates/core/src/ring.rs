//! Fixed-point arithmetic over the ring of integers modulo `2^w`.
//!
//! Every value is stored as the low `w` bits of a `u32`. The production ring
//! is `w = 32`; narrower rings (4, 6, 8 bits) run through the same code and
//! make exhaustive tests cheap.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A ring element. Only the low `Ring::bits` bits are meaningful.
pub type RingElement = u32;

/// The ring `Z_{2^bits}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ring {
    bits: u8,
}

impl Ring {
    pub const fn new(bits: u8) -> Ring {
        assert!(bits >= 2 && bits <= 32, "ring width must be in 2..=32");
        Ring { bits }
    }

    pub const fn bits(self) -> u32 {
        self.bits as u32
    }

    #[inline]
    pub const fn mask(self) -> u32 {
        if self.bits == 32 {
            u32::MAX
        } else {
            (1u32 << self.bits) - 1
        }
    }

    #[inline]
    pub fn reduce(self, v: u32) -> u32 {
        v & self.mask()
    }

    #[inline]
    pub fn add(self, a: u32, b: u32) -> u32 {
        a.wrapping_add(b) & self.mask()
    }

    #[inline]
    pub fn sub(self, a: u32, b: u32) -> u32 {
        a.wrapping_sub(b) & self.mask()
    }

    #[inline]
    pub fn mul(self, a: u32, b: u32) -> u32 {
        a.wrapping_mul(b) & self.mask()
    }

    #[inline]
    pub fn neg(self, a: u32) -> u32 {
        0u32.wrapping_sub(a) & self.mask()
    }

    /// Two's-complement interpretation in `[-2^(w-1), 2^(w-1) - 1]`.
    #[inline]
    pub fn to_signed(self, v: u32) -> i64 {
        let shift = 32 - self.bits();
        (((v << shift) as i32) >> shift) as i64
    }

    #[inline]
    pub fn from_signed(self, v: i64) -> u32 {
        (v as u32) & self.mask()
    }

    /// Arithmetic shift right of the signed interpretation.
    #[inline]
    pub fn asr(self, v: u32, shift: u32) -> u32 {
        self.from_signed(self.to_signed(v) >> shift)
    }

    #[inline]
    pub fn msb(self, v: u32) -> u32 {
        (v >> (self.bits() - 1)) & 1
    }

    pub fn min_signed(self) -> i64 {
        -(1i64 << (self.bits() - 1))
    }

    pub fn max_signed(self) -> i64 {
        (1i64 << (self.bits() - 1)) - 1
    }
}

/// Fixed-point interpretation of ring elements: `x ~ round(x * 2^frac_bits)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub total_bits: u8,
    pub frac_bits: u8,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            total_bits: 32,
            frac_bits: 12,
        }
    }
}

impl FixedPointConfig {
    pub fn new(total_bits: u8, frac_bits: u8) -> Result<FixedPointConfig> {
        let cfg = FixedPointConfig {
            total_bits,
            frac_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.total_bits) {
            return Err(Error::Config(format!(
                "ring width {} outside 2..=32",
                self.total_bits
            )));
        }
        if self.frac_bits == 0 || self.frac_bits as i32 >= self.total_bits as i32 - 2 {
            return Err(Error::Config(format!(
                "fractional bits {} must satisfy 0 < f < {}",
                self.frac_bits,
                self.total_bits as i32 - 2
            )));
        }
        Ok(())
    }

    pub fn ring(&self) -> Ring {
        Ring::new(self.total_bits)
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Value of one unit in the last place.
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn encode(&self, x: f64) -> Result<RingElement> {
        let bound = (1u64 << (self.total_bits - self.frac_bits - 1)) as f64;
        if !x.is_finite() || x.abs() >= bound {
            return Err(Error::Range(format!(
                "{x} not representable with {} integer bits",
                self.total_bits - self.frac_bits
            )));
        }
        Ok(self.ring().from_signed((x * self.scale()).round() as i64))
    }

    pub fn decode(&self, v: RingElement) -> f64 {
        self.ring().to_signed(v) as f64 / self.scale()
    }
}

pub fn fp_encode(x: f64, cfg: &FixedPointConfig) -> Result<RingElement> {
    cfg.encode(x)
}

pub fn fp_decode(v: RingElement, cfg: &FixedPointConfig) -> f64 {
    cfg.decode(v)
}

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
        }
    }
}

impl Conv2dParams {
    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || kernel == 0 || padded < kernel {
            return Err(Error::Shape(format!(
                "kernel {kernel} does not fit input {input} with padding {}",
                self.padding
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Dense row-major tensor of ring elements (NCHW order for images).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingTensor {
    shape: Vec<usize>,
    data: Vec<RingElement>,
    fp: FixedPointConfig,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl RingTensor {
    pub fn new(shape: Vec<usize>, data: Vec<RingElement>, fp: FixedPointConfig) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        let mask = fp.ring().mask();
        let data = data.into_iter().map(|v| v & mask).collect();
        Ok(RingTensor { shape, data, fp })
    }

    pub fn zeros(shape: Vec<usize>, fp: FixedPointConfig) -> Self {
        let n = numel(&shape);
        RingTensor {
            shape,
            data: vec![0; n],
            fp,
        }
    }

    pub fn scalar(v: RingElement, fp: FixedPointConfig) -> Self {
        RingTensor {
            shape: vec![1],
            data: vec![v & fp.ring().mask()],
            fp,
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64], fp: FixedPointConfig) -> Result<Self> {
        let data = values
            .iter()
            .map(|&x| fp.encode(x))
            .collect::<Result<Vec<_>>>()?;
        RingTensor::new(shape, data, fp)
    }

    /// Build from signed integers (reduced modulo the ring).
    pub fn from_signed(shape: Vec<usize>, values: &[i64], fp: FixedPointConfig) -> Result<Self> {
        let ring = fp.ring();
        RingTensor::new(
            shape,
            values.iter().map(|&v| ring.from_signed(v)).collect(),
            fp,
        )
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| self.fp.decode(v)).collect()
    }

    pub fn to_signed(&self) -> Vec<i64> {
        let ring = self.ring();
        self.data.iter().map(|&v| ring.to_signed(v)).collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[RingElement] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [RingElement] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<RingElement> {
        self.data
    }

    pub fn fp(&self) -> FixedPointConfig {
        self.fp
    }

    pub fn ring(&self) -> Ring {
        self.fp.ring()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Same shape and fixed-point config, new data.
    pub fn with_data(&self, data: Vec<RingElement>) -> Result<Self> {
        RingTensor::new(self.shape.clone(), data, self.fp)
    }

    fn check_same(&self, other: &RingTensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        if self.fp.total_bits != other.fp.total_bits {
            return Err(Error::Contract(format!(
                "{op}: ring widths {} vs {}",
                self.fp.total_bits, other.fp.total_bits
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &RingTensor, op: &str, f: impl Fn(u32, u32) -> u32) -> Result<Self> {
        self.check_same(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(RingTensor {
            shape: self.shape.clone(),
            data,
            fp: self.fp,
        })
    }

    pub fn map(&self, f: impl Fn(u32) -> u32) -> Self {
        let mask = self.ring().mask();
        RingTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v) & mask).collect(),
            fp: self.fp,
        }
    }

    pub fn add(&self, other: &RingTensor) -> Result<Self> {
        let r = self.ring();
        self.zip_with(other, "add", |a, b| r.add(a, b))
    }

    pub fn sub(&self, other: &RingTensor) -> Result<Self> {
        let r = self.ring();
        self.zip_with(other, "sub", |a, b| r.sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &RingTensor) -> Result<Self> {
        let r = self.ring();
        self.zip_with(other, "mul", |a, b| r.mul(a, b))
    }

    pub fn scale(&self, k: RingElement) -> Self {
        let r = self.ring();
        self.map(|v| r.mul(v, k))
    }

    pub fn add_scalar(&self, k: RingElement) -> Self {
        let r = self.ring();
        self.map(|v| r.add(v, k))
    }

    pub fn neg(&self) -> Self {
        let r = self.ring();
        self.map(|v| r.neg(v))
    }

    /// Plaintext arithmetic shift right of every element.
    pub fn asr(&self, shift: u32) -> Self {
        let r = self.ring();
        self.map(|v| r.asr(v, shift))
    }

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &RingTensor) -> Result<Self> {
        matmul_plain(self, other)
    }
}

pub fn ring_add(a: &RingTensor, b: &RingTensor) -> Result<RingTensor> {
    a.add(b)
}

pub fn ring_sub(a: &RingTensor, b: &RingTensor) -> Result<RingTensor> {
    a.sub(b)
}

pub fn ring_mul(a: &RingTensor, b: &RingTensor) -> Result<RingTensor> {
    a.mul(b)
}

pub fn ring_scale(a: &RingTensor, k: RingElement) -> RingTensor {
    a.scale(k)
}

pub fn matmul_plain(a: &RingTensor, b: &RingTensor) -> Result<RingTensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!(
            "matmul: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    if a.fp.total_bits != b.fp.total_bits {
        return Err(Error::Contract("matmul: ring widths differ".into()));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0u32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = o.wrapping_add(av.wrapping_mul(bv));
            }
        }
    }
    RingTensor::new(vec![m, n], out, a.fp)
}

/// Unfold one `[C, H, W]` image into a `[C*KH*KW, OH*OW]` column matrix.
pub fn im2col(
    image: &[RingElement],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    params: Conv2dParams,
) -> Result<(Vec<RingElement>, usize, usize)> {
    if image.len() != channels * height * width {
        return Err(Error::Shape("im2col: image length".into()));
    }
    let oh = params.output_size(height, kh)?;
    let ow = params.output_size(width, kw)?;
    let cols = oh * ow;
    let mut out = vec![0u32; channels * kh * kw * cols];
    let pad = params.padding as isize;
    for c in 0..channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for y in 0..oh {
                    let iy = (y * params.stride + ki) as isize - pad;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for x in 0..ow {
                        let ix = (x * params.stride + kj) as isize - pad;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        dst[y * ow + x] = image[(c * height + iy as usize) * width + ix as usize];
                    }
                }
            }
        }
    }
    Ok((out, oh, ow))
}

/// Exact ring convolution: `x` is `[N, C, H, W]`, `w` is `[OC, C, KH, KW]`,
/// result is `[N, OC, OH, OW]`. No rescaling is applied.
pub fn conv2d_plain(x: &RingTensor, w: &RingTensor, params: Conv2dParams) -> Result<RingTensor> {
    if x.shape.len() != 4 || w.shape.len() != 4 || x.shape[1] != w.shape[1] {
        return Err(Error::Shape(format!(
            "conv2d: input {:?} kernel {:?}",
            x.shape, w.shape
        )));
    }
    if x.fp.total_bits != w.fp.total_bits {
        return Err(Error::Contract("conv2d: ring widths differ".into()));
    }
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oc, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let oh = params.output_size(h, kh)?;
    let ow = params.output_size(wd, kw)?;
    let kmat = RingTensor::new(vec![oc, c * kh * kw], w.data.clone(), w.fp)?;
    let mut out = Vec::with_capacity(n * oc * oh * ow);
    let img = c * h * wd;
    for b in 0..n {
        let (cols, _, _) = im2col(&x.data[b * img..(b + 1) * img], c, h, wd, kh, kw, params)?;
        let cols = RingTensor::new(vec![c * kh * kw, oh * ow], cols, x.fp)?;
        out.extend_from_slice(kmat.matmul(&cols)?.data());
    }
    RingTensor::new(vec![n, oc, oh, ow], out, x.fp)
}

const TENSOR_MAGIC: &[u8; 4] = b"PRT1";

/// Writes the `PRT1` tensor format: magic, u8 ring width, u8 frac bits,
/// u32 rank, u32 dims, then little-endian 32-bit words.
pub fn write_tensor<W: Write>(mut w: W, t: &RingTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + 4 * t.shape.len() + 4 * t.data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(t.fp.total_bits);
    buf.push(t.fp.frac_bits);
    buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<RingTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    let fp = FixedPointConfig::new(hdr[0], hdr[1])?;
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank} too large")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&shape);
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect::<Vec<_>>();
    let mask = fp.ring().mask();
    if data.iter().any(|&v| v & !mask != 0) {
        return Err(Error::Format("tensor word exceeds ring width".into()));
    }
    RingTensor::new(shape, data, fp)
}

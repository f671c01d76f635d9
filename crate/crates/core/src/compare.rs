//! Secure comparison of two private values and the sign test built on it.
//!
//! Values are split into 2-bit chunks, most significant first. One 1-of-4
//! transfer per chunk hands the receiver its XOR share of `(gt, eq)` for
//! that chunk; the shares are then folded pairwise with
//! `gt = gt_hi ^ (eq_hi & gt_lo)`, `eq = eq_hi & eq_lo` using dealer bit
//! triples, one exchange per tree level.

use rand::{Rng, RngCore};

use crate::beaver::{mul_2pc, BeaverTriple, CorrelatedSource, Request};
use crate::error::{Error, Result};
use crate::ot::{self, OtParams, CANDIDATES, CHUNK_BITS};
use crate::ring::{FixedPointConfig, RingTensor};
use crate::sharing::{PartyId, ShareTensor};
use crate::transport::{pack_bits, unpack_bits, Channel, MsgType};

/// XOR shares of a bit tensor, one bit per byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitShare {
    pub party: PartyId,
    pub shape: Vec<usize>,
    pub bits: Vec<u8>,
}

impl BitShare {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

pub fn reveal_bits(a: &BitShare, b: &BitShare) -> Result<Vec<u8>> {
    if a.party == b.party || a.bits.len() != b.bits.len() {
        return Err(Error::Contract("bit shares do not pair up".into()));
    }
    Ok(a.bits.iter().zip(&b.bits).map(|(x, y)| x ^ y).collect())
}

/// Chunks per value of a `bits`-wide ring.
pub fn chunk_count(bits: u32) -> usize {
    bits.div_ceil(CHUNK_BITS) as usize
}

/// Most significant chunk first.
pub fn chunks(v: u32, bits: u32) -> Vec<u8> {
    let u = chunk_count(bits);
    (0..u)
        .map(|i| ((v >> (CHUNK_BITS as usize * (u - 1 - i))) & 3) as u8)
        .collect()
}

/// Bit triples consumed by one comparison batch of `n` values.
pub fn compare_requests(n: usize, bits: u32) -> Vec<Request> {
    let mut out = Vec::new();
    let mut width = chunk_count(bits);
    while width > 1 {
        let next = width.div_ceil(2);
        let per_pair = if next > 1 { 2 } else { 1 };
        out.push(Request::Bits { count: n * (width / 2) * per_pair });
        width = next;
    }
    out
}

/// Secure AND of XOR-shared bit vectors in one exchange.
pub fn and_2pc(x: &[u8], y: &[u8], t: &crate::beaver::BitTriple, ch: &mut Channel) -> Result<Vec<u8>> {
    let n = x.len();
    if y.len() != n || t.a.len() != n {
        return Err(Error::Shape(format!("AND of {} and {} bits with a {}-bit triple", n, y.len(), t.a.len())));
    }
    if t.party != ch.party() {
        return Err(Error::Contract("bit triple belongs to the peer".into()));
    }
    ch.consume(t.id)?;
    let mut de: Vec<u8> = x.iter().zip(&t.a).map(|(p, q)| p ^ q).collect();
    de.extend(y.iter().zip(&t.b).map(|(p, q)| p ^ q));
    let theirs = unpack_bits(&ch.exchange(MsgType::BitAnd, &pack_bits(&de))?, 2 * n)?;
    let s0 = ch.party().is_s0() as u8;
    Ok((0..n)
        .map(|i| {
            let d = de[i] ^ theirs[i];
            let e = de[n + i] ^ theirs[n + i];
            t.c[i] ^ (d & t.b[i]) ^ (e & t.a[i]) ^ (s0 & d & e)
        })
        .collect())
}

/// XOR shares of `M0 > M1` (unsigned), where S0 supplies `M0` and S1
/// supplies `M1`, both as tensors of the same shape.
pub fn compare_2pc<R: RngCore + ?Sized>(
    m: &RingTensor,
    params: &OtParams,
    src: &mut CorrelatedSource,
    rng: &mut R,
    ch: &mut Channel,
) -> Result<BitShare> {
    let bits = m.ring().bits();
    let u = chunk_count(bits);
    let n = m.len();
    let mut gt = Vec::with_capacity(n * u);
    let mut eq = Vec::with_capacity(n * u);
    match ch.party() {
        PartyId::S0 => {
            let st = ot::ot_setup_send(params, rng, ch)?;
            let mut table = Vec::with_capacity(n * u);
            for &v in m.data() {
                for a in chunks(v, bits) {
                    let r_gt = rng.gen::<u8>() & 1;
                    let r_eq = rng.gen::<u8>() & 1;
                    let mut row = [0u32; CANDIDATES];
                    for (j, w) in row.iter_mut().enumerate() {
                        let g = (a as usize > j) as u8 ^ r_gt;
                        let e = (a as usize == j) as u8 ^ r_eq;
                        *w = (g | (e << 1)) as u32;
                    }
                    table.push(row);
                    gt.push(r_gt);
                    eq.push(r_eq);
                }
            }
            ot::ot_send(params, &st, &table, u, ch)?;
        }
        PartyId::S1 => {
            let st = ot::ot_setup_recv(params, ch)?;
            let choices: Vec<u8> = m.data().iter().flat_map(|&v| chunks(v, bits)).collect();
            let keys = ot::ot_choose(params, &st, &choices, rng, ch)?;
            for w in ot::ot_receive(&keys, &choices, 2, u, ch)? {
                gt.push((w & 1) as u8);
                eq.push((w >> 1) as u8);
            }
        }
    }

    let mut width = u;
    while width > 1 {
        let pairs = width / 2;
        let next = width.div_ceil(2);
        let need_eq = next > 1;
        let mut xs = Vec::with_capacity(n * pairs * 2);
        let mut ys = Vec::with_capacity(n * pairs * 2);
        for k in 0..n {
            for p in 0..pairs {
                let (hi, lo) = (k * width + 2 * p, k * width + 2 * p + 1);
                xs.push(eq[hi]);
                ys.push(gt[lo]);
                if need_eq {
                    xs.push(eq[hi]);
                    ys.push(eq[lo]);
                }
            }
        }
        let t = src.bits(xs.len())?;
        let z = and_2pc(&xs, &ys, &t, ch)?;
        let mut ngt = Vec::with_capacity(n * next);
        let mut neq = Vec::with_capacity(n * next);
        let step = if need_eq { 2 } else { 1 };
        for k in 0..n {
            for p in 0..pairs {
                let at = (k * pairs + p) * step;
                ngt.push(gt[k * width + 2 * p] ^ z[at]);
                neq.push(if need_eq { z[at + 1] } else { 0 });
            }
            if width % 2 == 1 {
                ngt.push(gt[k * width + width - 1]);
                neq.push(eq[k * width + width - 1]);
            }
        }
        gt = ngt;
        eq = neq;
        width = next;
    }
    Ok(BitShare {
        party: ch.party(),
        shape: m.shape().to_vec(),
        bits: gt,
    })
}

/// XOR shares of `x > 0` for a shared `x` (signed).
///
/// The sign of `x = x0 + x1` is `msb(x0) ^ msb(x1) ^ carry`, where the carry
/// out of the low `w-1` bits is `low(x0) > 2^(w-1) - 1 - low(x1)`, a
/// comparison of two private values. S0 subtracts one first so that zero
/// lands on the negative side. Exact for every `x` except `-2^(w-1)`.
pub fn drelu_sign<R: RngCore + ?Sized>(
    x: &ShareTensor,
    params: &OtParams,
    src: &mut CorrelatedSource,
    rng: &mut R,
    ch: &mut Channel,
) -> Result<BitShare> {
    if x.party != ch.party() {
        return Err(Error::Contract("share used on the peer's channel".into()));
    }
    let ring = x.ring();
    let w = ring.bits();
    let low = (1u32 << (w - 1)) - 1;
    let y = match ch.party() {
        PartyId::S0 => x.share.add_scalar(ring.neg(1)),
        PartyId::S1 => x.share.clone(),
    };
    let m = match ch.party() {
        PartyId::S0 => y.map(|v| v & low),
        PartyId::S1 => y.map(|v| low - (v & low)),
    };
    let carry = compare_2pc(&m, params, src, rng, ch)?;
    let flip = ch.party().is_s0() as u8;
    let bits = y
        .data()
        .iter()
        .zip(&carry.bits)
        .map(|(&v, &c)| ((v >> (w - 1)) as u8 ^ c) ^ flip)
        .collect();
    Ok(BitShare {
        party: ch.party(),
        shape: x.shape().to_vec(),
        bits,
    })
}

/// Arithmetic shares of an XOR-shared bit: `b0 + b1 - 2 b0 b1`, with the
/// product from one elementwise Beaver multiplication.
pub fn bit_to_arith(b: &BitShare, fp: FixedPointConfig, t: &BeaverTriple, ch: &mut Channel) -> Result<ShareTensor> {
    let party = ch.party();
    if b.party != party {
        return Err(Error::Contract("bit share used on the peer's channel".into()));
    }
    let mine = RingTensor::new(b.shape.clone(), b.bits.iter().map(|&v| v as u32).collect(), fp)?;
    let zero = RingTensor::zeros(b.shape.clone(), fp);
    let (x, y) = match party {
        PartyId::S0 => (mine.clone(), zero),
        PartyId::S1 => (zero, mine.clone()),
    };
    let prod = mul_2pc(&ShareTensor::new(party, x), &ShareTensor::new(party, y), t, ch)?;
    Ok(ShareTensor::new(party, mine.sub(&prod.share.scale(2))?))
}

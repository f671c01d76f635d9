//! Dealer-issued correlated randomness and the one-round multiplication,
//! square and truncation protocols built on it.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dcf::{self, DcfKey};
use crate::error::{Error, Result};
use crate::ring::{conv2d_plain, Conv2dParams, FixedPointConfig, RingTensor};
use crate::sharing::{random_tensor, shr, PartyId, ShareTensor};
use crate::transport::{bytes_to_words, pack_bits, unpack_bits, words_to_bytes, Channel, MsgType};

/// The bilinear map a triple is prepared for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MulOp {
    Elementwise,
    /// `[m, k] x [k, n]`
    Matmul,
    /// `[N, C, H, W]` input against `[OC, C, KH, KW]` kernel.
    Conv(Conv2dParams),
}

impl MulOp {
    pub fn apply(&self, a: &RingTensor, b: &RingTensor) -> Result<RingTensor> {
        match self {
            MulOp::Elementwise => a.mul(b),
            MulOp::Matmul => a.matmul(b),
            MulOp::Conv(p) => conv2d_plain(a, b, *p),
        }
    }
}

/// What the online phase asks the dealer for, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Request {
    Triple {
        op: MulOp,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Square {
        shape: Vec<usize>,
    },
    Trunc {
        shape: Vec<usize>,
    },
    Bits {
        count: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BeaverTriple {
    pub id: u64,
    pub op: MulOp,
    pub a: ShareTensor,
    pub b: ShareTensor,
    pub z: ShareTensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SquarePair {
    pub id: u64,
    pub a: ShareTensor,
    pub z: ShareTensor,
}

/// Correlated randomness for exact truncation by `f` bits in a `w`-bit ring.
///
/// `R` is uniform. The shares cover `R`, `r_hi = (R mod 2^(w-1)) >> f`, the
/// top bit of `R` as an arithmetic 0/1 value, and one comparison key per
/// element for the predicate `x < R mod 2^f`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TruncationPair {
    pub id: u64,
    pub r: ShareTensor,
    pub r_hi: ShareTensor,
    pub r_msb: ShareTensor,
    pub keys: Vec<DcfKey>,
}

/// XOR-shared `c = a AND b`, one bit per byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTriple {
    pub id: u64,
    pub party: PartyId,
    pub a: Vec<u8>,
    pub b: Vec<u8>,
    pub c: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Correlated {
    Triple(BeaverTriple),
    Square(SquarePair),
    Trunc(TruncationPair),
    Bits(BitTriple),
}

impl Correlated {
    pub fn id(&self) -> u64 {
        match self {
            Correlated::Triple(t) => t.id,
            Correlated::Square(p) => p.id,
            Correlated::Trunc(p) => p.id,
            Correlated::Bits(t) => t.id,
        }
    }

    pub fn request(&self) -> Request {
        match self {
            Correlated::Triple(t) => Request::Triple {
                op: t.op,
                a_shape: t.a.shape().to_vec(),
                b_shape: t.b.shape().to_vec(),
            },
            Correlated::Square(p) => Request::Square {
                shape: p.a.shape().to_vec(),
            },
            Correlated::Trunc(p) => Request::Trunc {
                shape: p.r.shape().to_vec(),
            },
            Correlated::Bits(t) => Request::Bits { count: t.a.len() },
        }
    }
}

/// Trusted third party generating both halves of every item.
pub struct Dealer {
    rng: ChaCha20Rng,
    fp: FixedPointConfig,
    next_id: u64,
}

impl Dealer {
    pub fn new(seed: u64, fp: FixedPointConfig) -> Dealer {
        Dealer {
            rng: ChaCha20Rng::seed_from_u64(seed),
            fp,
            next_id: 0,
        }
    }

    pub fn fp(&self) -> FixedPointConfig {
        self.fp
    }

    /// Both halves of one item, S0's first.
    pub fn issue(&mut self, req: &Request) -> Result<(Correlated, Correlated)> {
        let id = self.next_id;
        self.next_id += 1;
        let fp = self.fp;
        let rng = &mut self.rng;
        Ok(match req {
            Request::Triple { op, a_shape, b_shape } => {
                let a = random_tensor(rng, a_shape.clone(), fp);
                let b = random_tensor(rng, b_shape.clone(), fp);
                let z = op.apply(&a, &b)?;
                let (a0, a1) = shr(&a, rng);
                let (b0, b1) = shr(&b, rng);
                let (z0, z1) = shr(&z, rng);
                (
                    Correlated::Triple(BeaverTriple { id, op: *op, a: a0, b: b0, z: z0 }),
                    Correlated::Triple(BeaverTriple { id, op: *op, a: a1, b: b1, z: z1 }),
                )
            }
            Request::Square { shape } => {
                let a = random_tensor(rng, shape.clone(), fp);
                let z = a.mul(&a)?;
                let (a0, a1) = shr(&a, rng);
                let (z0, z1) = shr(&z, rng);
                (
                    Correlated::Square(SquarePair { id, a: a0, z: z0 }),
                    Correlated::Square(SquarePair { id, a: a1, z: z1 }),
                )
            }
            Request::Trunc { shape } => {
                let ring = fp.ring();
                let w = ring.bits();
                let f = fp.frac_bits as u32;
                let r = random_tensor(rng, shape.clone(), fp);
                let low = (1u32 << (w - 1)) - 1;
                let r_hi = r.map(|v| (v & low) >> f);
                let r_msb = r.map(|v| v >> (w - 1));
                let mut k0 = Vec::with_capacity(r.len());
                let mut k1 = Vec::with_capacity(r.len());
                for &v in r.data() {
                    let (a, b) = dcf::gen(v & ((1 << f) - 1), 1, f, ring, rng)?;
                    k0.push(a);
                    k1.push(b);
                }
                let (r0, r1) = shr(&r, rng);
                let (h0, h1) = shr(&r_hi, rng);
                let (m0, m1) = shr(&r_msb, rng);
                (
                    Correlated::Trunc(TruncationPair { id, r: r0, r_hi: h0, r_msb: m0, keys: k0 }),
                    Correlated::Trunc(TruncationPair { id, r: r1, r_hi: h1, r_msb: m1, keys: k1 }),
                )
            }
            Request::Bits { count } => {
                let mut bits = || (0..*count).map(|_| rng.gen::<u8>() & 1).collect::<Vec<u8>>();
                let a = bits();
                let b = bits();
                let a0 = bits();
                let b0 = bits();
                let c0 = bits();
                let xor = |x: &[u8], y: &[u8]| x.iter().zip(y).map(|(p, q)| p ^ q).collect::<Vec<u8>>();
                let c: Vec<u8> = a.iter().zip(&b).map(|(p, q)| p & q).collect();
                (
                    Correlated::Bits(BitTriple { id, party: PartyId::S0, a: a0.clone(), b: b0.clone(), c: c0.clone() }),
                    Correlated::Bits(BitTriple {
                        id,
                        party: PartyId::S1,
                        a: xor(&a, &a0),
                        b: xor(&b, &b0),
                        c: xor(&c, &c0),
                    }),
                )
            }
        })
    }

    /// Writes one correlated-randomness file per party for `plan`.
    pub fn write_files(&mut self, plan: &[Request], s0: &Path, s1: &Path) -> Result<()> {
        let mut w0 = PcrWriter::create(s0, PartyId::S0, self.fp)?;
        let mut w1 = PcrWriter::create(s1, PartyId::S1, self.fp)?;
        for req in plan {
            let (a, b) = self.issue(req)?;
            w0.write(&a)?;
            w1.write(&b)?;
        }
        w0.finish()?;
        w1.finish()
    }
}

struct InlineState {
    dealer: Dealer,
    pending: [VecDeque<Correlated>; 2],
}

enum Source {
    Inline(Arc<Mutex<InlineState>>),
    File(PcrReader<BufReader<File>>),
    Queue(VecDeque<Correlated>),
    Local(Box<Dealer>),
}

/// One party's stream of correlated randomness. Items are handed out in the
/// order the online phase asks for them; asking for a different kind or shape
/// than the next item on the stream is a protocol abort.
pub struct CorrelatedSource {
    party: PartyId,
    source: Source,
}

impl CorrelatedSource {
    /// Two sources backed by one in-process dealer; each item is generated
    /// on first request and the peer's half is queued for it.
    pub fn inline_pair(seed: u64, fp: FixedPointConfig) -> (CorrelatedSource, CorrelatedSource) {
        let state = Arc::new(Mutex::new(InlineState {
            dealer: Dealer::new(seed, fp),
            pending: [VecDeque::new(), VecDeque::new()],
        }));
        (
            CorrelatedSource { party: PartyId::S0, source: Source::Inline(state.clone()) },
            CorrelatedSource { party: PartyId::S1, source: Source::Inline(state) },
        )
    }

    /// This party's half of the stream a [`Dealer`] seeded with `seed` would
    /// produce; the other half is discarded. For simulations where both
    /// servers know the dealer seed.
    pub fn local(seed: u64, fp: FixedPointConfig, party: PartyId) -> CorrelatedSource {
        CorrelatedSource { party, source: Source::Local(Box::new(Dealer::new(seed, fp))) }
    }

    pub fn open(path: &Path) -> Result<CorrelatedSource> {
        let reader = PcrReader::new(BufReader::new(File::open(path)?))?;
        Ok(CorrelatedSource { party: reader.party, source: Source::File(reader) })
    }

    pub fn from_items(party: PartyId, items: Vec<Correlated>) -> CorrelatedSource {
        CorrelatedSource { party, source: Source::Queue(items.into()) }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn take(&mut self, req: &Request) -> Result<Correlated> {
        let item = match &mut self.source {
            Source::Inline(state) => {
                let mut st = state.lock().map_err(|_| Error::Protocol("dealer poisoned".into()))?;
                let me = self.party.index();
                match st.pending[me].pop_front() {
                    Some(item) => item,
                    None => {
                        let (a, b) = st.dealer.issue(req)?;
                        let (mine, theirs) = if me == 0 { (a, b) } else { (b, a) };
                        st.pending[1 - me].push_back(theirs);
                        mine
                    }
                }
            }
            Source::File(r) => r
                .next()?
                .ok_or_else(|| Error::Exhausted(format!("no item left for {req:?}")))?,
            Source::Queue(q) => q
                .pop_front()
                .ok_or_else(|| Error::Exhausted(format!("no item left for {req:?}")))?,
            Source::Local(dealer) => {
                let (a, b) = dealer.issue(req)?;
                if self.party.is_s0() {
                    a
                } else {
                    b
                }
            }
        };
        let got = item.request();
        if &got != req {
            return Err(Error::Protocol(format!(
                "correlated stream out of step: wanted {req:?}, next item is {got:?}"
            )));
        }
        Ok(item)
    }

    pub fn triple(&mut self, op: MulOp, a_shape: &[usize], b_shape: &[usize]) -> Result<BeaverTriple> {
        match self.take(&Request::Triple { op, a_shape: a_shape.to_vec(), b_shape: b_shape.to_vec() })? {
            Correlated::Triple(t) => Ok(t),
            _ => unreachable!("request checked"),
        }
    }

    pub fn square(&mut self, shape: &[usize]) -> Result<SquarePair> {
        match self.take(&Request::Square { shape: shape.to_vec() })? {
            Correlated::Square(p) => Ok(p),
            _ => unreachable!("request checked"),
        }
    }

    pub fn trunc(&mut self, shape: &[usize]) -> Result<TruncationPair> {
        match self.take(&Request::Trunc { shape: shape.to_vec() })? {
            Correlated::Trunc(p) => Ok(p),
            _ => unreachable!("request checked"),
        }
    }

    pub fn bits(&mut self, count: usize) -> Result<BitTriple> {
        match self.take(&Request::Bits { count })? {
            Correlated::Bits(t) => Ok(t),
            _ => unreachable!("request checked"),
        }
    }
}

const PCR_MAGIC: &[u8; 4] = b"PCR1";

/// Streams items into the `PCR1` format: magic, party byte, ring width and
/// fraction bits; then per item a kind byte, the item id, its geometry and
/// the raw share words.
pub struct PcrWriter<W: Write> {
    out: W,
    party: PartyId,
    buf: Vec<u8>,
}

impl PcrWriter<BufWriter<File>> {
    pub fn create(path: &Path, party: PartyId, fp: FixedPointConfig) -> Result<Self> {
        PcrWriter::new(BufWriter::new(File::create(path)?), party, fp)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_shape(buf: &mut Vec<u8>, shape: &[usize]) {
    put_u32(buf, shape.len());
    for &d in shape {
        put_u32(buf, d);
    }
}

impl<W: Write> PcrWriter<W> {
    pub fn new(mut out: W, party: PartyId, fp: FixedPointConfig) -> Result<Self> {
        out.write_all(PCR_MAGIC)?;
        out.write_all(&[party.index() as u8, fp.total_bits, fp.frac_bits])?;
        Ok(PcrWriter { out, party, buf: Vec::new() })
    }

    pub fn write(&mut self, item: &Correlated) -> Result<()> {
        let me = self.party;
        let b = &mut self.buf;
        b.clear();
        match item {
            Correlated::Triple(t) => {
                same_party(me, t.a.party)?;
                b.push(1);
                b.extend_from_slice(&t.id.to_le_bytes());
                let (kind, p) = match t.op {
                    MulOp::Elementwise => (0u8, Conv2dParams::default()),
                    MulOp::Matmul => (1, Conv2dParams::default()),
                    MulOp::Conv(p) => (2, p),
                };
                b.push(kind);
                put_u32(b, p.stride);
                put_u32(b, p.padding);
                put_shape(b, t.a.shape());
                put_shape(b, t.b.shape());
                put_shape(b, t.z.shape());
                for s in [&t.a, &t.b, &t.z] {
                    b.extend_from_slice(&words_to_bytes(s.data()));
                }
            }
            Correlated::Square(p) => {
                same_party(me, p.a.party)?;
                b.push(2);
                b.extend_from_slice(&p.id.to_le_bytes());
                put_shape(b, p.a.shape());
                b.extend_from_slice(&words_to_bytes(p.a.data()));
                b.extend_from_slice(&words_to_bytes(p.z.data()));
            }
            Correlated::Trunc(p) => {
                same_party(me, p.r.party)?;
                b.push(3);
                b.extend_from_slice(&p.id.to_le_bytes());
                put_shape(b, p.r.shape());
                for s in [&p.r, &p.r_hi, &p.r_msb] {
                    b.extend_from_slice(&words_to_bytes(s.data()));
                }
                for k in &p.keys {
                    k.write(b);
                }
            }
            Correlated::Bits(t) => {
                same_party(me, t.party)?;
                b.push(4);
                b.extend_from_slice(&t.id.to_le_bytes());
                put_u32(b, t.a.len());
                for v in [&t.a, &t.b, &t.c] {
                    b.extend_from_slice(&pack_bits(v));
                }
            }
        }
        self.out.write_all(&self.buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn same_party(file: PartyId, item: PartyId) -> Result<()> {
    if file != item {
        return Err(Error::Contract("item written to the other party's file".into()));
    }
    Ok(())
}

pub struct PcrReader<R: Read> {
    input: R,
    party: PartyId,
    fp: FixedPointConfig,
}

impl<R: Read> PcrReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut hdr = [0u8; 7];
        input.read_exact(&mut hdr)?;
        if &hdr[..4] != PCR_MAGIC {
            return Err(Error::Format("not a correlated-randomness file".into()));
        }
        let party = PartyId::from_index(hdr[4] as usize)?;
        let fp = FixedPointConfig::new(hdr[5], hdr[6])?;
        Ok(PcrReader { input, party, fp })
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn fp(&self) -> FixedPointConfig {
        self.fp
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut v = vec![0u8; n];
        self.input.read_exact(&mut v)?;
        Ok(v)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b[..4].try_into().unwrap()) as usize)
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format("correlated item rank".into()));
        }
        (0..rank).map(|_| self.u32()).collect()
    }

    fn share(&mut self, shape: &[usize]) -> Result<ShareTensor> {
        let n: usize = shape.iter().product();
        let words = bytes_to_words(&self.bytes(4 * n)?, n)
            .map_err(|_| Error::Format("truncated correlated item".into()))?;
        Ok(ShareTensor::new(self.party, RingTensor::new(shape.to_vec(), words, self.fp)?))
    }

    /// The next item, or `None` at a clean end of file.
    pub fn next(&mut self) -> Result<Option<Correlated>> {
        let mut kind = [0u8; 1];
        match self.input.read(&mut kind)? {
            0 => return Ok(None),
            _ => {}
        }
        let id = u64::from_le_bytes(self.bytes(8)?.try_into().unwrap());
        let item = match kind[0] {
            1 => {
                let k = self.bytes(1)?[0];
                let stride = self.u32()?;
                let padding = self.u32()?;
                let op = match k {
                    0 => MulOp::Elementwise,
                    1 => MulOp::Matmul,
                    2 => MulOp::Conv(Conv2dParams { stride, padding }),
                    _ => return Err(Error::Format(format!("triple kind {k}"))),
                };
                let (sa, sb, sz) = (self.shape()?, self.shape()?, self.shape()?);
                let a = self.share(&sa)?;
                let b = self.share(&sb)?;
                let z = self.share(&sz)?;
                Correlated::Triple(BeaverTriple { id, op, a, b, z })
            }
            2 => {
                let s = self.shape()?;
                let a = self.share(&s)?;
                let z = self.share(&s)?;
                Correlated::Square(SquarePair { id, a, z })
            }
            3 => {
                let s = self.shape()?;
                let r = self.share(&s)?;
                let r_hi = self.share(&s)?;
                let r_msb = self.share(&s)?;
                let f = self.fp.frac_bits as u32;
                let len = DcfKey::byte_len(f);
                let raw = self.bytes(len * r.len())?;
                let keys = raw
                    .chunks_exact(len)
                    .map(|c| DcfKey::read(c, f))
                    .collect::<Result<Vec<_>>>()?;
                Correlated::Trunc(TruncationPair { id, r, r_hi, r_msb, keys })
            }
            4 => {
                let n = self.u32()?;
                let packed = n.div_ceil(8);
                let mut v = Vec::with_capacity(3);
                for _ in 0..3 {
                    let raw = self.bytes(packed)?;
                    v.push(unpack_bits(&raw, n).map_err(|_| Error::Format("bit triple".into()))?);
                }
                let c = v.pop().unwrap();
                let b = v.pop().unwrap();
                let a = v.pop().unwrap();
                Correlated::Bits(BitTriple { id, party: self.party, a, b, c })
            }
            k => return Err(Error::Format(format!("correlated item kind {k}"))),
        };
        Ok(Some(item))
    }
}

fn check_party(ch: &Channel, shares: &[&ShareTensor]) -> Result<()> {
    for s in shares {
        if s.party != ch.party() {
            return Err(Error::Contract(format!(
                "{:?} share used on {:?}'s channel",
                s.party,
                ch.party()
            )));
        }
    }
    Ok(())
}

fn check_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: operand {got:?}, correlated item {want:?}")));
    }
    Ok(())
}

/// Opens `mine` (this party's share of one or more masked tensors,
/// concatenated) and returns the reconstructed words.
fn open_words(ch: &mut Channel, t: MsgType, mine: &[u32], ring_mask: u32) -> Result<Vec<u32>> {
    let theirs = bytes_to_words(&ch.exchange(t, &words_to_bytes(mine))?, mine.len())?;
    Ok(mine
        .iter()
        .zip(theirs)
        .map(|(a, b)| a.wrapping_add(b) & ring_mask)
        .collect())
}

/// Secure product `X (op) Y` in one exchange round.
pub fn mul_2pc(x: &ShareTensor, y: &ShareTensor, t: &BeaverTriple, ch: &mut Channel) -> Result<ShareTensor> {
    check_party(ch, &[x, y, &t.a, &t.b, &t.z])?;
    check_shape("mul lhs", x.shape(), t.a.shape())?;
    check_shape("mul rhs", y.shape(), t.b.shape())?;
    ch.consume(t.id)?;
    let e_mine = x.share.sub(&t.a.share)?;
    let f_mine = y.share.sub(&t.b.share)?;
    let mut payload = e_mine.data().to_vec();
    payload.extend_from_slice(f_mine.data());
    let opened = open_words(ch, MsgType::MulOpen, &payload, x.ring().mask())?;
    let (e, f) = opened.split_at(e_mine.len());
    let e = e_mine.with_data(e.to_vec())?;
    let f = f_mine.with_data(f.to_vec())?;
    // -i*E(op)F + X_i(op)F folded into (X_i - i*E)(op)F
    let lhs = match ch.party() {
        PartyId::S0 => x.share.clone(),
        PartyId::S1 => x.share.sub(&e)?,
    };
    let r = t
        .op
        .apply(&lhs, &f)?
        .add(&t.op.apply(&e, &y.share)?)?
        .add(&t.z.share)?;
    Ok(ShareTensor::new(ch.party(), r))
}

/// Secure elementwise square in one exchange round.
pub fn square_2pc(x: &ShareTensor, p: &SquarePair, ch: &mut Channel) -> Result<ShareTensor> {
    check_party(ch, &[x, &p.a, &p.z])?;
    check_shape("square", x.shape(), p.a.shape())?;
    ch.consume(p.id)?;
    let e_mine = x.share.sub(&p.a.share)?;
    let e = e_mine.with_data(open_words(ch, MsgType::SquareOpen, e_mine.data(), x.ring().mask())?)?;
    let mut r = p.z.share.add(&e.mul(&p.a.share)?.scale(2))?;
    if ch.party() == PartyId::S1 {
        r = r.add(&e.mul(&e)?)?;
    }
    Ok(ShareTensor::new(ch.party(), r))
}

/// Exact arithmetic shift right by the fraction bits, in one exchange round.
///
/// Requires `|rec(X)| < 2^(w-2)`.
pub fn truncate_2pc(x: &ShareTensor, p: &TruncationPair, ch: &mut Channel) -> Result<ShareTensor> {
    check_party(ch, &[x, &p.r, &p.r_hi, &p.r_msb])?;
    check_shape("truncate", x.shape(), p.r.shape())?;
    if p.keys.len() != x.len() {
        return Err(Error::Shape("truncation keys".into()));
    }
    ch.consume(p.id)?;
    let fp = x.fp();
    let ring = fp.ring();
    let w = ring.bits();
    let f = fp.frac_bits as u32;
    let h = 1u32 << (w - 2);
    let is_s0 = ch.party().is_s0();

    let mut masked = x.share.add(&p.r.share)?;
    if is_s0 {
        masked = masked.add_scalar(h);
    }
    let c = open_words(ch, MsgType::TruncOpen, masked.data(), ring.mask())?;

    let low = (1u32 << (w - 1)) - 1;
    let carry_weight = 1u32 << (w - 1 - f);
    let mut out = Vec::with_capacity(c.len());
    for (j, &cj) in c.iter().enumerate() {
        let c_msb = cj >> (w - 1);
        let c_hi = (cj & low) >> f;
        let c_lo = cj & ((1 << f) - 1);
        let borrow = dcf::eval(&p.keys[j], c_lo, ring);
        // carry = c_msb XOR r_msb = c_msb + (1 - 2 c_msb) r_msb
        let coeff = if c_msb == 1 { ring.neg(1) } else { 1 };
        let mut carry = ring.mul(coeff, p.r_msb.data()[j]);
        let mut v = ring.neg(ring.add(p.r_hi.data()[j], borrow));
        if is_s0 {
            carry = ring.add(carry, c_msb);
            v = ring.add(v, ring.sub(c_hi, h >> f));
        }
        out.push(ring.add(v, ring.mul(carry, carry_weight)));
    }
    Ok(ShareTensor::new(ch.party(), x.share.with_data(out)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::Ring;
    use crate::sharing::rec;
    use crate::transport::run_pair;

    fn fp(bits: u8) -> FixedPointConfig {
        FixedPointConfig::new(bits, 1).unwrap()
    }

    fn t(shape: Vec<usize>, v: &[i64], f: FixedPointConfig) -> RingTensor {
        RingTensor::from_signed(shape, v, f).unwrap()
    }

    fn share(party: PartyId, v: i64, f: FixedPointConfig) -> ShareTensor {
        ShareTensor::new(party, t(vec![1], &[v], f))
    }

    #[test]
    fn dealer_triple_example_and_invariants() {
        let mut d = Dealer::new(1, fp(8));
        let reqs = [
            Request::Triple { op: MulOp::Elementwise, a_shape: vec![1], b_shape: vec![1] },
            Request::Triple { op: MulOp::Matmul, a_shape: vec![3, 4], b_shape: vec![4, 2] },
            Request::Triple {
                op: MulOp::Conv(Conv2dParams { stride: 1, padding: 1 }),
                a_shape: vec![1, 2, 5, 5],
                b_shape: vec![3, 2, 3, 3],
            },
        ];
        for req in &reqs {
            let (Correlated::Triple(t0), Correlated::Triple(t1)) = d.issue(req).unwrap() else {
                panic!()
            };
            assert_eq!(t0.id, t1.id);
            let a = rec(&t0.a, &t1.a).unwrap();
            let b = rec(&t0.b, &t1.b).unwrap();
            assert_eq!(rec(&t0.z, &t1.z).unwrap(), t0.op.apply(&a, &b).unwrap());
        }
        // the conv geometry agrees with a direct nested-loop product on one output
        let mut d = Dealer::new(2, FixedPointConfig::default());
        let (Correlated::Triple(t0), Correlated::Triple(t1)) = d.issue(&reqs[2]).unwrap() else {
            panic!()
        };
        let a = rec(&t0.a, &t1.a).unwrap();
        let b = rec(&t0.b, &t1.b).unwrap();
        let z = rec(&t0.z, &t1.z).unwrap();
        let mut acc = 0u32;
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    acc = acc.wrapping_add(a.data()[(c * 5 + 1 + i) * 5 + 1 + j].wrapping_mul(b.data()[((2 * 2 + c) * 3 + i) * 3 + j]));
                }
            }
        }
        // output channel 2, position (2, 2)
        assert_eq!(z.data()[(2 * 5 + 2) * 5 + 2], acc);
    }

    #[test]
    fn dealer_truncation_pair_consistency() {
        let f = FixedPointConfig::default();
        let mut d = Dealer::new(3, f);
        let (Correlated::Trunc(p0), Correlated::Trunc(p1)) = d.issue(&Request::Trunc { shape: vec![64] }).unwrap() else {
            panic!()
        };
        let r = rec(&p0.r, &p1.r).unwrap();
        let hi = rec(&p0.r_hi, &p1.r_hi).unwrap();
        let msb = rec(&p0.r_msb, &p1.r_msb).unwrap();
        let ring = f.ring();
        for j in 0..64 {
            let v = r.data()[j];
            assert_eq!(msb.data()[j] * (1 << 31) + hi.data()[j] * 4096 + (v & 4095), v);
            let lo = v & 4095;
            for x in [0, lo.saturating_sub(1), lo, 4095] {
                let s = ring.add(dcf::eval(&p0.keys[j], x, ring), dcf::eval(&p1.keys[j], x, ring));
                assert_eq!(s, (x < lo) as u32);
            }
        }
    }

    #[test]
    fn multiplication_example() {
        let f = fp(8);
        let triple = |party, a, b, z| BeaverTriple {
            id: 0,
            op: MulOp::Elementwise,
            a: share(party, a, f),
            b: share(party, b, f),
            z: share(party, z, f),
        };
        let (r0, r1) = run_pair(
            None,
            |ch| mul_2pc(&share(PartyId::S0, 2, f), &share(PartyId::S0, 3, f), &triple(PartyId::S0, 2, 1, 4), ch).unwrap(),
            |ch| mul_2pc(&share(PartyId::S1, 4, f), &share(PartyId::S1, 4, f), &triple(PartyId::S1, 3, 1, 6), ch).unwrap(),
        );
        assert_eq!(r0.data(), &[17]);
        assert_eq!(r1.data(), &[25]);
        assert_eq!(rec(&r0, &r1).unwrap().to_signed(), vec![42]);
    }

    #[test]
    fn square_example() {
        let f = fp(8);
        let pair = |party, a, z| SquarePair { id: 0, a: share(party, a, f), z: share(party, z, f) };
        let (r0, r1) = run_pair(
            None,
            |ch| square_2pc(&share(PartyId::S0, 1, f), &pair(PartyId::S0, 1, 0), ch).unwrap(),
            |ch| square_2pc(&share(PartyId::S1, 2, f), &pair(PartyId::S1, 0, 1), ch).unwrap(),
        );
        assert_eq!((r0.data()[0], r1.data()[0]), (4, 5));
    }

    /// Runs `body` on both parties with inline dealer sources.
    pub(crate) fn two_party<T: Send>(
        seed: u64,
        f: FixedPointConfig,
        body: impl Fn(PartyId, &mut CorrelatedSource, &mut Channel) -> T + Sync,
    ) -> (T, T) {
        let (mut s0, mut s1) = CorrelatedSource::inline_pair(seed, f);
        run_pair(None, |ch| body(PartyId::S0, &mut s0, ch), |ch| body(PartyId::S1, &mut s1, ch))
    }

    #[test]
    fn mul_and_square_exhaustive_6bit() {
        let f = fp(6);
        let n = 64 * 64;
        let xs: Vec<i64> = (0..n).map(|i| (i / 64) as i64 - 32).collect();
        let ys: Vec<i64> = (0..n).map(|i| (i % 64) as i64 - 32).collect();
        let x = t(vec![n], &xs, f);
        let y = t(vec![n], &ys, f);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (x0, x1) = shr(&x, &mut rng);
        let (y0, y1) = shr(&y, &mut rng);
        let shares = [(x0, y0), (x1, y1)];
        let (r0, r1) = two_party(6, f, |p, src, ch| {
            let (xs, ys) = &shares[p.index()];
            let tr = src.triple(MulOp::Elementwise, &[n], &[n]).unwrap();
            let prod = mul_2pc(xs, ys, &tr, ch).unwrap();
            let sq = square_2pc(xs, &src.square(&[n]).unwrap(), ch).unwrap();
            (prod, sq, ch.transcript_report().rounds)
        });
        assert_eq!(rec(&r0.0, &r1.0).unwrap(), x.mul(&y).unwrap());
        assert_eq!(rec(&r0.1, &r1.1).unwrap(), x.mul(&x).unwrap());
        assert_eq!((r0.2, r1.2), (2, 2));
    }

    #[test]
    fn mul_identity_and_matmul_and_conv() {
        let f = FixedPointConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, vec![1, 3, 8, 8], f);
        let k = random_tensor(&mut rng, vec![4, 3, 3, 3], f);
        let a = random_tensor(&mut rng, vec![5, 7], f);
        let b = random_tensor(&mut rng, vec![7, 2], f);
        let ones = RingTensor::new(vec![5, 7], vec![1; 35], f).unwrap();
        let conv = MulOp::Conv(Conv2dParams { stride: 1, padding: 1 });
        let split = |v: &RingTensor, rng: &mut ChaCha20Rng| {
            let (p, q) = shr(v, rng);
            [p, q]
        };
        let sx = split(&x, &mut rng);
        let sk = split(&k, &mut rng);
        let sa = split(&a, &mut rng);
        let sb = split(&b, &mut rng);
        let s1 = split(&ones, &mut rng);
        let (r0, r1) = two_party(8, f, |p, src, ch| {
            let i = p.index();
            let c = mul_2pc(&sx[i], &sk[i], &src.triple(conv, &[1, 3, 8, 8], &[4, 3, 3, 3]).unwrap(), ch).unwrap();
            let m = mul_2pc(&sa[i], &sb[i], &src.triple(MulOp::Matmul, &[5, 7], &[7, 2]).unwrap(), ch).unwrap();
            let id = mul_2pc(&sa[i], &s1[i], &src.triple(MulOp::Elementwise, &[5, 7], &[5, 7]).unwrap(), ch).unwrap();
            (c, m, id)
        });
        assert_eq!(rec(&r0.0, &r1.0).unwrap(), conv2d_plain(&x, &k, Conv2dParams { stride: 1, padding: 1 }).unwrap());
        assert_eq!(rec(&r0.1, &r1.1).unwrap(), a.matmul(&b).unwrap());
        assert_eq!(rec(&r0.2, &r1.2).unwrap(), a);
    }

    #[test]
    fn triple_reuse_is_rejected() {
        let f = fp(8);
        let (r0, r1) = two_party(9, f, |p, src, ch| {
            let x = share(p, 3, f);
            let tr = src.triple(MulOp::Elementwise, &[1], &[1]).unwrap();
            mul_2pc(&x, &x, &tr, ch).unwrap();
            mul_2pc(&x, &x, &tr, ch)
        });
        assert!(matches!(r0, Err(Error::Contract(_))));
        assert!(matches!(r1, Err(Error::Contract(_))));
    }

    #[test]
    fn stream_mismatch_and_exhaustion_abort() {
        let f = fp(8);
        let (mut s0, _s1) = CorrelatedSource::inline_pair(10, f);
        s0.triple(MulOp::Elementwise, &[2], &[2]).unwrap();
        let mut q = CorrelatedSource::from_items(PartyId::S0, vec![]);
        assert!(matches!(q.square(&[1]), Err(Error::Exhausted(_))));

        let mut d = Dealer::new(0, f);
        let (a, _) = d.issue(&Request::Square { shape: vec![2] }).unwrap();
        let mut q = CorrelatedSource::from_items(PartyId::S0, vec![a]);
        let e = q.square(&[3]).unwrap_err();
        assert!(e.is_protocol_abort());
    }

    #[test]
    fn inline_sources_agree_regardless_of_who_asks_first() {
        let f = fp(8);
        let (mut s0, mut s1) = CorrelatedSource::inline_pair(11, f);
        let a1 = s1.square(&[4]).unwrap();
        let b1 = s1.bits(9).unwrap();
        let a0 = s0.square(&[4]).unwrap();
        let b0 = s0.bits(9).unwrap();
        assert_eq!(a0.id, a1.id);
        let a = rec(&a0.a, &a1.a).unwrap();
        assert_eq!(rec(&a0.z, &a1.z).unwrap(), a.mul(&a).unwrap());
        for i in 0..9 {
            assert_eq!(b0.c[i] ^ b1.c[i], (b0.a[i] ^ b1.a[i]) & (b0.b[i] ^ b1.b[i]));
        }
    }

    #[test]
    fn pcr_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FixedPointConfig::default();
        let plan = vec![
            Request::Triple {
                op: MulOp::Conv(Conv2dParams { stride: 2, padding: 1 }),
                a_shape: vec![1, 2, 4, 4],
                b_shape: vec![3, 2, 3, 3],
            },
            Request::Triple { op: MulOp::Matmul, a_shape: vec![2, 3], b_shape: vec![3, 1] },
            Request::Square { shape: vec![5] },
            Request::Trunc { shape: vec![2, 3] },
            Request::Bits { count: 13 },
        ];
        let (p0, p1) = (dir.path().join("s0.pcr"), dir.path().join("s1.pcr"));
        Dealer::new(12, f).write_files(&plan, &p0, &p1).unwrap();
        let mut d = Dealer::new(12, f);
        let mut f0 = CorrelatedSource::open(&p0).unwrap();
        let mut f1 = CorrelatedSource::open(&p1).unwrap();
        let mut l0 = CorrelatedSource::local(12, f, PartyId::S0);
        let mut l1 = CorrelatedSource::local(12, f, PartyId::S1);
        assert_eq!(f1.party(), PartyId::S1);
        for req in &plan {
            let (a, b) = d.issue(req).unwrap();
            assert_eq!(l0.take(req).unwrap(), a);
            assert_eq!(l1.take(req).unwrap(), b);
            assert_eq!(f0.take(req).unwrap(), a);
            assert_eq!(f1.take(req).unwrap(), b);
        }
        assert!(matches!(f0.bits(1), Err(Error::Exhausted(_))));

        let mut bytes = std::fs::read(&p0).unwrap();
        bytes[0] = b'X';
        assert!(PcrReader::new(bytes.as_slice()).is_err());
    }

    fn trunc_case(xs: &[i64], f: FixedPointConfig, seed: u64) -> (Vec<i64>, u64) {
        let x = t(vec![xs.len()], xs, f);
        let (x0, x1) = shr(&x, &mut ChaCha20Rng::seed_from_u64(seed));
        let shares = [x0, x1];
        let (r0, r1) = two_party(seed, f, |p, src, ch| {
            let pair = src.trunc(&[xs.len()]).unwrap();
            let r = truncate_2pc(&shares[p.index()], &pair, ch).unwrap();
            (r, ch.transcript_report().rounds)
        });
        (rec(&r0.0, &r1.0).unwrap().to_signed(), r0.1)
    }

    #[test]
    fn truncation_examples() {
        let f = FixedPointConfig::default();
        let (got, rounds) = trunc_case(&[4096 * 4096, -8192 * 4096, -8192, 0, -1, 4095, 4096], f, 13);
        assert_eq!(got, vec![4096, -8192, -2, 0, -1, 0, 1]);
        assert_eq!(rounds, 1);
    }

    #[test]
    fn truncation_random_against_shift_oracle() {
        let f = FixedPointConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let bound = 1i64 << 30;
        let xs: Vec<i64> = (0..100_000)
            .map(|i| match i {
                0 => bound - 1,
                1 => -(bound - 1),
                _ => rng.gen_range(-bound + 1..bound),
            })
            .collect();
        let (got, _) = trunc_case(&xs, f, 15);
        let want: Vec<i64> = xs.iter().map(|&v| v >> 12).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn truncation_exhaustive_8bit_within_headroom() {
        for frac in 1..=5u8 {
            let f = FixedPointConfig::new(8, frac).unwrap();
            let xs: Vec<i64> = (-63..64).collect();
            for seed in 0..4 {
                let (got, _) = trunc_case(&xs, f, 100 + seed);
                let want: Vec<i64> = xs.iter().map(|&v| v >> frac).collect();
                assert_eq!(got, want, "f={frac}");
            }
        }
    }

    #[test]
    fn opened_values_are_uniform() {
        // With X, Y fixed the opened E (low byte) is uniform across fresh triples.
        let f = fp(8);
        let n = 10_000;
        let x = t(vec![n], &vec![7; n], f);
        let y = t(vec![n], &vec![-3; n], f);
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let (x0, x1) = shr(&x, &mut rng);
        let (y0, y1) = shr(&y, &mut rng);
        let shares = [(x0, y0), (x1, y1)];
        let (mut c0, mut c1) = Channel::loopback_pair(0, None);
        c0.enable_capture();
        let (s0, s1) = CorrelatedSource::inline_pair(17, f);
        let mut srcs = [s0, s1];
        let [a, b] = &mut srcs;
        std::thread::scope(|s| {
            let sh = &shares;
            s.spawn(move || {
                let tr = b.triple(MulOp::Elementwise, &[n], &[n]).unwrap();
                mul_2pc(&sh[1].0, &sh[1].1, &tr, &mut c1).unwrap();
            });
            let tr = a.triple(MulOp::Elementwise, &[n], &[n]).unwrap();
            mul_2pc(&shares[0].0, &shares[0].1, &tr, &mut c0).unwrap();
        });
        let cap = c0.take_capture().unwrap();
        // first frame is S0's own E||F, second is S1's; E = sum of both
        let words = |off: usize| bytes_to_words(&cap[off + 8..off + 8 + 8 * n], 2 * n).unwrap();
        let mine = words(0);
        let theirs = words(8 + 8 * n);
        let ring = Ring::new(8);
        let mut hist = [0usize; 256];
        for i in 0..n {
            hist[ring.add(mine[i], theirs[i]) as usize] += 1;
        }
        let mean = n as f64 / 256.0;
        let sigma = (mean * (1.0 - 1.0 / 256.0)).sqrt();
        assert!(hist.iter().all(|&c| (c as f64 - mean).abs() <= 5.0 * sigma));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn mul_and_square_match_ring_products(
            seed in 0u64..1 << 40,
            xs in proptest::collection::vec(proptest::prelude::any::<u32>(), 1..24),
        ) {
            let f = FixedPointConfig::default();
            let n = xs.len();
            let ys: Vec<u32> = xs.iter().map(|v| v.rotate_left(7) ^ seed as u32).collect();
            let x = RingTensor::new(vec![n], xs, f).unwrap();
            let y = RingTensor::new(vec![n], ys, f).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (x0, x1) = shr(&x, &mut rng);
            let (y0, y1) = shr(&y, &mut rng);
            let shares = [(x0, y0), (x1, y1)];
            let (r0, r1) = two_party(seed, f, |p, src, ch| {
                let (xs, ys) = &shares[p.index()];
                let t = src.triple(MulOp::Elementwise, &[n], &[n]).unwrap();
                let prod = mul_2pc(xs, ys, &t, ch).unwrap();
                let after_mul = ch.transcript_report().rounds;
                let sq = square_2pc(xs, &src.square(&[n]).unwrap(), ch).unwrap();
                (prod, sq, after_mul, ch.transcript_report().rounds)
            });
            proptest::prop_assert_eq!(rec(&r0.0, &r1.0).unwrap(), x.mul(&y).unwrap());
            proptest::prop_assert_eq!(rec(&r0.1, &r1.1).unwrap(), x.mul(&x).unwrap());
            proptest::prop_assert_eq!((r0.2, r0.3), (1, 2));
        }
    }
}

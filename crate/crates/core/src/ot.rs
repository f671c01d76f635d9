//! Diffie-Hellman 1-out-of-4 oblivious transfer over a prime-order subgroup.
//!
//! The sender publishes `S = g^rd`. For each transfer the receiver with
//! choice `c` sends `R = g^b * S^(c+1)` and keeps `S^b`. The sender derives
//! `key_j = R^rd * (S^rd)^-(j+1)` for every candidate `j`; only `key_c`
//! equals the receiver's key. Payload words are masked with a hash of the
//! key, the transfer index and `j`.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, RngCore};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::transport::{bytes_to_words, pack_bits, unpack_bits, words_to_bytes, Channel, MsgType};

/// Candidates per transfer.
pub const CANDIDATES: usize = 4;
pub const CHUNK_BITS: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Elem {
    Small(u64),
    Big(BigUint),
}

#[derive(Clone, Debug)]
enum Repr {
    Small { m: u64, g: u64, q: u64 },
    Big { m: BigUint, g: BigUint, q: BigUint },
}

/// Public group parameters: prime modulus `m`, generator `g` of a subgroup
/// of order `q`. Moduli below `2^32` take a machine-word fast path.
#[derive(Clone, Debug)]
pub struct OtParams {
    name: String,
    repr: Repr,
    width: usize,
}

/// `a * b mod m` for `a, b < m < 2^32`.
fn mulmod(a: u64, b: u64, m: u64) -> u64 {
    a * b % m
}

fn powmod(mut b: u64, mut e: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    b %= m;
    while e > 0 {
        if e & 1 == 1 {
            acc = mulmod(acc, b, m);
        }
        b = mulmod(b, b, m);
        e >>= 1;
    }
    acc
}

impl OtParams {
    pub fn new(name: &str, modulus: BigUint, generator: BigUint, order: BigUint) -> Result<OtParams> {
        let two = BigUint::from(2u8);
        if modulus < BigUint::from(5u8) || generator < two || generator >= modulus || order < two {
            return Err(Error::Config("degenerate group parameters".into()));
        }
        if !generator.modpow(&order, &modulus).is_one() {
            return Err(Error::Config("generator order does not divide the stated order".into()));
        }
        let width = (modulus.bits() as usize).div_ceil(8);
        let repr = match (modulus.to_u64(), generator.to_u64(), order.to_u64()) {
            (Some(m), Some(g), Some(q)) if m < (1 << 32) => Repr::Small { m, g, q },
            _ => Repr::Big { m: modulus, g: generator, q: order },
        };
        Ok(OtParams { name: name.to_string(), repr, width })
    }

    /// 32-bit safe prime `p = 2^32 - 209`, `g = 4` generating the order
    /// `(p-1)/2` subgroup. Group elements are exactly one ring word wide.
    pub fn p32() -> OtParams {
        let p = BigUint::from(4294967087u64);
        let q = (&p - 1u8) / 2u8;
        OtParams::new("p32", p, BigUint::from(4u8), q).expect("valid preset")
    }

    /// 256-bit safe prime `p = 2^256 - 36113`, `g = 4`.
    pub fn p256() -> OtParams {
        let p = (BigUint::one() << 256) - BigUint::from(36113u32);
        let q = (&p - 1u8) / 2u8;
        OtParams::new("p256", p, BigUint::from(4u8), q).expect("valid preset")
    }

    /// `m = 23`, `g = 5` (a generator of the whole group, order 22). For
    /// hand-checkable vectors only.
    pub fn toy23() -> OtParams {
        OtParams::new("toy23", 23u8.into(), 5u8.into(), 22u8.into()).expect("valid preset")
    }

    pub fn by_name(name: &str) -> Result<OtParams> {
        match name {
            "p32" => Ok(OtParams::p32()),
            "p256" => Ok(OtParams::p256()),
            "toy23" => Ok(OtParams::toy23()),
            _ => Err(Error::Config(format!("unknown OT group `{name}`"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Bytes of one serialized group element.
    pub fn element_bytes(&self) -> usize {
        self.width
    }

    pub fn modulus(&self) -> BigUint {
        match &self.repr {
            Repr::Small { m, .. } => BigUint::from(*m),
            Repr::Big { m, .. } => m.clone(),
        }
    }

    pub fn order(&self) -> BigUint {
        match &self.repr {
            Repr::Small { q, .. } => BigUint::from(*q),
            Repr::Big { q, .. } => q.clone(),
        }
    }

    pub fn exponent(&self, k: u64) -> Elem {
        match &self.repr {
            Repr::Small { .. } => Elem::Small(k),
            Repr::Big { .. } => Elem::Big(BigUint::from(k)),
        }
    }

    /// Uniform exponent in `[1, q-1]`.
    pub fn random_exponent<R: RngCore + ?Sized>(&self, rng: &mut R) -> Elem {
        match &self.repr {
            Repr::Small { q, .. } => Elem::Small(rng.gen_range(1..*q)),
            Repr::Big { q, .. } => Elem::Big(rng.gen_biguint_range(&BigUint::one(), q)),
        }
    }

    /// `q - k`, the exponent of `x^-k` for `x` in the subgroup.
    fn negated(&self, k: u64) -> Elem {
        match &self.repr {
            Repr::Small { q, .. } => Elem::Small(q - k),
            Repr::Big { q, .. } => Elem::Big(q - k),
        }
    }

    fn check_exponent(&self, e: &Elem) -> Result<()> {
        let ok = match (&self.repr, e) {
            (Repr::Small { q, .. }, Elem::Small(e)) => *e >= 1 && e < q,
            (Repr::Big { q, .. }, Elem::Big(e)) => !e.is_zero() && e < q,
            _ => false,
        };
        if !ok {
            return Err(Error::Contract("OT exponent must lie in [1, order-1]".into()));
        }
        Ok(())
    }

    pub fn pow(&self, base: &Elem, e: &Elem) -> Elem {
        match (&self.repr, base, e) {
            (Repr::Small { m, .. }, Elem::Small(b), Elem::Small(e)) => Elem::Small(powmod(*b, *e, *m)),
            (Repr::Big { m, .. }, Elem::Big(b), Elem::Big(e)) => Elem::Big(b.modpow(e, m)),
            _ => unreachable!("elements of one group share a representation"),
        }
    }

    pub fn gen_pow(&self, e: &Elem) -> Elem {
        match &self.repr {
            Repr::Small { g, .. } => self.pow(&Elem::Small(*g), e),
            Repr::Big { g, .. } => self.pow(&Elem::Big(g.clone()), e),
        }
    }

    pub fn mul(&self, a: &Elem, b: &Elem) -> Elem {
        match (&self.repr, a, b) {
            (Repr::Small { m, .. }, Elem::Small(a), Elem::Small(b)) => Elem::Small(mulmod(*a, *b, *m)),
            (Repr::Big { m, .. }, Elem::Big(a), Elem::Big(b)) => Elem::Big(a * b % m),
            _ => unreachable!("elements of one group share a representation"),
        }
    }

    /// Fixed-width big-endian encoding.
    pub fn encode(&self, e: &Elem, out: &mut Vec<u8>) {
        match e {
            Elem::Small(v) => out.extend_from_slice(&v.to_be_bytes()[8 - self.width..]),
            Elem::Big(v) => {
                let b = v.to_bytes_be();
                out.extend(std::iter::repeat(0).take(self.width - b.len()));
                out.extend_from_slice(&b);
            }
        }
    }

    /// Parses one element and checks subgroup membership.
    pub fn decode(&self, bytes: &[u8]) -> Result<Elem> {
        if bytes.len() != self.width {
            return Err(Error::Protocol("group element width".into()));
        }
        let e = match &self.repr {
            Repr::Small { .. } => {
                let mut b = [0u8; 8];
                b[8 - self.width..].copy_from_slice(bytes);
                Elem::Small(u64::from_be_bytes(b))
            }
            Repr::Big { .. } => Elem::Big(BigUint::from_bytes_be(bytes)),
        };
        let in_range = match (&self.repr, &e) {
            (Repr::Small { m, .. }, Elem::Small(v)) => *v >= 1 && v < m,
            (Repr::Big { m, .. }, Elem::Big(v)) => !v.is_zero() && v < m,
            _ => false,
        };
        let order = match &self.repr {
            Repr::Small { q, .. } => Elem::Small(*q),
            Repr::Big { q, .. } => Elem::Big(q.clone()),
        };
        if !in_range || self.pow(&e, &order) != self.exponent(1) {
            return Err(Error::Protocol("group element outside the subgroup".into()));
        }
        Ok(e)
    }
}

/// Payload mask for transfer `index`, candidate `j`.
pub fn mask(key: &[u8], index: u64, j: u8) -> u32 {
    let mut h = Sha256::new();
    h.update(key);
    h.update(index.to_le_bytes());
    h.update([j]);
    let d = h.finalize();
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

pub struct SenderState {
    s: Elem,
    rd: Elem,
    /// `(S^rd)^-(j+1)` for each candidate.
    unblind: Vec<Elem>,
}

impl SenderState {
    pub fn public(&self) -> &Elem {
        &self.s
    }
}

pub struct ReceiverState {
    s: Elem,
    /// `S^(c+1)` for each choice.
    shifts: Vec<Elem>,
}

impl ReceiverState {
    pub fn sender_public(&self) -> &Elem {
        &self.s
    }
}

/// Step one on the sender: fix `rd`, send `S = g^rd`.
pub fn ot_setup_send<R: RngCore + ?Sized>(params: &OtParams, rng: &mut R, ch: &mut Channel) -> Result<SenderState> {
    let rd = params.random_exponent(rng);
    let st = sender_state(params, rd)?;
    let mut buf = Vec::with_capacity(params.element_bytes());
    params.encode(&st.s, &mut buf);
    ch.send(MsgType::OtSetup, &buf)?;
    Ok(st)
}

/// Sender state for a caller-chosen `rd`.
pub fn sender_state(params: &OtParams, rd: Elem) -> Result<SenderState> {
    params.check_exponent(&rd)?;
    let s = params.gen_pow(&rd);
    let t = params.pow(&s, &rd);
    let unblind = (1..=CANDIDATES as u64)
        .map(|k| params.pow(&t, &params.negated(k)))
        .collect();
    Ok(SenderState { s, rd, unblind })
}

pub fn ot_setup_recv(params: &OtParams, ch: &mut Channel) -> Result<ReceiverState> {
    let s = params.decode(&ch.recv(MsgType::OtSetup)?)?;
    Ok(receiver_state(params, s))
}

fn receiver_state(params: &OtParams, s: Elem) -> ReceiverState {
    let mut shifts = Vec::with_capacity(CANDIDATES);
    let mut acc = s.clone();
    for _ in 0..CANDIDATES {
        shifts.push(acc.clone());
        acc = params.mul(&acc, &s);
    }
    ReceiverState { s, shifts }
}

/// Step two on the receiver: one group element per choice. Returns the
/// serialized key of every transfer.
pub fn ot_choose<R: RngCore + ?Sized>(
    params: &OtParams,
    st: &ReceiverState,
    choices: &[u8],
    rng: &mut R,
    ch: &mut Channel,
) -> Result<Vec<Vec<u8>>> {
    let width = params.element_bytes();
    let mut msg = Vec::with_capacity(choices.len() * width);
    let mut keys = Vec::with_capacity(choices.len());
    for &c in choices {
        if c as usize >= CANDIDATES {
            return Err(Error::Contract(format!("OT choice {c}")));
        }
        let b = params.random_exponent(rng);
        let r = params.mul(&params.gen_pow(&b), &st.shifts[c as usize]);
        params.encode(&r, &mut msg);
        let mut key = Vec::with_capacity(width);
        params.encode(&params.pow(&st.s, &b), &mut key);
        keys.push(key);
    }
    ch.send(MsgType::OtChoice, &msg)?;
    Ok(keys)
}

/// Steps two and three on the sender: reads the choice elements, sends the
/// masked table (`CANDIDATES` words per transfer), then waits for the
/// receiver's decode status (one bit per `group` consecutive transfers) and
/// aborts if any transfer failed.
pub fn ot_send(
    params: &OtParams,
    st: &SenderState,
    table: &[[u32; CANDIDATES]],
    group: usize,
    ch: &mut Channel,
) -> Result<()> {
    let width = params.element_bytes();
    let msg = ch.recv(MsgType::OtChoice)?;
    if msg.len() != table.len() * width {
        return Err(Error::Protocol(format!(
            "expected {} choice elements, got {} bytes",
            table.len(),
            msg.len()
        )));
    }
    let mut words = Vec::with_capacity(table.len() * CANDIDATES);
    let mut key = Vec::with_capacity(width);
    for (idx, (chunk, row)) in msg.chunks_exact(width).zip(table).enumerate() {
        let r = params.decode(chunk)?;
        let x = params.pow(&r, &st.rd);
        for (j, (&p, u)) in row.iter().zip(&st.unblind).enumerate() {
            key.clear();
            params.encode(&params.mul(&x, u), &mut key);
            words.push(p ^ mask(&key, idx as u64, j as u8));
        }
    }
    ch.send(MsgType::OtTable, &words_to_bytes(&words))?;
    let status = unpack_bits(&ch.recv(MsgType::OtStatus)?, table.len().div_ceil(group.max(1)))?;
    if let Some(bad) = status.iter().position(|&b| b != 1) {
        return Err(Error::Protocol(format!("receiver failed to decode transfer group {bad}")));
    }
    Ok(())
}

/// Steps three and four on the receiver: decrypts its chosen word of every
/// transfer, checks that bits `payload_bits..32` are zero, and reports one
/// status bit per `group` consecutive transfers to the sender.
pub fn ot_receive(
    keys: &[Vec<u8>],
    choices: &[u8],
    payload_bits: u32,
    group: usize,
    ch: &mut Channel,
) -> Result<Vec<u32>> {
    let group = group.max(1);
    let words = bytes_to_words(&ch.recv(MsgType::OtTable)?, keys.len() * CANDIDATES)?;
    let mut out = Vec::with_capacity(keys.len());
    let mut status = vec![1u8; keys.len().div_ceil(group)];
    for (idx, (key, &c)) in keys.iter().zip(choices).enumerate() {
        let v = words[idx * CANDIDATES + c as usize] ^ mask(key, idx as u64, c);
        if v >> payload_bits != 0 {
            status[idx / group] = 0;
        }
        out.push(v);
    }
    ch.send(MsgType::OtStatus, &pack_bits(&status))?;
    if let Some(bad) = status.iter().position(|&b| b != 1) {
        return Err(Error::Protocol(format!("transfer group {bad} failed to decode")));
    }
    Ok(out)
}

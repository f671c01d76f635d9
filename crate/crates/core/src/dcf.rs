//! Distributed comparison function keys.
//!
//! A key pair for `(alpha, beta)` over an `n`-bit domain lets the two parties
//! evaluate additive shares of `beta * [x < alpha]` at any public `x` without
//! learning `alpha`. Tree-based construction with a SHA-256 length-doubling
//! PRG; inputs are consumed most significant bit first.

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ring::Ring;

pub const SEED_BYTES: usize = 16;
type Seed = [u8; SEED_BYTES];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectionWord {
    pub seed: Seed,
    pub value: u32,
    pub t_left: u8,
    pub t_right: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DcfKey {
    pub party: u8,
    pub seed: Seed,
    pub levels: Vec<CorrectionWord>,
    pub final_cw: u32,
}

struct Expanded {
    s: [Seed; 2],
    v: [u32; 2],
    t: [u8; 2],
}

fn expand(seed: &Seed) -> Expanded {
    let mut out = Expanded {
        s: [[0; SEED_BYTES]; 2],
        v: [0; 2],
        t: [0; 2],
    };
    let mut buf = [0u8; SEED_BYTES + 1];
    buf[..SEED_BYTES].copy_from_slice(seed);
    for side in 0..2 {
        buf[SEED_BYTES] = side as u8;
        let h = Sha256::digest(buf);
        out.s[side].copy_from_slice(&h[..SEED_BYTES]);
        out.v[side] = u32::from_le_bytes([h[16], h[17], h[18], h[19]]);
        out.t[side] = h[20] & 1;
    }
    out
}

fn convert(seed: &Seed, ring: Ring) -> u32 {
    ring.reduce(u32::from_le_bytes([seed[0], seed[1], seed[2], seed[3]]))
}

fn xor_seed(a: &Seed, b: &Seed) -> Seed {
    let mut o = *a;
    for (x, y) in o.iter_mut().zip(b) {
        *x ^= y;
    }
    o
}

/// `(-1)^t * v`
fn signed(ring: Ring, t: u8, v: u32) -> u32 {
    if t == 1 {
        ring.neg(v)
    } else {
        ring.reduce(v)
    }
}

fn bit_at(x: u32, n: u32, i: u32) -> usize {
    ((x >> (n - 1 - i)) & 1) as usize
}

/// Key pair for `f(x) = beta if x < alpha else 0`, `x, alpha < 2^n`.
pub fn gen<R: RngCore + ?Sized>(
    alpha: u32,
    beta: u32,
    n: u32,
    ring: Ring,
    rng: &mut R,
) -> Result<(DcfKey, DcfKey)> {
    if n == 0 || n > 32 || (n < 32 && alpha >> n != 0) {
        return Err(Error::Contract(format!("alpha {alpha} outside {n}-bit domain")));
    }
    let mut s = [[0u8; SEED_BYTES]; 2];
    rng.fill_bytes(&mut s[0]);
    rng.fill_bytes(&mut s[1]);
    let roots = s;
    let mut t = [0u8, 1u8];
    let mut v_alpha = 0u32;
    let mut levels = Vec::with_capacity(n as usize);

    for i in 0..n {
        let e = [expand(&s[0]), expand(&s[1])];
        let a = bit_at(alpha, n, i);
        let (keep, lose) = (a, 1 - a);
        let s_cw = xor_seed(&e[0].s[lose], &e[1].s[lose]);
        let mut v_cw = signed(
            ring,
            t[1],
            ring.sub(ring.sub(ring.reduce(e[1].v[lose]), ring.reduce(e[0].v[lose])), v_alpha),
        );
        if lose == 0 {
            // x goes left of alpha here: every such x is below alpha
            v_cw = ring.add(v_cw, signed(ring, t[1], beta));
        }
        v_alpha = ring.add(
            ring.add(ring.sub(v_alpha, ring.reduce(e[1].v[keep])), ring.reduce(e[0].v[keep])),
            signed(ring, t[1], v_cw),
        );
        let t_cw = [
            e[0].t[0] ^ e[1].t[0] ^ a as u8 ^ 1,
            e[0].t[1] ^ e[1].t[1] ^ a as u8,
        ];
        for b in 0..2 {
            s[b] = if t[b] == 1 {
                xor_seed(&e[b].s[keep], &s_cw)
            } else {
                e[b].s[keep]
            };
            t[b] = e[b].t[keep] ^ (t[b] & t_cw[keep]);
        }
        levels.push(CorrectionWord {
            seed: s_cw,
            value: v_cw,
            t_left: t_cw[0],
            t_right: t_cw[1],
        });
    }
    let final_cw = signed(
        ring,
        t[1],
        ring.sub(ring.sub(convert(&s[1], ring), convert(&s[0], ring)), v_alpha),
    );
    let key = |party: u8| DcfKey {
        party,
        seed: roots[party as usize],
        levels: levels.clone(),
        final_cw,
    };
    Ok((key(0), key(1)))
}

/// This party's additive share of `f(x)`.
pub fn eval(key: &DcfKey, x: u32, ring: Ring) -> u32 {
    let n = key.levels.len() as u32;
    let b = key.party;
    let mut s = key.seed;
    let mut t = b;
    let mut acc = 0u32;
    for (i, cw) in key.levels.iter().enumerate() {
        let e = expand(&s);
        let dir = bit_at(x, n, i as u32);
        let mut next = e.s[dir];
        let mut t_next = e.t[dir];
        let mut v = ring.reduce(e.v[dir]);
        if t == 1 {
            next = xor_seed(&next, &cw.seed);
            t_next ^= if dir == 0 { cw.t_left } else { cw.t_right };
            v = ring.add(v, cw.value);
        }
        acc = ring.add(acc, signed(ring, b, v));
        s = next;
        t = t_next;
    }
    let mut last = convert(&s, ring);
    if t == 1 {
        last = ring.add(last, key.final_cw);
    }
    ring.add(acc, signed(ring, b, last))
}

impl DcfKey {
    pub fn domain_bits(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn byte_len(n: u32) -> usize {
        1 + SEED_BYTES + n as usize * (SEED_BYTES + 5) + 4
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.push(self.party);
        out.extend_from_slice(&self.seed);
        for cw in &self.levels {
            out.extend_from_slice(&cw.seed);
            out.extend_from_slice(&cw.value.to_le_bytes());
            out.push(cw.t_left | (cw.t_right << 1));
        }
        out.extend_from_slice(&self.final_cw.to_le_bytes());
    }

    pub fn read(bytes: &[u8], n: u32) -> Result<DcfKey> {
        if bytes.len() != DcfKey::byte_len(n) || bytes[0] > 1 {
            return Err(Error::Format("malformed comparison key".into()));
        }
        let seed_at = |at: usize| -> Seed { bytes[at..at + SEED_BYTES].try_into().unwrap() };
        let word_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let mut at = 1 + SEED_BYTES;
        let mut levels = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let flags = bytes[at + SEED_BYTES + 4];
            if flags > 3 {
                return Err(Error::Format("malformed comparison key".into()));
            }
            levels.push(CorrectionWord {
                seed: seed_at(at),
                value: word_at(at + SEED_BYTES),
                t_left: flags & 1,
                t_right: flags >> 1,
            });
            at += SEED_BYTES + 5;
        }
        Ok(DcfKey {
            party: bytes[0],
            seed: seed_at(1),
            levels,
            final_cw: word_at(at),
        })
    }
}

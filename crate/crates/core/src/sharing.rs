//! Additive 2-of-2 secret sharing over the ring.

use std::io::{Read, Write};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{read_tensor, write_tensor, FixedPointConfig, Ring, RingElement, RingTensor};

/// One of the two computing servers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartyId {
    S0,
    S1,
}

impl PartyId {
    pub fn index(self) -> usize {
        match self {
            PartyId::S0 => 0,
            PartyId::S1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<PartyId> {
        match i {
            0 => Ok(PartyId::S0),
            1 => Ok(PartyId::S1),
            _ => Err(Error::Format(format!("party id {i}"))),
        }
    }

    pub fn peer(self) -> PartyId {
        match self {
            PartyId::S0 => PartyId::S1,
            PartyId::S1 => PartyId::S0,
        }
    }

    pub fn is_s0(self) -> bool {
        self == PartyId::S0
    }
}

/// One party's additive share of a [`RingTensor`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareTensor {
    pub party: PartyId,
    pub share: RingTensor,
}

impl ShareTensor {
    pub fn new(party: PartyId, share: RingTensor) -> Self {
        ShareTensor { party, share }
    }

    pub fn zeros(party: PartyId, shape: Vec<usize>, fp: FixedPointConfig) -> Self {
        ShareTensor::new(party, RingTensor::zeros(shape, fp))
    }

    /// The share held by `party` of a value that is already public: S0 holds
    /// the value, S1 holds zero.
    pub fn from_public(party: PartyId, value: &RingTensor) -> Self {
        match party {
            PartyId::S0 => ShareTensor::new(party, value.clone()),
            PartyId::S1 => ShareTensor::new(party, RingTensor::zeros(value.shape().to_vec(), value.fp())),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.share.shape()
    }

    pub fn data(&self) -> &[RingElement] {
        self.share.data()
    }

    pub fn fp(&self) -> FixedPointConfig {
        self.share.fp()
    }

    pub fn ring(&self) -> Ring {
        self.share.ring()
    }

    pub fn len(&self) -> usize {
        self.share.len()
    }

    pub fn is_empty(&self) -> bool {
        self.share.is_empty()
    }

    fn check_party(&self, other: &ShareTensor) -> Result<()> {
        if self.party != other.party {
            return Err(Error::Contract(format!(
                "shares of {:?} and {:?} cannot be combined locally",
                self.party, other.party
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &ShareTensor) -> Result<ShareTensor> {
        self.check_party(other)?;
        Ok(ShareTensor::new(self.party, self.share.add(&other.share)?))
    }

    pub fn sub(&self, other: &ShareTensor) -> Result<ShareTensor> {
        self.check_party(other)?;
        Ok(ShareTensor::new(self.party, self.share.sub(&other.share)?))
    }

    pub fn scale(&self, k: RingElement) -> ShareTensor {
        ShareTensor::new(self.party, self.share.scale(k))
    }

    pub fn neg(&self) -> ShareTensor {
        ShareTensor::new(self.party, self.share.neg())
    }

    /// Adds a public constant to the shared value (only S0 touches its share).
    pub fn add_public_scalar(&self, k: RingElement) -> ShareTensor {
        match self.party {
            PartyId::S0 => ShareTensor::new(self.party, self.share.add_scalar(k)),
            PartyId::S1 => self.clone(),
        }
    }

    pub fn add_public(&self, value: &RingTensor) -> Result<ShareTensor> {
        match self.party {
            PartyId::S0 => Ok(ShareTensor::new(self.party, self.share.add(value)?)),
            PartyId::S1 => {
                if value.shape() != self.shape() {
                    return Err(Error::Shape("add_public".into()));
                }
                Ok(self.clone())
            }
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<ShareTensor> {
        Ok(ShareTensor::new(self.party, self.share.reshape(shape)?))
    }

    /// Serialized as the `PRT1` tensor followed by one party-id byte.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_tensor(&mut w, &self.share)?;
        w.write_all(&[self.party.index() as u8])?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<ShareTensor> {
        let share = read_tensor(&mut r)?;
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        Ok(ShareTensor::new(PartyId::from_index(b[0] as usize)?, share))
    }
}

/// Samples uniform ring elements.
pub fn random_tensor<R: RngCore + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fp: FixedPointConfig,
) -> RingTensor {
    let mask = fp.ring().mask();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen::<u32>() & mask).collect();
    RingTensor::new(shape, data, fp).expect("length matches shape")
}

/// Splits `x` into `(r, x - r)` with `r` uniform.
pub fn shr<R: RngCore + ?Sized>(x: &RingTensor, rng: &mut R) -> (ShareTensor, ShareTensor) {
    let r = random_tensor(rng, x.shape().to_vec(), x.fp());
    shr_with_mask(x, r)
}

/// Deterministic variant of [`shr`] with the mask supplied by the caller.
pub fn shr_with_mask(x: &RingTensor, r: RingTensor) -> (ShareTensor, ShareTensor) {
    let other = x.sub(&r).expect("mask has the shape of x");
    (ShareTensor::new(PartyId::S0, r), ShareTensor::new(PartyId::S1, other))
}

pub fn rec(s0: &ShareTensor, s1: &ShareTensor) -> Result<RingTensor> {
    if s0.party == s1.party {
        return Err(Error::Contract(format!(
            "both shares belong to {:?}",
            s0.party
        )));
    }
    s0.share.add(&s1.share)
}

/// `a*X + Y` on one party's shares; no communication.
pub fn affine_local(a: RingElement, x: &ShareTensor, y: &ShareTensor) -> Result<ShareTensor> {
    x.scale(a).add(y)
}

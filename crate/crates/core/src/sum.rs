//! Order-independent exact summation.
//!
//! Every finite `f64` is an integer multiple of 2^-1074, so a sum of doubles is an
//! integer in that unit. [`ExactSum`] keeps that integer in base 2^32 limbs and only
//! rounds once, when the value is read. The result is a function of the multiset of
//! inputs alone, so partial sums computed on any partition of the data and merged in
//! any order round to the same double. Global reductions built on it are therefore
//! bitwise identical whatever the rank count.

use crate::error::{Error, Result};

const LIMBS: usize = 68;
const LIMB_BITS: u32 = 32;
const LIMB_MASK: u128 = 0xffff_ffff;
/// Position of bit 0 of limb 0, as a power of two.
const BASE_EXP: i32 = -1074;
/// Limbs hold at most 2^32 after normalisation; this many unnormalised adds fit in i64.
const MAX_PENDING: u32 = 1 << 30;

#[derive(Clone, Debug)]
pub struct ExactSum {
    limbs: [i64; LIMBS],
    pending: u32,
    special: f64,
    has_special: bool,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            limbs: [0; LIMBS],
            pending: 0,
            special: 0.0,
            has_special: false,
        }
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            // inf/nan combine the same way in any order
            self.special += x;
            self.has_special = true;
            return;
        }
        if x == 0.0 {
            return;
        }
        let bits = x.to_bits();
        let negative = bits >> 63 != 0;
        let biased = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mantissa, exp) = if biased == 0 {
            (frac, BASE_EXP)
        } else {
            (frac | (1u64 << 52), biased - 1075)
        };
        let pos = (exp - BASE_EXP) as u32;
        let k = (pos / LIMB_BITS) as usize;
        let shifted = (mantissa as u128) << (pos % LIMB_BITS);
        let parts = [
            (shifted & LIMB_MASK) as i64,
            ((shifted >> 32) & LIMB_MASK) as i64,
            (shifted >> 64) as i64,
        ];
        for (i, p) in parts.into_iter().enumerate() {
            if negative {
                self.limbs[k + i] -= p;
            } else {
                self.limbs[k + i] += p;
            }
        }
        self.pending += 1;
        if self.pending >= MAX_PENDING {
            self.normalize();
        }
    }

    pub fn merge(&mut self, other: &ExactSum) {
        let mut o = other.clone();
        o.normalize();
        self.normalize();
        for (a, b) in self.limbs.iter_mut().zip(o.limbs.iter()) {
            *a += *b;
        }
        self.pending = 1;
        self.normalize();
        if o.has_special {
            self.special += o.special;
            self.has_special = true;
        }
    }

    /// Carry-propagates so that every limb but the top lies in `[0, 2^32)`.
    /// The resulting representation is unique for a given exact value.
    fn normalize(&mut self) {
        if self.pending == 0 {
            return;
        }
        carry(&mut self.limbs);
        self.pending = 0;
    }

    /// The sum rounded to a double.
    pub fn value(&self) -> f64 {
        let mut l = self.limbs;
        carry(&mut l);
        let negative = l[LIMBS - 1] < 0;
        if negative {
            for x in l.iter_mut() {
                *x = -*x;
            }
            carry(&mut l);
        }
        let mut acc = 0.0f64;
        for i in (0..LIMBS).rev() {
            if l[i] == 0 {
                continue;
            }
            let e = BASE_EXP + (i as i32) * LIMB_BITS as i32;
            if e > 1023 {
                acc = f64::INFINITY;
                break;
            }
            acc += (l[i] as f64) * pow2(e);
        }
        let finite = if negative { -acc } else { acc };
        if self.has_special {
            self.special + finite
        } else {
            finite
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut n = self.clone();
        n.normalize();
        let lo = n.limbs.iter().position(|&x| x != 0).unwrap_or(0);
        let hi = n.limbs.iter().rposition(|&x| x != 0).map_or(0, |i| i + 1);
        let mut out = Vec::with_capacity(13 + 8 * (hi - lo));
        out.push(u8::from(n.has_special));
        out.extend_from_slice(&n.special.to_le_bytes());
        out.extend_from_slice(&(lo as u16).to_le_bytes());
        out.extend_from_slice(&(hi as u16).to_le_bytes());
        for x in &n.limbs[lo..hi.max(lo)] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 {
            return Err(Error::Wire("exact sum payload too short".into()));
        }
        let has_special = bytes[0] != 0;
        let special = f64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let lo = u16::from_le_bytes([bytes[9], bytes[10]]) as usize;
        let hi = u16::from_le_bytes([bytes[11], bytes[12]]) as usize;
        let count = hi.saturating_sub(lo);
        if hi > LIMBS || bytes.len() != 13 + 8 * count {
            return Err(Error::Wire("exact sum payload has inconsistent length".into()));
        }
        let mut s = ExactSum::new();
        for (i, chunk) in bytes[13..].chunks_exact(8).enumerate() {
            s.limbs[lo + i] = i64::from_le_bytes(chunk.try_into().unwrap());
        }
        s.special = special;
        s.has_special = has_special;
        Ok(s)
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        s.extend(iter);
        s
    }
}

fn carry(l: &mut [i64; LIMBS]) {
    for i in 0..LIMBS - 1 {
        let c = l[i] >> LIMB_BITS;
        l[i] -= c << LIMB_BITS;
        l[i + 1] += c;
    }
}

fn pow2(e: i32) -> f64 {
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (e + 1074))
    }
}

/// Exact sum of a slice, rounded once.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().collect::<ExactSum>().value()
}

//! Packed bit strings with explicit length.
//!
//! Bit `i` of a string lives at bit `i % 64` of word `i / 64`, least
//! significant bit first inside the word. File bytes are most significant
//! bit first so hex dumps read left to right; pad bits in a final partial
//! byte are zero. Words keep the invariant that bits past `len` are zero,
//! which lets windowed reads skip masking.

use crate::error::CoreError;
use std::fmt;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Bits {
    words: Vec<u64>,
    len: usize,
}

impl Bits {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero string of the given length.
    pub fn zeros(len: usize) -> Self {
        Bits { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn from_bools(values: &[bool]) -> Self {
        let mut out = Bits::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v {
                out.words[i / 64] |= 1u64 << (i % 64);
            }
        }
        out
    }

    /// Builds a string of `len` bits from `f(0), f(1), ...`.
    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut out = Bits::zeros(len);
        for i in 0..len {
            if f(i) {
                out.words[i / 64] |= 1u64 << (i % 64);
            }
        }
        out
    }

    /// Uniformly random string; simulation plumbing, not security
    /// randomness.
    pub fn random(len: usize, rng: &mut impl rand::Rng) -> Self {
        let mut out = Bits::zeros(len);
        for w in out.words.iter_mut() {
            *w = rng.random();
        }
        out.clear_tail();
        out
    }

    /// Decodes the file representation: byte `i/8`, bit `7 - i%8`. The
    /// byte count must be exactly `ceil(len/8)` and pad bits must be
    /// zero.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self, CoreError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(CoreError::Params(format!(
                "{} bytes cannot hold exactly {len} bits",
                bytes.len()
            )));
        }
        let mut out = Bits::zeros(len);
        for i in 0..len {
            if (bytes[i / 8] >> (7 - i % 8)) & 1 == 1 {
                out.words[i / 64] |= 1u64 << (i % 64);
            }
        }
        for i in len..bytes.len() * 8 {
            if (bytes[i / 8] >> (7 - i % 8)) & 1 == 1 {
                return Err(CoreError::Params(
                    "nonzero pad bits after the declared length".into(),
                ));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.len.div_ceil(8)];
        for i in 0..self.len {
            if self.get(i) {
                bytes[i / 8] |= 1 << (7 - i % 8);
            }
        }
        bytes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range (len {})", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len, "bit {i} out of range (len {})", self.len);
        if v {
            self.words[i / 64] |= 1u64 << (i % 64);
        } else {
            self.words[i / 64] &= !(1u64 << (i % 64));
        }
    }

    pub fn push(&mut self, v: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        if v {
            self.words[self.len / 64] |= 1u64 << (self.len % 64);
        }
        self.len += 1;
    }

    pub fn extend(&mut self, other: &Bits) {
        for i in 0..other.len {
            self.push(other.get(i));
        }
    }

    pub fn concat(&self, other: &Bits) -> Bits {
        let mut out = self.clone();
        out.extend(other);
        out
    }

    pub fn split_at(&self, at: usize) -> (Bits, Bits) {
        assert!(at <= self.len, "split {at} past length {}", self.len);
        let head = Bits::from_fn(at, |i| self.get(i));
        let tail = Bits::from_fn(self.len - at, |i| self.get(at + i));
        (head, tail)
    }

    /// Bit-reversed copy: bit `i` of the result is bit `len-1-i` of self.
    pub fn reversed(&self) -> Bits {
        Bits::from_fn(self.len, |i| self.get(self.len - 1 - i))
    }

    pub fn xor_assign(&mut self, other: &Bits) {
        assert_eq!(self.len, other.len, "xor of unequal lengths");
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w ^= o;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// 64 bits starting at `pos`, least significant bit first, zero
    /// padded past the end of the string.
    pub fn word_at_bit(&self, pos: usize) -> u64 {
        let w = pos / 64;
        let s = pos % 64;
        let lo = self.words.get(w).copied().unwrap_or(0) >> s;
        if s == 0 {
            lo
        } else {
            lo | self.words.get(w + 1).copied().unwrap_or(0) << (64 - s)
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    fn clear_tail(&mut self) {
        let tail = self.len % 64;
        if tail != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits[{}; ", self.len)?;
        for i in 0..self.len.min(64) {
            write!(f, "{}", self.get(i) as u8)?;
        }
        if self.len > 64 {
            write!(f, "...")?;
        }
        write!(f, "]")
    }
}

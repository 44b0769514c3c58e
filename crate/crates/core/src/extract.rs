//! Toeplitz hashing over GF(2) and final output assembly.
//!
//! The hash is `Z = T r` where `T` is the `out_len x input_len` Toeplitz
//! matrix defined by a seed of `input_len + out_len - 1` bits through
//! `T[i][j] = seed[(i - j) + (input_len - 1)]`. The family is
//! two-universal, which makes it a quantum-proof strong extractor; the
//! output length that keeps the result close to uniform comes from the
//! rate module's smooth min-entropy bound via the leftover hash lemma.
//! The seed is part of the published output `K = Z || S` (strongness),
//! and it must come from a trusted external source, never from the
//! simulation generator.

use crate::bits::Bits;
use crate::error::CoreError;

/// Seed bits defining one Toeplitz matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToeplitzSeed {
    bits: Bits,
}

impl ToeplitzSeed {
    pub fn new(bits: Bits) -> Self {
        ToeplitzSeed { bits }
    }

    /// Assembles the seed from the matrix's first column (length
    /// `out_len`) and first row (length `input_len`). The two must agree
    /// on the shared corner `T[0][0]`.
    pub fn from_first_col_row(col: &Bits, row: &Bits) -> Result<Self, CoreError> {
        if col.is_empty() || row.is_empty() {
            return Err(CoreError::Params("empty Toeplitz column or row".into()));
        }
        if col.get(0) != row.get(0) {
            return Err(CoreError::Params(
                "Toeplitz column and row disagree at the corner".into(),
            ));
        }
        let mut bits = row.reversed();
        let (_, rest) = col.split_at(1);
        bits.extend(&rest);
        Ok(ToeplitzSeed { bits })
    }

    pub fn bits(&self) -> &Bits {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Seed bits needed to hash `input_len` bits down to `out_len`.
pub fn seed_length(input_len: usize, out_len: usize) -> usize {
    assert!(out_len >= 1, "output length must be positive");
    input_len + out_len - 1
}

fn check_lengths(r: &Bits, seed: &ToeplitzSeed, out_len: usize) -> Result<(), CoreError> {
    if out_len == 0 {
        return Err(CoreError::Params("output length must be positive".into()));
    }
    if seed.len() != seed_length(r.len(), out_len) {
        return Err(CoreError::Params(format!(
            "seed has {} bits, want {} for {} -> {}",
            seed.len(),
            seed_length(r.len(), out_len),
            r.len(),
            out_len
        )));
    }
    Ok(())
}

/// Word-parallel hash: output bit `i` is the parity of the reversed
/// input ANDed with the seed window starting at `i` (the Toeplitz row
/// read backwards is a sliding slice of the seed).
pub fn extract(r: &Bits, seed: &ToeplitzSeed, out_len: usize) -> Result<Bits, CoreError> {
    check_lengths(r, seed, out_len)?;
    let n = r.len();
    let rev = r.reversed();
    let words = n.div_ceil(64);
    let out = Bits::from_fn(out_len, |i| {
        let mut acc = 0u64;
        for w in 0..words {
            let mut window = seed.bits.word_at_bit(i + 64 * w);
            if 64 * (w + 1) > n {
                window &= (1u64 << (n - 64 * w)) - 1;
            }
            acc ^= rev.word_at_bit(64 * w) & window;
        }
        acc.count_ones() % 2 == 1
    });
    Ok(out)
}

/// Direct matrix-vector oracle; the fast path must match it bit for bit.
pub fn extract_naive(r: &Bits, seed: &ToeplitzSeed, out_len: usize) -> Result<Bits, CoreError> {
    check_lengths(r, seed, out_len)?;
    let n = r.len();
    let out = Bits::from_fn(out_len, |i| {
        let mut acc = false;
        for j in 0..n {
            acc ^= r.get(j) && seed.bits.get((i + n - 1) - j);
        }
        acc
    });
    Ok(out)
}

/// Final protocol output `K = Z || S`: hashed bits first, then the seed.
pub fn finalize_output(z: &Bits, seed: &ToeplitzSeed) -> Bits {
    z.concat(seed.bits())
}

/// Splits `K` back into `(Z, S)` given the hash length.
pub fn split_output(k: &Bits, ell: usize) -> (Bits, ToeplitzSeed) {
    let (z, s) = k.split_at(ell);
    (z, ToeplitzSeed::new(s))
}

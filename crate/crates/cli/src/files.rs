//! On-disk artifact formats and atomic writes.
//!
//! Binary layouts are described in `docs/formats.md`. Both bit-string
//! containers share the same shape: an 8-byte magic, little-endian u64
//! length fields, then the bits packed 8 per byte, least significant bit
//! first, zero padding in the final byte.

use qrx_core::bits::Bits;
use qrx_core::extract::ToeplitzSeed;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

use crate::CliError;

pub const RAW_MAGIC: &[u8; 8] = b"QRXRAW1\0";
pub const KEY_MAGIC: &[u8; 8] = b"QRXKEY1\0";

/// Writes via a temporary file in the destination directory followed by a
/// rename, so readers never observe a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_bits(magic: &[u8; 8], lengths: &[u64], bits: &Bits) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * lengths.len() + bits.len().div_ceil(8));
    out.extend_from_slice(magic);
    for &len in lengths {
        out.extend_from_slice(&len.to_le_bytes());
    }
    out.extend_from_slice(&bits.to_bytes());
    out
}

fn decode_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    length_fields: usize,
    what: &str,
) -> Result<(Vec<u64>, &'a [u8]), CliError> {
    let header = 8 + 8 * length_fields;
    if bytes.len() < header {
        return Err(CliError::Config(format!("{what}: truncated header")));
    }
    if &bytes[..8] != magic {
        return Err(CliError::Config(format!("{what}: bad magic")));
    }
    let lengths = (0..length_fields)
        .map(|i| {
            let at = 8 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
        })
        .collect();
    Ok((lengths, &bytes[header..]))
}

/// Serializes a raw transcript bit string.
pub fn encode_raw(bits: &Bits) -> Vec<u8> {
    encode_bits(RAW_MAGIC, &[bits.len() as u64], bits)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Bits, CliError> {
    let (lengths, payload) = decode_header(bytes, RAW_MAGIC, 1, "raw transcript")?;
    let len = lengths[0] as usize;
    Ok(Bits::from_bytes(payload, len)?)
}

/// Serializes the final output `K = Z || S`: the extracted bits followed
/// by the Toeplitz seed that produced them.
pub fn encode_key(z: &Bits, seed: &ToeplitzSeed) -> Vec<u8> {
    let k = z.concat(seed.bits());
    encode_bits(KEY_MAGIC, &[z.len() as u64, seed.len() as u64], &k)
}

pub fn decode_key(bytes: &[u8]) -> Result<(Bits, ToeplitzSeed), CliError> {
    let (lengths, payload) = decode_header(bytes, KEY_MAGIC, 2, "output key")?;
    let (ell, seed_len) = (lengths[0] as usize, lengths[1] as usize);
    let k = Bits::from_bytes(payload, ell + seed_len)?;
    let (z, s) = k.split_at(ell);
    Ok((z, ToeplitzSeed::new(s)))
}

/// One CSV artifact: header row plus data rows, '.' decimal, UTF-8.
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { text: format!("{}\n", header.join(",")), columns: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "row width must match the header");
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// Shortest decimal form that round-trips; keeps CSV output exact without
/// committing to a fixed precision.
pub fn fmt_f64(value: f64) -> String {
    format!("{value}")
}

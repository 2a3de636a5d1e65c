//! Checksummed binary container shared by dataset and checkpoint files.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
//! little-endian payload, and a SHA-256 digest of everything before it.

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;

pub fn encode(magic: &[u8; 8], version: u32, header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Verifies magic, version and checksum; returns the header and payload.
pub fn decode<'a, H: DeserializeOwned>(magic: &[u8; 8], version: u32, bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 20 + DIGEST_LEN {
        return Err(Error::Format("file truncated".into()));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Version { found, expected: version });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let header = serde_json::from_slice(&body[20..header_end])?;
    Ok((header, &body[header_end..]))
}

/// Little-endian reader over a payload.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("payload truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
    }

    pub fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        Ok(self.take(n * 2)?.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2"))).collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing payload bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

pub fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

pub fn put_u16s(out: &mut Vec<u8>, v: &[u16]) {
    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

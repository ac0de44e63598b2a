//! Shared binary-file plumbing: atomic writes, payload checksums and a
//! bounds-checked little-endian reader.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use sha2::{Digest, Sha256};

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`. Readers never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// First eight bytes of the SHA-256 digest, read little-endian.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    LittleEndian::read_u64(&digest[..8])
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reader over an in-memory buffer that reports truncation instead of
/// panicking.
#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

/// Raised when a read runs past the end of the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncated;

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        let end = self.pos.checked_add(n).ok_or(Truncated)?;
        if end > self.buf.len() {
            return Err(Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, Truncated> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    pub fn f32(&mut self) -> Result<f32, Truncated> {
        Ok(LittleEndian::read_f32(self.take(4)?))
    }

    pub fn f64(&mut self) -> Result<f64, Truncated> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, Truncated> {
        let bytes = self.take(n.checked_mul(4).ok_or(Truncated)?)?;
        let mut out = vec![0.0f32; n];
        LittleEndian::read_f32_into(bytes, &mut out);
        Ok(out)
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, Truncated> {
        let bytes = self.take(n.checked_mul(8).ok_or(Truncated)?)?;
        let mut out = vec![0.0f64; n];
        LittleEndian::read_f64_into(bytes, &mut out);
        Ok(out)
    }

    pub fn u64_vec(&mut self, n: usize) -> Result<Vec<u64>, Truncated> {
        let bytes = self.take(n.checked_mul(8).ok_or(Truncated)?)?;
        let mut out = vec![0u64; n];
        LittleEndian::read_u64_into(bytes, &mut out);
        Ok(out)
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn string(&mut self) -> Result<String, Truncated> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Truncated)
    }
}

/// Little-endian append helpers for building file images in memory.
pub trait PutLe {
    fn put_u8(&mut self, v: u8);
    fn put_u32(&mut self, v: u32);
    fn put_u64(&mut self, v: u64);
    fn put_f32(&mut self, v: f32);
    fn put_f64(&mut self, v: f64);
    fn put_f32s(&mut self, v: &[f32]);
    fn put_f64s(&mut self, v: &[f64]);
    fn put_str(&mut self, s: &str);
}

impl PutLe for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }
    fn put_u32(&mut self, v: u32) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_u64(&mut self, v: u64) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_f32(&mut self, v: f32) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_f64(&mut self, v: f64) {
        self.extend_from_slice(&v.to_le_bytes());
    }
    fn put_f32s(&mut self, v: &[f32]) {
        self.reserve(v.len() * 4);
        for x in v {
            self.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn put_f64s(&mut self, v: &[f64]) {
        self.reserve(v.len() * 8);
        for x in v {
            self.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.extend_from_slice(s.as_bytes());
    }
}

//! Versioned name-indexed tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SRCP" | u32 version | u32 entry count
//! per entry: u32 name length | name bytes (UTF-8) | u32 rank | u64 dims[rank] | f64 payload[prod(dims)]
//! u32 crc32 of everything before
//! ```
//!
//! Values are always stored as `f64`; loading into `f32` narrows.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use super::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCP";
pub const CHECKPOINT_VERSION: u32 = 2;

/// Ordered map from parameter name to tensor.
pub type Checkpoint<T> = BTreeMap<String, Tensor<T>>;

struct Hashed<S> {
    inner: S,
    crc: crc32fast::Hasher,
}

impl<S> Hashed<S> {
    fn new(inner: S) -> Self {
        Self {
            inner,
            crc: crc32fast::Hasher::new(),
        }
    }
}

impl<W: Write> Write for Hashed<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

impl<R: Read> Read for Hashed<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(out: &mut W, entries: &Checkpoint<T>) -> io::Result<()> {
    let mut h = Hashed::new(&mut *out);
    write_entries(&mut h, entries)?;
    let crc = h.crc.finalize();
    out.write_all(&crc.to_le_bytes())
}

fn write_entries<T: Scalar, W: Write>(out: &mut W, entries: &Checkpoint<T>) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: &mut R) -> io::Result<Checkpoint<T>> {
    let mut h = Hashed::new(&mut *input);
    let out = read_entries(&mut h)?;
    let actual = h.crc.finalize();
    let stored = read_u32(input)?;
    if stored != actual {
        return Err(invalid(format!("checkpoint crc mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    Ok(out)
}

fn read_entries<T: Scalar, R: Read>(input: &mut R) -> io::Result<Checkpoint<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = read_u32(input)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        if len > 1 << 16 {
            return Err(invalid(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| invalid(e.to_string()))?;
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > 8 {
            return Err(invalid(format!("tensor `{name}` has unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(invalid(format!("tensor `{name}` too large")));
        }
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut b)?;
            data.push(T::lit(f64::from_le_bytes(b)));
        }
        let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        out.insert(name, t);
    }
    Ok(out)
}

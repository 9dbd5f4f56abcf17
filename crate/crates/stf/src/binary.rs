//! `TNSR` tensors and `SKEL` skeleton sequences. Both are little-endian.
//!
//! `TNSR`: magic `TNSR`, u32 rank, rank × u64 extents, f64 payload.
//! `SKEL`: magic `SKEL`, u32 version (1), u32 C, u32 T, u32 V, u32 label,
//! f32 payload in `C×T×V` row-major order.

use std::io::Write;
use std::path::Path;

use stf_core::data::SkeletonSequence;
use stf_core::Tensor;

use crate::error::{CliError, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const SKEL_MAGIC: &[u8; 4] = b"SKEL";
pub const SKEL_VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

/// Byte cursor that reports offsets in its errors.
pub struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            pos: 0,
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn fail(&self, msg: impl std::fmt::Display) -> CliError {
        CliError::format(self.path, format!("at byte {}: {msg}", self.pos))
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(format_args!(
                "truncated {what}: expected {n} bytes, found {}",
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos -= 4;
            return Err(self.fail(format_args!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.fail(format_args!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

pub fn encode_tensor(t: &Tensor<f64>, out: &mut Vec<u8>) {
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_tensor(r: &mut Reader<'_>) -> Result<Tensor<f64>> {
    r.magic(TNSR_MAGIC)?;
    let rank = r.u32("rank")?;
    if rank == 0 || rank > MAX_RANK {
        return Err(r.fail(format_args!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let e = r.u64("extent")?;
        let e = usize::try_from(e)
            .ok()
            .filter(|&e| e > 0)
            .ok_or_else(|| r.fail(format_args!("invalid extent {e}")))?;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| r.fail("extent product overflows"))?;
        shape.push(e);
    }
    let bytes = numel
        .checked_mul(8)
        .ok_or_else(|| r.fail("payload size overflows"))?;
    if r.remaining() < bytes {
        return Err(r.fail(format_args!(
            "truncated payload for shape {shape:?}: expected {bytes} bytes, found {}",
            r.remaining()
        )));
    }
    let data = r
        .take(bytes, "payload")?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| r.fail(e))
}

pub fn save_tensor(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.numel());
    encode_tensor(t, &mut buf);
    write_file(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f64>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    let t = decode_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn encode_sequence(seq: &SkeletonSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * seq.coords.numel());
    out.extend_from_slice(SKEL_MAGIC);
    for v in [
        SKEL_VERSION,
        seq.channels() as u32,
        seq.frames() as u32,
        seq.joints() as u32,
        seq.label as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in seq.coords.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `SKEL` file. With `joints`, a different V is a layout mismatch.
pub fn decode_sequence(
    path: &Path,
    bytes: &[u8],
    joints: Option<usize>,
) -> Result<SkeletonSequence> {
    let mut r = Reader::new(path, bytes);
    r.magic(SKEL_MAGIC)?;
    let version = r.u32("version")?;
    if version != SKEL_VERSION {
        return Err(r.fail(format_args!("unsupported SKEL version {version}")));
    }
    let c = r.u32("channel count")? as usize;
    let t = r.u32("frame count")? as usize;
    let v = r.u32("joint count")? as usize;
    let label = r.u32("label")? as usize;
    if !(2..=4).contains(&c) || t == 0 || v == 0 {
        return Err(r.fail(format_args!("invalid extents C={c} T={t} V={v}")));
    }
    if let Some(expected) = joints {
        if v != expected {
            return Err(r.fail(format_args!(
                "layout mismatch: file has V={v}, layout has {expected} joints"
            )));
        }
    }
    let bytes = c * t * v * 4;
    if r.remaining() != bytes {
        return Err(r.fail(format_args!(
            "payload for C={c} T={t} V={v} needs {bytes} bytes, found {}",
            r.remaining()
        )));
    }
    let start = r.offset();
    let mut data = Vec::with_capacity(c * t * v);
    for (i, chunk) in r.take(bytes, "payload")?.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(CliError::format(
                path,
                format!("at byte {}: non-finite coordinate {x}", start + 4 * i),
            ));
        }
        data.push(x);
    }
    let coords = Tensor::from_vec(&[c, t, v], data)?;
    Ok(SkeletonSequence::new(coords, label)?)
}

pub fn save_sequence(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    write_file(path, &encode_sequence(seq))
}

pub fn load_sequence(path: &Path, joints: Option<usize>) -> Result<SkeletonSequence> {
    decode_sequence(path, &read_file(path)?, joints)
}

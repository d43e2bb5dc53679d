//! `model.bin`: flat little-endian parameter dump.
//!
//! Layout: the 8-byte magic `AFLTSEG1`, a `u32` format version (1), a `u32`
//! tensor count, then per tensor a `u32` rank followed by `rank` `u32`
//! extents, and finally every parameter as `f64` in tensor order. All
//! integers and floats are little-endian. Momentum buffers are not stored.

use crate::error::{data_err, LabError, Result};
use afl_core::model::{PARAM_COUNT, TENSOR_SHAPES};
use afl_core::TinySeg3D;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"AFLTSEG1";
pub const VERSION: u32 = 1;

pub fn encode(model: &TinySeg3D) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 64 + PARAM_COUNT * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(TENSOR_SHAPES.len() as u32).to_le_bytes());
    for shape in TENSOR_SHAPES {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Some(head)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<TinySeg3D, String> {
    let mut r = Reader { buf: bytes };
    let short = || "truncated model file".to_string();
    if r.take(8).ok_or_else(short)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or_else(short)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32().ok_or_else(short)? as usize;
    if count != TENSOR_SHAPES.len() {
        return Err(format!("expected {} tensors, found {count}", TENSOR_SHAPES.len()));
    }
    for (t, expected) in TENSOR_SHAPES.iter().enumerate() {
        let rank = r.u32().ok_or_else(short)? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(short)?;
        if shape != *expected {
            return Err(format!("tensor {t} has shape {shape:?}, expected {expected:?}"));
        }
    }
    if r.buf.len() != PARAM_COUNT * 8 {
        return Err(format!("expected {} parameter bytes, found {}", PARAM_COUNT * 8, r.buf.len()));
    }
    let params = r.buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    TinySeg3D::from_params(params).map_err(|e| e.to_string())
}

pub fn save(model: &TinySeg3D, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path) -> Result<TinySeg3D> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes).map_err(|e| data_err(path, e))
}

//! Two-file volume format.
//!
//! `<name>.vol.json` holds the header `{"dims": [nz, ny, nx], "kind":
//! "image" | "mask", "dtype": "f64" | "u8", "byte_order": "little"}`; extra
//! header fields are ignored. `<name>.vol.raw` holds exactly `nz * ny * nx`
//! little-endian elements of `dtype`, z-major. Images are always `f64`,
//! masks always `u8`.

use crate::error::{data_err, LabError, Result};
use afl_core::{Dims, MaskVolume, Volume3D};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const HEADER_EXT: &str = ".vol.json";
const RAW_EXT: &str = ".vol.raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrder {
    Little,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub kind: VolumeKind,
    pub dtype: Dtype,
    pub byte_order: ByteOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Image(Volume3D),
    Mask(MaskVolume),
}

impl AnyVolume {
    pub fn dims(&self) -> Dims {
        match self {
            Self::Image(v) => v.dims(),
            Self::Mask(m) => m.dims(),
        }
    }
}

/// Strips a `.vol.json` or `.vol.raw` suffix, if present.
pub fn base_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for ext in [HEADER_EXT, RAW_EXT] {
        if let Some(stem) = s.strip_suffix(ext) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

pub fn header_path(path: &Path) -> PathBuf {
    with_suffix(&base_path(path), HEADER_EXT)
}

pub fn raw_path(path: &Path) -> PathBuf {
    with_suffix(&base_path(path), RAW_EXT)
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let hp = header_path(path);
    let rp = raw_path(path);
    if let Some(dir) = hp.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&hp, text + "\n").map_err(|e| LabError::io(&hp, e))?;
    fs::write(&rp, payload).map_err(|e| LabError::io(&rp, e))
}

pub fn write_image(v: &Volume3D, path: &Path) -> Result<()> {
    let header = Header { dims: v.dims().as_array(), kind: VolumeKind::Image, dtype: Dtype::F64, byte_order: ByteOrder::Little };
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, &header, &payload)
}

pub fn write_mask(m: &MaskVolume, path: &Path) -> Result<()> {
    let header = Header { dims: m.dims().as_array(), kind: VolumeKind::Mask, dtype: Dtype::U8, byte_order: ByteOrder::Little };
    write_pair(path, &header, m.data())
}

pub fn write_volume(v: &AnyVolume, path: &Path) -> Result<()> {
    match v {
        AnyVolume::Image(v) => write_image(v, path),
        AnyVolume::Mask(m) => write_mask(m, path),
    }
}

pub fn read_header(path: &Path) -> Result<Header> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| LabError::io(&hp, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| data_err(&hp, e))?;
    match (header.kind, header.dtype) {
        (VolumeKind::Image, Dtype::F64) | (VolumeKind::Mask, Dtype::U8) => Ok(header),
        (kind, dtype) => Err(data_err(&hp, format!("kind {kind:?} cannot use dtype {dtype:?}"))),
    }
}

/// Reads the volume named by `path` (base name, header or raw file).
pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    let header = read_header(path)?;
    let [nz, ny, nx] = header.dims;
    let dims = Dims::new(nz, ny, nx);
    if dims.is_empty() {
        return Err(data_err(&header_path(path), format!("dims {dims} must be positive")));
    }
    let rp = raw_path(path);
    let bytes = fs::read(&rp).map_err(|e| LabError::io(&rp, e))?;
    let width = match header.dtype {
        Dtype::F64 => 8,
        Dtype::U8 => 1,
    };
    if bytes.len() != dims.len() * width {
        return Err(data_err(
            &rp,
            format!("expected {} bytes for dims {dims}, found {}", dims.len() * width, bytes.len()),
        ));
    }
    let vol = match header.kind {
        VolumeKind::Image => {
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            AnyVolume::Image(Volume3D::new(dims, data).map_err(|e| data_err(&rp, e))?)
        }
        VolumeKind::Mask => AnyVolume::Mask(MaskVolume::new(dims, bytes).map_err(|e| data_err(&rp, e))?),
    };
    Ok(vol)
}

/// Reads an image; a mask file is accepted and converted to 0.0/1.0.
pub fn read_image(path: &Path) -> Result<Volume3D> {
    match read_volume(path)? {
        AnyVolume::Image(v) => Ok(v),
        AnyVolume::Mask(m) => Ok(m.to_volume()),
    }
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    match read_volume(path)? {
        AnyVolume::Mask(m) => Ok(m),
        AnyVolume::Image(_) => Err(data_err(&header_path(path), "expected a mask volume, found an image")),
    }
}

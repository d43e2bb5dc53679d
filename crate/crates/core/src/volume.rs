//! Dense 3D volumes.
//!
//! Both volume types store their elements in a flat buffer, z-major then y
//! then x: element `(z, y, x)` lives at `z * ny * nx + y * nx + x`. Volumes
//! are immutable once built; every operation returns a new value.

use crate::error::{Error, Result};
use alloc::vec::Vec;
use core::fmt;

/// Extent of a volume as `(nz, ny, nx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Dims {
    pub const fn new(nz: usize, ny: usize, nx: usize) -> Self {
        Self { nz, ny, nx }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        (z, y, x)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    pub const fn min_extent(&self) -> usize {
        let m = if self.nz < self.ny { self.nz } else { self.ny };
        if m < self.nx {
            m
        } else {
            self.nx
        }
    }

    fn check_positive(self) -> Result<Self> {
        if self.is_empty() {
            Err(Error::InvalidDims(self))
        } else {
            Ok(self)
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.nz, self.ny, self.nx)
    }
}

/// Dense scalar field of finite `f64` values (intensities or probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    data: Vec<f64>,
}

impl Volume3D {
    /// Builds a volume, rejecting a length mismatch or any non-finite value.
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        let dims = dims.check_positive()?;
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch { dims, len: data.len(), expected: dims.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, alloc::vec![value; dims.len()])
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    /// Builds a volume from a function of `(z, y, x)`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Binary label field; every element is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVolume {
    dims: Dims,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        let dims = dims.check_positive()?;
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch { dims, len: data.len(), expected: dims.len() });
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinary { index: i, value: data[i] });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, alloc::vec![0; dims.len()])
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(z, y, x) as u8);
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims.index(z, y, x)]
    }

    /// The mask as a 0/1-valued scalar field.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D { dims: self.dims, data: self.data.iter().map(|&v| f64::from(v)).collect() }
    }

    /// Complement mask (`1 - m`).
    pub fn inverted(&self) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| 1 - v).collect() }
    }
}

pub(crate) fn ensure_same_dims(left: Dims, right: Dims) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::DimMismatch { left, right })
    }
}

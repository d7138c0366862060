//! Volumes, 2D slices and the VVOL container.
//!
//! VVOL layout (all little-endian):
//!
//! | bytes | content                         |
//! | ----- | ------------------------------- |
//! | 8     | magic `VVOL0001`                |
//! | 12    | `u32` depth, height, width      |
//! | 24    | `f64` spacing z, y, x (mm)      |
//! | 4·N   | `f32` voxels, row-major z, y, x |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VVOL_MAGIC: &[u8; 8] = b"VVOL0001";
const HEADER_LEN: usize = 8 + 3 * 4 + 3 * 8;

/// A dense 3D grid of intensities with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::Shape(format!(
                "{} voxels for dims {dims:?} (expected {n})",
                voxels.len()
            )));
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        Self::new(dims, [1.0; 3], vec![value; dims.iter().product()])
    }

    /// `(depth, height, width)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    /// Applies `f` to every voxel. Non-finite results are rejected.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.voxels.iter().map(|&v| f(v)).collect())
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("bad spacing {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.voxels.len());
        out.extend_from_slice(VVOL_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != VVOL_MAGIC {
            return Err(Error::BadMagic {
                what: "VVOL volume",
                expected: "VVOL0001",
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                what: "VVOL header",
                expected: HEADER_LEN - 8,
                found: bytes.len() - 8,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let dims = [u32_at(8), u32_at(12), u32_at(16)];
        let spacing = [f64_at(20), f64_at(28), f64_at(36)];
        let n = dims.iter().product::<usize>();
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(Error::Truncated {
                what: "VVOL payload",
                expected: 4 * n,
                found: payload.len(),
            });
        }
        let voxels = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dims, spacing, voxels)
    }
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, v.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume3D::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

/// A 2D intensity grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Image2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} pixels for a {rows}x{cols} image",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Slices perpendicular to `axis`, in increasing order along it. The two
/// remaining axes keep their relative order (z before y before x).
pub fn extract_slices(v: &Volume3D, axis: Axis) -> Vec<Image2D> {
    let [d, h, w] = v.dims;
    match axis {
        Axis::Z => v
            .voxels
            .chunks_exact(h * w)
            .map(|c| Image2D { rows: h, cols: w, data: c.to_vec() })
            .collect(),
        Axis::Y => (0..h)
            .map(|y| {
                let data = (0..d)
                    .flat_map(|z| (0..w).map(move |x| (z, x)))
                    .map(|(z, x)| v.get(z, y, x))
                    .collect();
                Image2D { rows: d, cols: w, data }
            })
            .collect(),
        Axis::X => (0..w)
            .map(|x| {
                let data = (0..d)
                    .flat_map(|z| (0..h).map(move |y| (z, y)))
                    .map(|(z, y)| v.get(z, y, x))
                    .collect();
                Image2D { rows: d, cols: h, data }
            })
            .collect(),
    }
}

/// Inverse of [`extract_slices`].
pub fn assemble_slices(slices: &[Image2D], axis: Axis, spacing: [f64; 3]) -> Result<Volume3D> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Shape("no slices to assemble".into()))?;
    if slices.iter().any(|s| s.rows != first.rows || s.cols != first.cols) {
        return Err(Error::Shape("slices differ in shape".into()));
    }
    let n = slices.len();
    let dims = match axis {
        Axis::Z => [n, first.rows, first.cols],
        Axis::Y => [first.rows, n, first.cols],
        Axis::X => [first.rows, first.cols, n],
    };
    let [d, h, w] = dims;
    let mut voxels = vec![0.0f32; d * h * w];
    for (k, s) in slices.iter().enumerate() {
        for r in 0..s.rows {
            for c in 0..s.cols {
                let (z, y, x) = match axis.index() {
                    0 => (k, r, c),
                    1 => (r, k, c),
                    _ => (r, c, k),
                };
                voxels[(z * h + y) * w + x] = s.get(r, c);
            }
        }
    }
    Volume3D::new(dims, spacing, voxels)
}

/// Axis-aligned maximum-intensity projection along `axis`.
pub fn max_projection(v: &Volume3D, axis: Axis) -> Image2D {
    let slices = extract_slices(v, axis);
    let mut out = slices[0].clone();
    for s in &slices[1..] {
        for (o, &x) in out.data.iter_mut().zip(&s.data) {
            *o = o.max(x);
        }
    }
    out
}

/// 8-bit binary PGM (P5), intensities mapped linearly from `[lo, hi]`.
pub fn image_to_pgm(img: &Image2D, lo: f32, hi: f32) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols, img.rows).into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(
        img.data
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

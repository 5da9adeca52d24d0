//! Parallel-beam projections of normalized volumes.
//!
//! View convention: volume axes are `(z, y, x)` = (cranio-caudal,
//! antero-posterior, left-right). The frontal view integrates along y and
//! yields a `(z, x)` image; the lateral view integrates along x and yields a
//! `(z, y)` image. Integration is the mean along the ray so projections keep
//! the `[0, 1]` range of the volume.

use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::volume::NormalizedVolume;

pub const BXR_MAGIC: [u8; 4] = *b"BXR1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

/// Row-major 2D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Image2 {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Mean of the voxels along `axis`. The remaining two axes keep their
/// `(z, y, x)` order.
pub fn project_orthogonal(vol: &NormalizedVolume, axis: Axis) -> Image2 {
    let [dz, dy, dx] = vol.dims;
    let (rows, cols) = match axis {
        Axis::Z => (dy, dx),
        Axis::Y => (dz, dx),
        Axis::X => (dz, dy),
    };
    let depth = vol.dims[axis.index()];
    let mut acc = vec![0.0f64; rows * cols];
    for z in 0..dz {
        for y in 0..dy {
            let row = &vol.values[(z * dy + y) * dx..(z * dy + y + 1) * dx];
            match axis {
                Axis::Z => acc[y * dx..(y + 1) * dx]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, &v)| *a += v as f64),
                Axis::Y => acc[z * dx..(z + 1) * dx]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, &v)| *a += v as f64),
                Axis::X => acc[z * dy + y] += row.iter().map(|&v| v as f64).sum::<f64>(),
            }
        }
    }
    let inv = 1.0 / depth as f64;
    Image2 {
        rows,
        cols,
        data: acc.into_iter().map(|s| (s * inv) as f32).collect(),
    }
}

/// Biplanar radiograph pair. Frontal is `[z, x]`, lateral is `[z, y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct XrayPair {
    /// `(dz, dy, dx)` of the source volume.
    pub dims: [usize; 3],
    pub frontal: Image2,
    pub lateral: Image2,
}

impl XrayPair {
    pub fn new(dims: [usize; 3], frontal: Image2, lateral: Image2) -> Result<Self> {
        let [dz, dy, dx] = dims;
        if (frontal.rows, frontal.cols) != (dz, dx) || (lateral.rows, lateral.cols) != (dz, dy) {
            return Err(Error::shape(
                "xray_pair",
                format!(
                    "frontal {}x{} / lateral {}x{} do not fit volume {dims:?}",
                    frontal.rows, frontal.cols, lateral.rows, lateral.cols
                ),
            ));
        }
        if frontal.data.len() != dz * dx || lateral.data.len() != dz * dy {
            return Err(Error::shape("xray_pair", "image buffers do not match their extents"));
        }
        Ok(XrayPair { dims, frontal, lateral })
    }
}

pub fn synthesize_biplanar(vol: &NormalizedVolume) -> XrayPair {
    XrayPair {
        dims: vol.dims,
        frontal: project_orthogonal(vol, Axis::Y),
        lateral: project_orthogonal(vol, Axis::X),
    }
}

/// Axial `(y, x)`, coronal `(z, x)` and sagittal `(z, y)` mean projections.
pub fn projection_triplet(vol: &NormalizedVolume) -> [Image2; 3] {
    [
        project_orthogonal(vol, Axis::Z),
        project_orthogonal(vol, Axis::Y),
        project_orthogonal(vol, Axis::X),
    ]
}

/// Layout: magic `BXR1`, `u32 x 3` source dims `(dz, dy, dx)`, the frontal
/// plane (`dz*dx` f32), then the lateral plane (`dz*dy` f32), little-endian.
pub fn write_pair(pair: &XrayPair, path: &Path) -> Result<()> {
    write_file(path, &encode_pair(pair))
}

pub(crate) fn encode_pair(pair: &XrayPair) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&BXR_MAGIC);
    for d in pair.dims {
        w.u32(d as u32);
    }
    w.f32s(&pair.frontal.data);
    w.f32s(&pair.lateral.data);
    w.buf
}

pub fn read_pair(path: &Path) -> Result<XrayPair> {
    decode_pair(path, &read_file(path)?)
}

pub(crate) fn decode_pair(path: &Path, bytes: &[u8]) -> Result<XrayPair> {
    let mut r = Reader::new(path, bytes);
    r.magic(&BXR_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let [dz, dy, dx] = dims;
    let frontal = Image2 {
        rows: dz,
        cols: dx,
        data: r.f32s(dz * dx)?,
    };
    let lateral = Image2 {
        rows: dz,
        cols: dy,
        data: r.f32s(dz * dy)?,
    };
    r.finish()?;
    XrayPair::new(dims, frontal, lateral)
}

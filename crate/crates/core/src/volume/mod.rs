//! CT volumes, the preprocessing chain, and the `.ctv` file format.
//!
//! Volumes are stored z-major: voxel `(z, y, x)` lives at `(z * dy + y) * dx + x`,
//! with z cranio-caudal, y antero-posterior and x left-right.

mod io;
mod phantom;

pub use io::{read_volume, write_volume, CTV_MAGIC};
pub use phantom::{generate_phantom, PhantomSpec};

use crate::error::{Error, Result};

/// Lower bound of the HU clip span (air).
pub const HU_MIN: f32 = -1000.0;
/// Upper bound of the HU clip span.
pub const HU_MAX: f32 = 4096.0;
/// Fill value used when padding under-sized volumes.
pub const PAD_HU: f32 = -1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    /// `(dz, dy, dx)` voxel counts.
    pub dims: [usize; 3],
    /// `(sz, sy, sx)` in millimetres.
    pub spacing: [f32; 3],
    pub values: Vec<f32>,
}

impl CtVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "volume",
                format!("{} values for dims {dims:?}", values.len()),
            ));
        }
        Ok(CtVolume { dims, spacing, values })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Self {
        CtVolume {
            dims,
            spacing,
            values: vec![value; dims.iter().product()],
        }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }
}

/// A volume mapped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub values: Vec<f32>,
}

impl NormalizedVolume {
    /// Checks the `[0, 1]` range.
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("volume", format!("{} values for dims {dims:?}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("normalized voxel {v} outside [0, 1]")));
        }
        Ok(NormalizedVolume { dims, spacing, values })
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(z, y, x)]
    }

    /// Stores the values in a `.ctv` container (spacing kept, values unchanged).
    pub fn to_ct(&self) -> CtVolume {
        CtVolume {
            dims: self.dims,
            spacing: self.spacing,
            values: self.values.clone(),
        }
    }
}

/// Which interpolation weights to use along one axis.
fn axis_samples(n_old: usize, old_sp: f32, n_new: usize, target: f32) -> Vec<(usize, usize, f64)> {
    (0..n_new)
        .map(|i| {
            // align voxel centres: physical centre (i + 0.5) * target
            let c = (i as f64 + 0.5) * target as f64 / old_sp as f64 - 0.5;
            let c = c.clamp(0.0, (n_old - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(n_old - 1);
            (lo, hi, c - lo as f64)
        })
        .collect()
}

/// Trilinear resampling to isotropic `target` mm spacing.
///
/// New extents are `round(old * spacing / target)` (at least 1). Sample
/// positions map voxel centres onto the old grid and clamp at the borders.
pub fn resample_isotropic(vol: &CtVolume, target: f32) -> Result<CtVolume> {
    if !(target > 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target}")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((vol.dims[a] as f64 * vol.spacing[a] as f64 / target as f64).round() as usize).max(1);
        if vol.dims[a] == 1 && vol.spacing[a] != target {
            log::warn!("resample: axis {a} has a single voxel, falling back to nearest sampling");
        }
    }
    if dims == vol.dims && vol.spacing == [target; 3] {
        return Ok(vol.clone());
    }
    let zs = axis_samples(vol.dims[0], vol.spacing[0], dims[0], target);
    let ys = axis_samples(vol.dims[1], vol.spacing[1], dims[1], target);
    let xs = axis_samples(vol.dims[2], vol.spacing[2], dims[2], target);
    let mut values = Vec::with_capacity(dims.iter().product());
    for &(z0, z1, tz) in &zs {
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let v = |z, y, x| vol.get(z, y, x) as f64;
                let c00 = v(z0, y0, x0) * (1.0 - tx) + v(z0, y0, x1) * tx;
                let c01 = v(z0, y1, x0) * (1.0 - tx) + v(z0, y1, x1) * tx;
                let c10 = v(z1, y0, x0) * (1.0 - tx) + v(z1, y0, x1) * tx;
                let c11 = v(z1, y1, x0) * (1.0 - tx) + v(z1, y1, x1) * tx;
                let c0 = c00 * (1.0 - ty) + c01 * ty;
                let c1 = c10 * (1.0 - ty) + c11 * ty;
                values.push((c0 * (1.0 - tz) + c1 * tz) as f32);
            }
        }
    }
    Ok(CtVolume {
        dims,
        spacing: [target; 3],
        values,
    })
}

/// Centre crop (or pad with air) to `size` voxels per axis. When the
/// difference is odd the extra voxel is cut from, or added to, the high side.
pub fn center_crop_pad(vol: &CtVolume, size: usize) -> Result<CtVolume> {
    if size == 0 {
        return Err(Error::InvalidArgument("crop size must be >= 1".into()));
    }
    if vol.dims == [size; 3] {
        return Ok(vol.clone());
    }
    // source index = output index + offset
    let offset: Vec<isize> = vol
        .dims
        .iter()
        .map(|&n| {
            if n >= size {
                ((n - size) / 2) as isize
            } else {
                -(((size - n) / 2) as isize)
            }
        })
        .collect();
    let src = |o: usize, a: usize| -> Option<usize> {
        let s = o as isize + offset[a];
        (s >= 0 && (s as usize) < vol.dims[a]).then_some(s as usize)
    };
    let mut values = Vec::with_capacity(size * size * size);
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                values.push(match (src(z, 0), src(y, 1), src(x, 2)) {
                    (Some(sz), Some(sy), Some(sx)) => vol.get(sz, sy, sx),
                    _ => PAD_HU,
                });
            }
        }
    }
    Ok(CtVolume {
        dims: [size; 3],
        spacing: vol.spacing,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// `(clamp(v) - lo) / (hi - lo)` with the clip bounds as the span.
    FixedSpan,
    /// Clamp, then scale by the volume's own min and max.
    PerVolume,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_span" => Ok(Normalization::FixedSpan),
            "per_volume" => Ok(Normalization::PerVolume),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::FixedSpan => "fixed_span",
            Normalization::PerVolume => "per_volume",
        })
    }
}

pub fn clip_normalize(vol: &CtVolume, lo: f32, hi: f32) -> Result<NormalizedVolume> {
    normalize_with(vol, lo, hi, Normalization::FixedSpan)
}

pub fn normalize_with(vol: &CtVolume, lo: f32, hi: f32, mode: Normalization) -> Result<NormalizedVolume> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("clip bounds must satisfy lo < hi, got [{lo}, {hi}]")));
    }
    let (a, b) = match mode {
        Normalization::FixedSpan => (lo as f64, hi as f64),
        Normalization::PerVolume => {
            let (mn, mx) = vol
                .values
                .iter()
                .map(|v| v.clamp(lo, hi))
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(m, n), v| (m.min(v), n.max(v)));
            (mn as f64, mx as f64)
        }
    };
    let span = b - a;
    let values = vol
        .values
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                return 0.0;
            }
            (((v.clamp(lo, hi) as f64) - a) / span).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(NormalizedVolume {
        dims: vol.dims,
        spacing: vol.spacing,
        values,
    })
}

/// Inverse of the fixed-span normalization.
pub fn denormalize(vol: &NormalizedVolume, lo: f32, hi: f32) -> CtVolume {
    let span = hi as f64 - lo as f64;
    CtVolume {
        dims: vol.dims,
        spacing: vol.spacing,
        values: vol.values.iter().map(|&v| (lo as f64 + v as f64 * span) as f32).collect(),
    }
}

/// The full resample, crop, clip and normalize chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub spacing_mm: f32,
    pub size: usize,
    pub lo: f32,
    pub hi: f32,
    pub normalization: Normalization,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            spacing_mm: 2.0,
            size: 32,
            lo: HU_MIN,
            hi: HU_MAX,
            normalization: Normalization::FixedSpan,
        }
    }
}

impl Preprocess {
    /// Resample, crop and clamp, staying in HU. Idempotent.
    pub fn apply_hu(&self, vol: &CtVolume) -> Result<CtVolume> {
        let mut v = center_crop_pad(&resample_isotropic(vol, self.spacing_mm)?, self.size)?;
        v.values.iter_mut().for_each(|x| *x = x.clamp(self.lo, self.hi));
        Ok(v)
    }

    pub fn apply(&self, vol: &CtVolume) -> Result<NormalizedVolume> {
        normalize_with(&self.apply_hu(vol)?, self.lo, self.hi, self.normalization)
    }
}

//! Reconstruction quality metrics on normalized volumes, accumulated in `f64`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::NormalizedVolume;

/// PSNR reported for identical volumes.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check(op: &'static str, a: &NormalizedVolume, b: &NormalizedVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

pub fn mae(a: &NormalizedVolume, b: &NormalizedVolume) -> Result<f64> {
    check("mae", a, b)?;
    let s: f64 = a.values.iter().zip(&b.values).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.values.len() as f64)
}

pub fn mse(a: &NormalizedVolume, b: &NormalizedVolume) -> Result<f64> {
    check("mse", a, b)?;
    let s: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.values.len() as f64)
}

/// Cosine of the angle between the flattened volumes; 0 (with a warning)
/// when either volume is all zero.
pub fn cosine_similarity(a: &NormalizedVolume, b: &NormalizedVolume) -> Result<f64> {
    check("cosine_similarity", a, b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of an all-zero volume; reporting 0");
        return Ok(0.0);
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &NormalizedVolume, b: &NormalizedVolume, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Summed-volume table with one voxel of zero padding on the low side.
struct Integral {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Integral {
    fn new(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Self {
        let [dz, dy, dx] = dims;
        let (py, px) = (dy + 1, dx + 1);
        let mut data = vec![0.0; (dz + 1) * py * px];
        let at = |z: usize, y: usize, x: usize| (z * py + y) * px + x;
        for z in 1..=dz {
            for y in 1..=dy {
                for x in 1..=dx {
                    let v = f(((z - 1) * dy + y - 1) * dx + x - 1);
                    data[at(z, y, x)] = v + data[at(z - 1, y, x)] + data[at(z, y - 1, x)] + data[at(z, y, x - 1)]
                        - data[at(z - 1, y - 1, x)]
                        - data[at(z - 1, y, x - 1)]
                        - data[at(z, y - 1, x - 1)]
                        + data[at(z - 1, y - 1, x - 1)];
                }
            }
        }
        Integral { dims, data }
    }

    /// Sum over the cube `[z, z+w) x [y, y+w) x [x, x+w)`.
    fn cube(&self, z: usize, y: usize, x: usize, w: usize) -> f64 {
        let (py, px) = (self.dims[1] + 1, self.dims[2] + 1);
        let at = |z: usize, y: usize, x: usize| self.data[(z * py + y) * px + x];
        let (z1, y1, x1) = (z + w, y + w, x + w);
        at(z1, y1, x1) - at(z, y1, x1) - at(z1, y, x1) - at(z1, y1, x) + at(z, y, x1) + at(z, y1, x) + at(z1, y, x)
            - at(z, y, x)
    }
}

/// Volumetric SSIM: the mean over every fully contained 7x7x7 window of the
/// SSIM index with uniform weights, population statistics, data range 1.
pub fn ssim3d(a: &NormalizedVolume, b: &NormalizedVolume) -> Result<f64> {
    check("ssim3d", a, b)?;
    let w = SSIM_WINDOW;
    if a.dims.iter().any(|&d| d < w) {
        return Err(Error::shape("ssim3d", format!("volume {:?} smaller than the {w}^3 window", a.dims)));
    }
    let (av, bv) = (&a.values, &b.values);
    let sa = Integral::new(a.dims, |i| av[i] as f64);
    let sb = Integral::new(a.dims, |i| bv[i] as f64);
    let saa = Integral::new(a.dims, |i| (av[i] as f64).powi(2));
    let sbb = Integral::new(a.dims, |i| (bv[i] as f64).powi(2));
    let sab = Integral::new(a.dims, |i| av[i] as f64 * bv[i] as f64);
    let n = (w * w * w) as f64;
    let [dz, dy, dx] = a.dims;
    let (mut total, mut count) = (0.0, 0usize);
    for z in 0..=dz - w {
        for y in 0..=dy - w {
            for x in 0..=dx - w {
                let ma = sa.cube(z, y, x, w) / n;
                let mb = sb.cube(z, y, x, w) / n;
                let va = saa.cube(z, y, x, w) / n - ma * ma;
                let vb = sbb.cube(z, y, x, w) / n - mb * mb;
                let cov = sab.cube(z, y, x, w) / n - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub mae: f64,
    pub mse: f64,
    pub cosine: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, pred: &NormalizedVolume, truth: &NormalizedVolume) -> Result<Self> {
        let mse = mse(pred, truth)?;
        Ok(SampleMetrics {
            id: id.into(),
            mae: mae(pred, truth)?,
            mse,
            cosine: cosine_similarity(pred, truth)?,
            psnr_db: psnr_from_mse(mse, 1.0),
            ssim: ssim3d(pred, truth)?,
        })
    }

    fn values(&self) -> [f64; 5] {
        [self.mae, self.mse, self.cosine, self.psnr_db, self.ssim]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    /// Samples that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub const CSV_HEADER: &str = "sample_id,mae,mse,cosine,psnr_db,ssim";

impl MetricReport {
    /// Column means in CSV order; `None` for an empty report.
    pub fn mean(&self) -> Option<[f64; 5]> {
        if self.samples.is_empty() {
            return None;
        }
        let mut m = [0.0; 5];
        for s in &self.samples {
            for (acc, v) in m.iter_mut().zip(s.values()) {
                *acc += v;
            }
        }
        Some(m.map(|v| v / self.samples.len() as f64))
    }

    /// Population standard deviations in CSV order.
    pub fn std(&self) -> Option<[f64; 5]> {
        let mean = self.mean()?;
        let mut var = [0.0; 5];
        for s in &self.samples {
            for ((acc, v), m) in var.iter_mut().zip(s.values()).zip(mean) {
                *acc += (v - m) * (v - m);
            }
        }
        Some(var.map(|v| (v / self.samples.len() as f64).sqrt()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# ssim: volumetric, uniform 7x7x7 windows\n");
        for (id, why) in &self.skipped {
            let _ = writeln!(out, "# skipped: {id}: {why}");
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        let row = |out: &mut String, id: &str, v: [f64; 5]| {
            let _ = writeln!(out, "{id},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4]);
        };
        for s in &self.samples {
            row(&mut out, &s.id, s.values());
        }
        if let (Some(m), Some(sd)) = (self.mean(), self.std()) {
            row(&mut out, "mean", m);
            row(&mut out, "std", sd);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

//! Inference from checkpoints: volume reconstruction, evaluation reports and
//! slice export.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::drr::XrayPair;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, SampleMetrics};
use crate::model::Generator;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{load_store, Checkpoint, TrainConfig};
use crate::volume::{CtVolume, NormalizedVolume};

/// A generator with loaded weights.
pub struct Reconstructor {
    pub config: TrainConfig,
    pub generator: Generator,
    pub params: ParamStore,
}

impl Reconstructor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        let mut params = ParamStore::new();
        // initial values are overwritten below
        let generator = Generator::new(config.generator(), &mut params, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_store(ckpt, &params)?;
        Ok(Reconstructor { config, generator, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn reconstruct(&self, pair: &XrayPair) -> Result<NormalizedVolume> {
        reconstruct_with(&self.generator, &self.params, self.config.spacing_mm, pair)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<MetricReport> {
        evaluate_with(&self.generator, &self.params, self.config.spacing_mm, data)
    }
}

/// One forward pass for a single radiograph pair.
pub fn reconstruct_with(gen: &Generator, params: &ParamStore, spacing_mm: f32, pair: &XrayPair) -> Result<NormalizedVolume> {
    let v = gen.config().volume_size;
    if pair.dims != [v; 3] {
        return Err(Error::shape(
            "reconstruct",
            format!("radiographs of a {:?} volume, the model expects [{v}, {v}, {v}]", pair.dims),
        ));
    }
    let f = Tensor::new(&[1, 1, v, v], pair.frontal.data.clone())?;
    let l = Tensor::new(&[1, 1, v, v], pair.lateral.data.clone())?;
    let out = gen.forward(params, &f, &l)?;
    NormalizedVolume::new([v; 3], [spacing_mm; 3], out.to_vec())
}

pub fn evaluate_with(gen: &Generator, params: &ParamStore, spacing_mm: f32, data: &Dataset) -> Result<MetricReport> {
    let mut report = MetricReport {
        skipped: data.skipped.clone(),
        ..Default::default()
    };
    for s in &data.samples {
        let pred = reconstruct_with(gen, params, spacing_mm, &s.xrays)?;
        report.samples.push(SampleMetrics::compute(&s.id, &pred, &s.volume)?);
    }
    Ok(report)
}

/// Compares every ground-truth volume with itself.
pub fn evaluate_oracle(data: &Dataset) -> Result<MetricReport> {
    let mut report = MetricReport {
        skipped: data.skipped.clone(),
        ..Default::default()
    };
    for s in &data.samples {
        report.samples.push(SampleMetrics::compute(&s.id, &s.volume, &s.volume)?);
    }
    Ok(report)
}

/// Stores a normalized volume in the `.ctv` container unchanged.
pub fn as_ct_container(vol: &NormalizedVolume) -> Result<CtVolume> {
    CtVolume::new(vol.dims, vol.spacing, vol.values.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// `(y, x)` slice at fixed z.
    Axial,
    /// `(z, x)` slice at fixed y.
    Coronal,
    /// `(z, y)` slice at fixed x.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::InvalidArgument(format!(
                "unknown plane `{other}` (expected axial, coronal, sagittal or mid3)"
            ))),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        })
    }
}

/// `"mid3"` or a single plane name.
pub fn parse_planes(s: &str) -> Result<Vec<Plane>> {
    if s == "mid3" {
        Ok(Plane::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

/// The middle slice (index `n / 2`) as an 8-bit image, `round(clamp(v) * 255)`.
pub fn mid_slice(vol: &CtVolume, plane: Plane) -> (usize, usize, Vec<u8>) {
    let [dz, dy, dx] = vol.dims;
    let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (rows, cols) = match plane {
        Plane::Axial => (dy, dx),
        Plane::Coronal => (dz, dx),
        Plane::Sagittal => (dz, dy),
    };
    let mut px = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = match plane {
                Plane::Axial => vol.get(dz / 2, r, c),
                Plane::Coronal => vol.get(r, dy / 2, c),
                Plane::Sagittal => vol.get(r, c, dx / 2),
            };
            px.push(to8(v));
        }
    }
    (rows, cols, px)
}

pub fn encode_pgm(rows: usize, cols: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

/// Writes `<stem>_<plane>.pgm` into `out_dir` for each plane.
pub fn export_slices(vol: &CtVolume, planes: &[Plane], out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    planes
        .iter()
        .map(|&p| {
            let (rows, cols, px) = mid_slice(vol, p);
            let path = out_dir.join(format!("{stem}_{p}.pgm"));
            std::fs::write(&path, encode_pgm(rows, cols, &px))
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_slice_convention() {
        let mut v = CtVolume::filled([32; 3], [1.0; 3], 0.0);
        for y in 0..32 {
            for x in 0..32 {
                let i = v.index(16, y, x);
                v.values[i] = 1.0;
            }
        }
        let (_, _, ax) = mid_slice(&v, Plane::Axial);
        assert!(ax.iter().all(|&p| p == 255));
        let (_, _, co) = mid_slice(&v, Plane::Coronal);
        assert_eq!(co.iter().filter(|&&p| p == 255).count(), 32);
        let half = CtVolume::filled([4, 5, 6], [1.0; 3], 0.5);
        for p in Plane::ALL {
            assert!(mid_slice(&half, p).2.iter().all(|&q| q == 128));
        }
        assert_eq!(mid_slice(&half, Plane::Sagittal).0, 4);
        assert_eq!(mid_slice(&half, Plane::Sagittal).1, 5);
    }

    #[test]
    fn export_writes_pgm_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = CtVolume::filled([4, 5, 6], [1.0; 3], 0.5);
        let files = export_slices(&v, &parse_planes("mid3").unwrap(), dir.path(), "vol").unwrap();
        assert_eq!(files.len(), 3);
        let bytes = std::fs::read(dir.path().join("vol_axial.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n6 5\n255\n"));
        assert_eq!(bytes.len(), 11 + 30);
        assert!(parse_planes("oblique").is_err());
    }
}

//! Paired samples on disk: `<id>.ctv` holds the raw HU volume, `<id>.bxr` the
//! radiographs synthesized from its preprocessed form.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::drr::{read_pair, synthesize_biplanar, write_pair, XrayPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{generate_phantom, read_volume, write_volume, CtVolume, NormalizedVolume, PhantomSpec, Preprocess};

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub volume: NormalizedVolume,
    pub xrays: XrayPair,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `(id, reason)` for volumes that could not be paired.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads every `*.ctv` in `dir` (sorted by name) with its `.bxr` partner.
/// Volumes without radiographs are skipped with a warning.
pub fn load_dataset(dir: &Path, pre: &Preprocess) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if p.extension().is_some_and(|x| x == "ctv") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut ds = Dataset::default();
    for p in paths {
        let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let bxr = p.with_extension("bxr");
        if !bxr.exists() {
            log::warn!("{id}: no radiograph pair at {}, skipping", bxr.display());
            ds.skipped.push((id, "missing .bxr".into()));
            continue;
        }
        let volume = pre.apply(&read_volume(&p)?)?;
        let xrays = read_pair(&bxr)?;
        if xrays.dims != volume.dims {
            return Err(Error::Dataset(format!(
                "{id}: radiographs from a {:?} volume, preprocessed volume is {:?}",
                xrays.dims, volume.dims
            )));
        }
        ds.samples.push(Sample { id, volume, xrays });
    }
    Ok(ds)
}

/// Writes `<id>.ctv` and the matching `<id>.bxr`.
pub fn write_sample(dir: &Path, id: &str, ct: &CtVolume, pre: &Preprocess) -> Result<()> {
    write_volume(ct, &dir.join(format!("{id}.ctv")))?;
    write_pair(&synthesize_biplanar(&pre.apply(ct)?), &dir.join(format!("{id}.bxr")))
}

/// `count` phantoms named `sample_0000`, `sample_0001`, ...; sample seeds are
/// drawn from a stream seeded with `seed`.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, spec: &PhantomSpec, pre: &Preprocess) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec { seed: rng.gen(), ..spec.clone() };
        let id = format!("sample_{i:04}");
        write_sample(dir, &id, &generate_phantom(&spec)?, pre)?;
        ids.push(id);
    }
    Ok(ids)
}

/// Batched network inputs: frontal `(N, 1, z, x)`, lateral `(N, 1, z, y)`,
/// volumes `(N, 1, z, y, x)`.
pub struct Batch {
    pub frontal: Tensor,
    pub lateral: Tensor,
    pub volume: Tensor,
}

pub fn collate(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let [dz, dy, dx] = first.volume.dims;
    let n = samples.len();
    let (mut f, mut l, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        if s.volume.dims != first.volume.dims || s.xrays.dims != first.volume.dims {
            return Err(Error::Dataset(format!("{}: extents differ within the batch", s.id)));
        }
        f.extend_from_slice(&s.xrays.frontal.data);
        l.extend_from_slice(&s.xrays.lateral.data);
        v.extend_from_slice(&s.volume.values);
    }
    Ok(Batch {
        frontal: Tensor::new(&[n, 1, dz, dx], f)?,
        lateral: Tensor::new(&[n, 1, dz, dy], l)?,
        volume: Tensor::new(&[n, 1, dz, dy, dx], v)?,
    })
}

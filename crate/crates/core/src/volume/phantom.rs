//! Seeded procedural lumbar-spine phantoms.
//!
//! A soft-tissue elliptic cylinder along z holds a column of vertebrae, each
//! an elliptic-cylinder body with a box-shaped posterior element. Vertebrae
//! may carry a pair of thin antero-posterior metal rods.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CtVolume, HU_MAX, HU_MIN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// Cube edge in voxels.
    pub size: usize,
    pub spacing_mm: f32,
    pub body_hu: (f32, f32),
    pub bone_hu: (f32, f32),
    pub implant_hu: (f32, f32),
    pub n_vertebrae: usize,
    /// Chance that a given vertebra carries rods.
    pub implant_probability: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 32,
            spacing_mm: 2.0,
            body_hu: (-80.0, 80.0),
            bone_hu: (400.0, 1400.0),
            implant_hu: (2800.0, 4000.0),
            n_vertebrae: 3,
            implant_probability: 0.5,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("phantom size {} < 16", self.size)));
        }
        for (name, (lo, hi)) in [("body", self.body_hu), ("bone", self.bone_hu), ("implant", self.implant_hu)] {
            if !(HU_MIN <= lo && lo <= hi && hi <= HU_MAX) {
                return Err(Error::InvalidArgument(format!(
                    "{name} HU range [{lo}, {hi}] must lie within [{HU_MIN}, {HU_MAX}]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.implant_probability) {
            return Err(Error::InvalidArgument("implant_probability must be within [0, 1]".into()));
        }
        if self.n_vertebrae == 0 {
            return Err(Error::InvalidArgument("n_vertebrae must be >= 1".into()));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::InvalidArgument("spacing must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Pure function of `spec`: equal specs give bitwise-equal volumes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<CtVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let nf = n as f32;
    let mut vol = CtVolume::filled([n; 3], [spec.spacing_mm; 3], HU_MIN);

    // body: elliptic cylinder along z
    let cy = nf / 2.0 + rng.gen_range(-0.03..0.03) * nf;
    let cx = nf / 2.0 + rng.gen_range(-0.03..0.03) * nf;
    let ry = rng.gen_range(0.30..0.37) * nf;
    let rx = rng.gen_range(0.38..0.46) * nf;
    let body = uniform(&mut rng, spec.body_hu);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    let i = vol.index(z, y, x);
                    vol.values[i] = body;
                }
            }
        }
    }

    // vertebral column, posterior of the body centre (larger y)
    let margin = 0.06 * nf;
    let pitch = (nf - 2.0 * margin) / spec.n_vertebrae as f32;
    let spine_y = cy + 0.08 * nf;
    for k in 0..spec.n_vertebrae {
        let bone = uniform(&mut rng, spec.bone_hu);
        let z0 = margin + k as f32 * pitch + 0.1 * pitch;
        let z1 = margin + (k + 1) as f32 * pitch - 0.1 * pitch;
        let shift = rng.gen_range(-0.03..0.03) * nf;
        let vx = cx + shift;
        let r_body = rng.gen_range(0.10..0.14) * nf;
        let body_y = spine_y - 0.04 * nf;
        // posterior element box
        let box_y0 = body_y + r_body * 0.8;
        let box_y1 = box_y0 + rng.gen_range(0.10..0.15) * nf;
        let box_hx = rng.gen_range(0.03..0.05) * nf;
        let has_rods = rng.gen_bool(spec.implant_probability);
        let metal = uniform(&mut rng, spec.implant_hu);
        let rod_dx = r_body * 0.55;
        let rod_z = 0.5 * (z0 + z1);
        let rod_r = (0.025 * nf).max(0.75);
        for z in 0..n {
            let zc = z as f32 + 0.5;
            if zc < z0 || zc > z1 {
                continue;
            }
            for y in 0..n {
                let yc = y as f32 + 0.5;
                for x in 0..n {
                    let xc = x as f32 + 0.5;
                    let in_body = (yc - body_y).powi(2) + (xc - vx).powi(2) <= r_body * r_body;
                    let in_box = yc >= box_y0 && yc <= box_y1 && (xc - vx).abs() <= box_hx;
                    let i = vol.index(z, y, x);
                    if in_body || in_box {
                        vol.values[i] = bone;
                    }
                    if has_rods {
                        let in_rod = [-1.0f32, 1.0].iter().any(|s| {
                            let rx = vx + s * rod_dx;
                            (zc - rod_z).powi(2) + (xc - rx).powi(2) <= rod_r * rod_r
                                && yc >= body_y - 0.5 * r_body
                                && yc <= box_y0 + 0.5 * (box_y1 - box_y0)
                        });
                        if in_rod {
                            vol.values[i] = metal;
                        }
                    }
                }
            }
        }
    }
    Ok(vol)
}

use std::path::Path;

use super::CtVolume;
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::Result;

pub const CTV_MAGIC: [u8; 4] = *b"CTV1";

/// Layout: magic `CTV1`, `u32 x 3` dims `(dz, dy, dx)`, `f32 x 3` spacing
/// `(sz, sy, sx)`, then `dz*dy*dx` little-endian `f32` voxels, z-major.
pub fn write_volume(vol: &CtVolume, path: &Path) -> Result<()> {
    write_file(path, &encode(vol))
}

pub(crate) fn encode(vol: &CtVolume) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&CTV_MAGIC);
    for d in vol.dims {
        w.u32(d as u32);
    }
    for s in vol.spacing {
        w.f32(s);
    }
    w.f32s(&vol.values);
    w.buf
}

pub fn read_volume(path: &Path) -> Result<CtVolume> {
    decode(path, &read_file(path)?)
}

pub(crate) fn decode(path: &Path, bytes: &[u8]) -> Result<CtVolume> {
    let mut r = Reader::new(path, bytes);
    r.magic(&CTV_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let values = r.f32s(dims.iter().product())?;
    r.finish()?;
    CtVolume::new(dims, spacing, values).map_err(|e| r.malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> CtVolume {
        CtVolume::new([2, 3, 4], [2.0, 1.5, 0.5], (0..24).map(|v| v as f32 * 0.37 - 3.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ctv");
        let v = sample();
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode(&back), std::fs::read(&p).unwrap());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(Path::new("x"), &bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let v = CtVolume::filled([2, 2, 2], [1.0; 3], 0.0);
        let bytes = encode(&v);
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(decode(Path::new("x"), short), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(Path::new("x"), &bytes), Err(Error::PayloadMismatch { .. })));
    }
}

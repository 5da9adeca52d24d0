use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::adam::Moments;
use super::config::TrainConfig;
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const CKP_MAGIC: [u8; 4] = *b"CKP1";
pub const CKP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub moments: Moments,
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Complete training state.
///
/// Layout (little-endian): magic `CKP1`, `u32` version, `u64` step, `u64`
/// epoch, `u64` generator and discriminator Adam timesteps, `u32` parameter
/// count, then per parameter a `u32`-length-prefixed UTF-8 name, `u32` rank,
/// `u32` dims, and three f32 payloads (values, first moments, second
/// moments). Then the RNG block (32-byte seed, `u64` stream, `u128` word
/// position) and the config text, `u32`-length-prefixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub t_gen: u64,
    pub t_disc: u64,
    pub params: Vec<ParamRecord>,
    pub rng: RngState,
    pub config_text: String,
}

impl Checkpoint {
    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config_text)
    }

    pub fn param(&self, name: &str) -> Option<&ParamRecord> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&CKP_MAGIC);
        w.u32(CKP_VERSION);
        for v in [self.step, self.epoch, self.t_gen, self.t_disc] {
            w.u64(v);
        }
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u32(d as u32);
            }
            w.f32s(&p.data);
            w.f32s(&p.moments.m);
            w.f32s(&p.moments.v);
        }
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.str(&self.config_text);
        w.buf
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(&CKP_MAGIC)?;
        let version = r.u32()?;
        if version != CKP_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let (step, epoch, t_gen, t_disc) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(r.malformed(format!("parameter {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.malformed(format!("parameter {name} is too large")))?;
            let data = r.f32s(n)?;
            let m = r.f32s(n)?;
            let v = r.f32s(n)?;
            params.push(ParamRecord { name, shape, data, moments: Moments { m, v } });
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let config_text = r.str()?;
        r.finish()?;
        Ok(Checkpoint {
            step,
            epoch,
            t_gen,
            t_disc,
            params,
            rng: RngState { seed, stream, word_pos },
            config_text,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(path, &read_file(path)?)
    }
}

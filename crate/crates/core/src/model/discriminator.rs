use rand::Rng;

use super::{lift_to_unified, Act, Conv, ConvBlock, Norm, Rank, View};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{concat_channels, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub volume_size: usize,
    pub layers: usize,
    pub base_channels: usize,
    /// Width of each lifted radiograph branch.
    pub cond_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            volume_size: 32,
            layers: 3,
            base_channels: 32,
            cond_channels: 8,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.base_channels == 0 || self.cond_channels == 0 || self.volume_size == 0 {
            return Err(Error::Config("discriminator sizes must be >= 1".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope {} outside [0, 1)", self.leaky_slope)));
        }
        let div = 1usize
            .checked_shl(self.layers as u32)
            .filter(|&d| d <= self.volume_size && self.volume_size.is_multiple_of(d))
            .ok_or_else(|| {
                Error::Config(format!(
                    "volume_size {} does not divide into {} stride-2 layers",
                    self.volume_size, self.layers
                ))
            })?;
        // normalized blocks (all but the first) need two or more voxels
        if self.layers > 1 && self.volume_size / div < 2 {
            return Err(Error::Config(format!(
                "patch map extent {} too small for instance norm",
                self.volume_size / div
            )));
        }
        Ok(())
    }

    pub fn patch_extent(&self) -> usize {
        self.volume_size >> self.layers
    }
}

/// Conditional patch critic over `(radiographs, volume)` pairs. Parameters
/// live under `disc.`.
pub struct Discriminator {
    config: DiscriminatorConfig,
    cond: [ConvBlock; 2],
    blocks: Vec<ConvBlock>,
    head: Conv,
}

impl Discriminator {
    pub fn new<R: Rng>(config: DiscriminatorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let act = Act::Leaky(config.leaky_slope);
        let cc = config.cond_channels;
        let mut cond_branch = |tag: &str| -> Result<ConvBlock> {
            let conv = Conv::new(store, rng, &format!("disc.cond_{tag}"), Rank::Three, 1, cc, 3, 1, 1)?;
            Ok(ConvBlock::with(conv, None, act))
        };
        let cond = [cond_branch("frontal")?, cond_branch("lateral")?];
        let mut blocks = Vec::with_capacity(config.layers);
        let mut cin = 2 * cc + 1;
        for i in 0..config.layers {
            let cout = config.base_channels << i;
            let name = format!("disc.block{i}");
            let conv = Conv::new(store, rng, &format!("{name}.conv"), Rank::Three, cin, cout, 4, 2, 1)?;
            let norm = if i == 0 { None } else { Some(Norm::new(store, &format!("{name}.norm"), cout)?) };
            blocks.push(ConvBlock::with(conv, norm, act));
            cin = cout;
        }
        let head = Conv::new(store, rng, "disc.head", Rank::Three, cin, 1, 3, 1, 1)?;
        Ok(Discriminator { config, cond, blocks, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Lifted and convolved radiographs, `(N, 2 * cond_channels, V, V, V)`.
    pub fn condition<T: Scalar>(&self, p: &ParamStore<T>, frontal: &Tensor<T>, lateral: &Tensor<T>) -> Result<Tensor<T>> {
        let v = self.config.volume_size;
        for (name, x) in [("frontal", frontal), ("lateral", lateral)] {
            let s = x.shape();
            if s.len() != 4 || s[1] != 1 || s[2] != v || s[3] != v || s[0] != frontal.shape()[0] {
                return Err(Error::shape(
                    "discriminator",
                    format!("{name} radiograph must be (N, 1, {v}, {v}), got {s:?}"),
                ));
            }
        }
        let f = self.cond[0].forward(p, &lift_to_unified(frontal, View::Frontal)?)?;
        let l = self.cond[1].forward(p, &lift_to_unified(lateral, View::Lateral)?)?;
        concat_channels(&[f, l])
    }

    /// Patch score map `(N, 1, V / 2^layers, ...)`; scores are unbounded.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        frontal: &Tensor<T>,
        lateral: &Tensor<T>,
        volume: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let v = self.config.volume_size;
        let s = volume.shape();
        if s.len() != 5 || s[1] != 1 || s[2..] != [v, v, v] || s[0] != frontal.shape().first().copied().unwrap_or(0) {
            return Err(Error::shape(
                "discriminator",
                format!("volume must be (N, 1, {v}, {v}, {v}) matching the radiographs, got {s:?}"),
            ));
        }
        let mut h = concat_channels(&[self.condition(p, frontal, lateral)?, volume.clone()])?;
        for b in &self.blocks {
            h = b.forward(p, &h)?;
        }
        self.head.forward(p, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::mean_all;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn build(cfg: DiscriminatorConfig) -> (Discriminator, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let d = Discriminator::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (d, store.cast())
    }

    #[test]
    fn validation() {
        assert!(DiscriminatorConfig::default().validate().is_ok());
        let c = |v, layers| DiscriminatorConfig { volume_size: v, layers, ..Default::default() };
        assert!(c(8, 3).validate().is_err());
        assert!(c(8, 2).validate().is_ok());
        assert!(c(2, 1).validate().is_ok());
        assert!(c(12, 3).validate().is_err());
        assert!(c(32, 0).validate().is_err());
        let mut bad = DiscriminatorConfig::default();
        bad.leaky_slope = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shapes_and_prefix() {
        let mut store = ParamStore::new();
        let d = Discriminator::new(DiscriminatorConfig::default(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.names().all(|n| n.starts_with("disc.")));
        let x = Tensor::<f32>::zeros(&[2, 1, 32, 32]);
        let cond = d.condition(&store, &x, &x).unwrap();
        assert_eq!(cond.shape(), &[2, 16, 32, 32, 32]);
        assert!(cond.data().iter().all(|&v| v == 0.0));
        let out = d.forward(&store, &x, &x, &Tensor::zeros(&[2, 1, 32, 32, 32])).unwrap();
        assert_eq!(out.shape(), &[2, 1, 4, 4, 4]);
        assert!(d.forward(&store, &x, &x, &Tensor::zeros(&[1, 1, 32, 32, 32])).is_err());
        assert!(d.forward(&store, &x, &x, &Tensor::zeros(&[2, 1, 16, 32, 32])).is_err());
        assert!(d.condition(&store, &x, &Tensor::zeros(&[2, 1, 32, 16])).is_err());
    }

    #[test]
    fn batch_elements_are_independent() {
        let (d, p) = build(DiscriminatorConfig { volume_size: 8, layers: 2, base_channels: 4, cond_channels: 2, leaky_slope: 0.2 });
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let f = random(&[2, 1, 8, 8], &mut r);
        let l = random(&[2, 1, 8, 8], &mut r);
        let v = random(&[2, 1, 8, 8, 8], &mut r);
        let out = d.forward(&p, &f, &l, &v).unwrap().to_vec();
        let swap = |t: &Tensor<f64>| {
            let s = t.shape().to_vec();
            let half = t.numel() / 2;
            let mut data = t.to_vec();
            data.rotate_left(half);
            Tensor::new(&s, data).unwrap()
        };
        let mut out_sw = d.forward(&p, &swap(&f), &swap(&l), &swap(&v)).unwrap().to_vec();
        out_sw.rotate_left(out.len() / 2);
        for (a, b) in out.iter().zip(&out_sw) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_not_squashed() {
        let (d, p) = build(DiscriminatorConfig { volume_size: 8, layers: 1, base_channels: 4, cond_channels: 2, leaky_slope: 0.2 });
        p.get("disc.head.b").unwrap().set_data(vec![3.0]).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let out = d.forward(&p, &x, &x, &Tensor::zeros(&[1, 1, 8, 8, 8])).unwrap();
        assert!(out.data().iter().all(|&s| s == 3.0));
    }

    #[test]
    fn patch_scores_ignore_voxels_outside_receptive_field() {
        // without instance norm the score at patch i depends on voxels
        // 2i-3 ..= 2i+4 along each axis only
        let (d, p) = build(DiscriminatorConfig { volume_size: 16, layers: 1, base_channels: 4, cond_channels: 2, leaky_slope: 0.2 });
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let f = random(&[1, 1, 16, 16], &mut r);
        let l = random(&[1, 1, 16, 16], &mut r);
        let v = random(&[1, 1, 16, 16, 16], &mut r);
        let patch = [2usize, 3, 4];
        let inside = |i: usize, c: usize| (2 * c as isize - 3..=2 * c as isize + 4).contains(&(i as isize));
        let masked: Vec<f64> = v
            .to_vec()
            .iter()
            .enumerate()
            .map(|(idx, &val)| {
                let (z, y, x) = (idx / 256, idx / 16 % 16, idx % 16);
                if inside(z, patch[0]) && inside(y, patch[1]) && inside(x, patch[2]) { val } else { 0.0 }
            })
            .collect();
        let vm = Tensor::new(&[1, 1, 16, 16, 16], masked).unwrap();
        let a = d.forward(&p, &f, &l, &v).unwrap().to_vec();
        let b = d.forward(&p, &f, &l, &vm).unwrap().to_vec();
        let k = (patch[0] * 8 + patch[1]) * 8 + patch[2];
        assert!((a[k] - b[k]).abs() < 1e-12);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (d, p) = build(DiscriminatorConfig { volume_size: 8, layers: 2, base_channels: 4, cond_channels: 2, leaky_slope: 0.2 });
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let out = d
            .forward(&p, &random(&[1, 1, 8, 8], &mut r), &random(&[1, 1, 8, 8], &mut r), &random(&[1, 1, 8, 8, 8], &mut r))
            .unwrap();
        mean_all(&out).backward().unwrap();
        assert!(p.iter().all(|(_, t)| t.grad().is_some()));
    }
}

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{Conv, ConvBlock, Rank, UpBlock};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{add, concat_channels, expand_repeat, mul, sigmoid, slice_channels, softmax_channel, sub, Scalar, Tensor};

/// How the decoder combines the two view features at each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// View attention, fine distillation and the four-way concatenation.
    Cvaa,
    /// Plain sum of the views, concatenated with the deeper features.
    Add,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvaa" => Ok(Fusion::Cvaa),
            "add" => Ok(Fusion::Add),
            other => Err(Error::Config(format!("unknown fusion `{other}` (expected cvaa or add)"))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Cvaa => "cvaa",
            Fusion::Add => "add",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// `(z, x)` image, integrated along y.
    Frontal,
    /// `(z, y)` image, integrated along x.
    Lateral,
}

impl View {
    fn tag(self) -> &'static str {
        match self {
            View::Frontal => "frontal",
            View::Lateral => "lateral",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub volume_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub dense_layers_per_block: usize,
    pub fusion: Fusion,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            volume_size: 32,
            levels: 3,
            base_channels: 16,
            growth: 8,
            dense_layers_per_block: 2,
            fusion: Fusion::Cvaa,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("volume_size", self.volume_size),
            ("levels", self.levels),
            ("base_channels", self.base_channels),
            ("growth", self.growth),
            ("dense_layers_per_block", self.dense_layers_per_block),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let div = 1usize
            .checked_shl(self.levels as u32)
            .filter(|&d| d <= self.volume_size)
            .ok_or_else(|| Error::Config(format!("{} levels is too deep for volume_size {}", self.levels, self.volume_size)))?;
        if !self.volume_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "volume_size {} is not divisible by 2^levels = {div}",
                self.volume_size
            )));
        }
        // instance norm needs at least two voxels at the coarsest scale
        if self.volume_size / div < 2 {
            return Err(Error::Config(format!(
                "volume_size {} leaves a coarsest extent below 2 with {} levels",
                self.volume_size, self.levels
            )));
        }
        Ok(())
    }

    /// Channels of the level-`l` features (`l = 1..=levels`); level 0 is the
    /// full-resolution width used by the output head.
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels + l.saturating_sub(1) * self.growth
    }

    pub fn level_extent(&self, l: usize) -> usize {
        self.volume_size >> l
    }

    /// Channels leaving a dense block fed with `cin` channels.
    pub fn dense_output_channels(&self, cin: usize) -> usize {
        cin + self.dense_layers_per_block * self.growth
    }
}

/// Tiles a 2D view feature map `(N, C, z, u)` along the view's projection
/// axis into unified `(N, C, z, y, x)` order. Frontal maps are `(z, x)` and gain
/// a y axis between z and x; lateral maps are `(z, y)` and gain a trailing x axis.
pub fn lift_to_unified<T: Scalar>(feat: &Tensor<T>, view: View) -> Result<Tensor<T>> {
    let s = feat.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("lift_to_unified", format!("expected square (N, C, V, V) map, got {s:?}")));
    }
    let axis = match view {
        View::Frontal => 3,
        View::Lateral => 4,
    };
    expand_repeat(feat, axis, s[2])
}

struct DenseBlock {
    layers: Vec<ConvBlock>,
}

impl DenseBlock {
    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            let y = layer.forward(p, &h)?;
            h = concat_channels(&[h, y])?;
        }
        Ok(h)
    }
}

struct Encoder2d {
    stem: ConvBlock,
    dense: Vec<DenseBlock>,
    transitions: Vec<ConvBlock>,
}

impl Encoder2d {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &GeneratorConfig) -> Result<Self> {
        let stem = ConvBlock::basic(store, rng, &format!("{name}.stem"), Rank::Two, 1, cfg.base_channels, 1)?;
        let (mut dense, mut transitions) = (Vec::new(), Vec::new());
        let mut c = cfg.base_channels;
        for l in 1..=cfg.levels {
            let layers = (0..cfg.dense_layers_per_block)
                .map(|j| {
                    let lname = format!("{name}.dense{l}.layer{j}");
                    ConvBlock::basic(store, rng, &lname, Rank::Two, c + j * cfg.growth, cfg.growth, 1)
                })
                .collect::<Result<_>>()?;
            dense.push(DenseBlock { layers });
            let cl = cfg.level_channels(l);
            let tname = format!("{name}.trans{l}");
            transitions.push(ConvBlock::basic(store, rng, &tname, Rank::Two, cfg.dense_output_channels(c), cl, 2)?);
            c = cl;
        }
        Ok(Encoder2d { stem, dense, transitions })
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut h = self.stem.forward(p, x)?;
        let mut out = Vec::with_capacity(self.dense.len());
        for (d, t) in self.dense.iter().zip(&self.transitions) {
            h = t.forward(p, &d.forward(p, &h)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("view features differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_aligned(op: &'static str, s: &[usize], dp: &[usize]) -> Result<()> {
    if s.len() != 5 || dp.len() != 5 || s[0] != dp[0] || s[2..] != dp[2..] {
        return Err(Error::shape(op, format!("{s:?} and {dp:?} are not spatially aligned")));
    }
    Ok(())
}

/// Per-voxel soft selection between the two views.
pub struct ViewAttention {
    branch: [ConvBlock; 2],
    mix: Conv,
}

impl ViewAttention {
    /// `channels` is the view-feature width, `deep_channels` that of the
    /// deeper decoder features.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        deep_channels: usize,
    ) -> Result<Self> {
        let cin = channels + deep_channels;
        let branch = [
            ConvBlock::basic(store, rng, &format!("{name}.a1"), Rank::Three, cin, channels, 1)?,
            ConvBlock::basic(store, rng, &format!("{name}.a2"), Rank::Three, cin, channels, 1)?,
        ];
        let mix = Conv::new(store, rng, &format!("{name}.mix"), Rank::Three, 2 * channels, 2, 7, 1, 3)?;
        Ok(ViewAttention { branch, mix })
    }

    pub fn mix_weight_name(&self) -> &str {
        self.mix.weight_name()
    }

    pub fn mix_bias_name(&self) -> &str {
        self.mix.bias_name()
    }

    /// Returns the coarse fusion `C` and the two-channel weight map `W`.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        s1: &Tensor<T>,
        s2: &Tensor<T>,
        dp: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        check_same("vaa_fuse", s1.shape(), s2.shape())?;
        check_aligned("vaa_fuse", s1.shape(), dp.shape())?;
        let a1 = self.branch[0].forward(p, &concat_channels(&[s1.clone(), dp.clone()])?)?;
        let a2 = self.branch[1].forward(p, &concat_channels(&[s2.clone(), dp.clone()])?)?;
        let w = softmax_channel(&self.mix.forward(p, &concat_channels(&[a1, a2])?)?)?;
        // W1*S1 + W2*S2 written as S2 + W1*(S1 - S2), exact when S1 == S2
        let c = add(s2, &mul(&sub(s1, s2)?, &slice_channels(&w, 0, 1)?)?)?;
        Ok((c, w))
    }
}

/// Sigmoid gate that re-weights the coarse fusion.
pub struct FineDistill {
    gate: Conv,
}

impl FineDistill {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        deep_channels: usize,
    ) -> Result<Self> {
        let gate = Conv::new(store, rng, &format!("{name}.gate"), Rank::Three, channels + deep_channels, 1, 3, 1, 1)?;
        Ok(FineDistill { gate })
    }

    pub fn gate_weight_name(&self) -> &str {
        self.gate.weight_name()
    }

    pub fn gate_bias_name(&self) -> &str {
        self.gate.bias_name()
    }

    /// Returns the fine features `F = g * C` and the gate `g`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, c: &Tensor<T>, dp: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        check_aligned("fine_distill", c.shape(), dp.shape())?;
        let g = sigmoid(&self.gate.forward(p, &concat_channels(&[c.clone(), dp.clone()])?)?);
        Ok((mul(c, &g)?, g))
    }
}

struct DecoderLevel {
    attention: Option<(ViewAttention, FineDistill)>,
    fuse: ConvBlock,
    up: UpBlock,
}

impl DecoderLevel {
    fn forward<T: Scalar>(&self, p: &ParamStore<T>, s1: &Tensor<T>, s2: &Tensor<T>, dp: &Tensor<T>) -> Result<Tensor<T>> {
        check_same("decoder_level", s1.shape(), s2.shape())?;
        check_aligned("decoder_level", s1.shape(), dp.shape())?;
        let sum = add(s1, s2)?;
        let e = match &self.attention {
            Some((vaa, fd)) => {
                let (c, _) = vaa.forward(p, s1, s2, dp)?;
                let (f, _) = fd.forward(p, &c, dp)?;
                concat_channels(&[c, f, sum, dp.clone()])?
            }
            None => concat_channels(&[sum, dp.clone()])?,
        };
        self.up.forward(p, &self.fuse.forward(p, &e)?)
    }
}

/// Intermediate tensors of one generator pass.
pub struct GeneratorTrace<T: Scalar> {
    /// `(frontal, lateral)` lifted and convolved features per level, finest first.
    pub features: Vec<(Tensor<T>, Tensor<T>)>,
    /// Bottleneck output followed by each decoder level output.
    pub stages: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

/// Two-view 2D-to-3D reconstruction network. Parameters live under `gen.`.
pub struct Generator {
    config: GeneratorConfig,
    encoders: [Encoder2d; 2],
    lifts: Vec<[ConvBlock; 2]>,
    bottleneck: ConvBlock,
    bottleneck_up: UpBlock,
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

impl Generator {
    pub fn new<R: Rng>(config: GeneratorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let levels = cfg.levels;
        let encoders = [
            Encoder2d::new(store, rng, "gen.enc_frontal", cfg)?,
            Encoder2d::new(store, rng, "gen.enc_lateral", cfg)?,
        ];
        let mut lifts = Vec::with_capacity(levels);
        for l in 1..=levels {
            let c = cfg.level_channels(l);
            let mut lift = |view: View| {
                ConvBlock::basic(store, rng, &format!("gen.lift_{}{l}", view.tag()), Rank::Three, c, c, 1)
            };
            lifts.push([lift(View::Frontal)?, lift(View::Lateral)?]);
        }
        let cl = cfg.level_channels(levels);
        let bottleneck = ConvBlock::basic(store, rng, "gen.bottleneck", Rank::Three, cl, cl, 1)?;
        let bottleneck_up = UpBlock::new(store, rng, "gen.bottleneck", cl, cfg.level_channels(levels - 1))?;
        let mut decoder = Vec::with_capacity(levels - 1);
        for k in 1..levels {
            let l = levels - k;
            let c = cfg.level_channels(l);
            let name = format!("gen.dec{k}");
            let (attention, ein) = match cfg.fusion {
                Fusion::Cvaa => (
                    Some((
                        ViewAttention::new(store, rng, &format!("{name}.vaa"), c, c)?,
                        FineDistill::new(store, rng, &format!("{name}.fd"), c, c)?,
                    )),
                    4 * c,
                ),
                Fusion::Add => (None, 2 * c),
            };
            decoder.push(DecoderLevel {
                attention,
                fuse: ConvBlock::basic(store, rng, &format!("{name}.fuse"), Rank::Three, ein, c, 1)?,
                up: UpBlock::new(store, rng, &name, c, cfg.level_channels(l - 1))?,
            });
        }
        let head = Conv::new(store, rng, "gen.head", Rank::Three, cfg.base_channels, 1, 3, 1, 1)?;
        Ok(Generator {
            config,
            encoders,
            lifts,
            bottleneck,
            bottleneck_up,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn check_input<T: Scalar>(&self, name: &str, x: &Tensor<T>) -> Result<()> {
        let v = self.config.volume_size;
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != v || s[3] != v {
            return Err(Error::shape(
                "generator",
                format!("{name} radiograph must be (N, 1, {v}, {v}), got {s:?}"),
            ));
        }
        Ok(())
    }

    /// Per-level 2D features of one view, finest first.
    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, view: View, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(view.tag(), image)?;
        let idx = match view {
            View::Frontal => 0,
            View::Lateral => 1,
        };
        self.encoders[idx].forward(p, image)
    }

    /// `frontal` is `(N, 1, z, x)`, `lateral` is `(N, 1, z, y)`; the result is
    /// `(N, 1, z, y, x)` in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, frontal: &Tensor<T>, lateral: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.trace(p, frontal, lateral)?.output)
    }

    pub fn trace<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        frontal: &Tensor<T>,
        lateral: &Tensor<T>,
    ) -> Result<GeneratorTrace<T>> {
        if frontal.shape() != lateral.shape() {
            return Err(Error::shape(
                "generator",
                format!("frontal {:?} and lateral {:?} differ", frontal.shape(), lateral.shape()),
            ));
        }
        let f2d = self.encode(p, View::Frontal, frontal)?;
        let l2d = self.encode(p, View::Lateral, lateral)?;
        let mut features = Vec::with_capacity(self.config.levels);
        for ((f, l), lift) in f2d.iter().zip(&l2d).zip(&self.lifts) {
            let sf = lift[0].forward(p, &lift_to_unified(f, View::Frontal)?)?;
            let sl = lift[1].forward(p, &lift_to_unified(l, View::Lateral)?)?;
            features.push((sf, sl));
        }
        let (sf, sl) = features.last().expect("levels >= 1");
        let mut h = self.bottleneck_up.forward(p, &self.bottleneck.forward(p, &add(sf, sl)?)?)?;
        let mut stages = vec![h.clone()];
        for (k, level) in self.decoder.iter().enumerate() {
            let (s1, s2) = &features[self.config.levels - 2 - k];
            h = level.forward(p, s1, s2, &h)?;
            stages.push(h.clone());
        }
        let output = sigmoid(&self.head.forward(p, &h)?);
        Ok(GeneratorTrace { features, stages, output })
    }
}

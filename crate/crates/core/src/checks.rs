//! Registered finite-difference checks for every differentiable op, each
//! loss, and the two networks end to end (in `f64`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorConfig, Fusion, Generator, GeneratorConfig};
use crate::objectives::{
    lsgan_discriminator_loss, lsgan_generator_loss, projection_loss, total_generator_loss, voxel_recon_loss,
    LossWeights,
};
use crate::params::ParamStore;
use crate::tensor::{
    add, add_scalar, concat_channels, conv2d, conv3d, conv_transpose3d, expand_repeat, grad_check, instance_norm,
    leaky_relu, mean_all, mul, permute_axes, reduce_mean, relu, scale, sigmoid, slice_channels, softmax_channel,
    square, sub, GradCheckOptions, GradCheckReport, Tensor, INSTANCE_NORM_EPS,
};

pub const REGISTERED: &[&str] = &[
    "conv3d",
    "conv3d_strided",
    "conv_transpose3d",
    "conv2d",
    "relu",
    "leaky_relu",
    "sigmoid",
    "softmax_channel",
    "concat_channels",
    "slice_channels",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "mul_broadcast",
    "square",
    "scale",
    "add_scalar",
    "instance_norm",
    "expand_repeat",
    "permute_axes",
    "reduce_mean",
    "mean_all",
    "reshape",
    "lsgan_generator_loss",
    "lsgan_discriminator_loss",
    "voxel_recon_loss",
    "projection_loss",
    "generator",
    "discriminator",
    "total_generator_loss",
];

type Case = (Box<dyn Fn() -> Result<Tensor<f64>>>, Vec<(String, Tensor<f64>)>);

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.gen_range(lo..hi)).collect()).unwrap()
    }

    fn leaf(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape, -1.0, 1.0).requires_grad_(true)
    }

    /// Values bounded away from zero so finite differences never straddle a kink.
    fn off_kink(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = self.0.gen_range(0.1..1.0);
                if self.0.gen() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap().requires_grad_(true)
    }
}

/// Reduces a tensor to a scalar through fixed random weights so every output
/// element gets a distinct upstream gradient.
fn probe(out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let w = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed)).uniform(out.shape(), -1.0, 1.0);
    Ok(mean_all(&mul(out, &w)?))
}

fn named(pairs: &[(&str, &Tensor<f64>)]) -> Vec<(String, Tensor<f64>)> {
    pairs.iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect()
}

fn unary(x: Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>> + 'static) -> Case {
    let xs = x.clone();
    (Box::new(move || probe(&f(&xs)?, 1)), named(&[("x", &x)]))
}

fn binary(a: Tensor<f64>, b: Tensor<f64>, f: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>> + 'static) -> Case {
    let (aa, bb) = (a.clone(), b.clone());
    (Box::new(move || probe(&f(&aa, &bb)?, 2)), named(&[("a", &a), ("b", &b)]))
}

pub fn small_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        volume_size: 8,
        levels: 2,
        base_channels: 3,
        growth: 2,
        dense_layers_per_block: 1,
        fusion: Fusion::Cvaa,
    }
}

pub fn small_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        volume_size: 8,
        layers: 2,
        base_channels: 3,
        cond_channels: 2,
        leaky_slope: 0.2,
    }
}

fn param_inputs(prefix: &str, store: &ParamStore<f64>) -> Vec<(String, Tensor<f64>)> {
    store.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
}

fn build(name: &str) -> Result<Case> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(name.bytes().fold(17u64, |h, b| h.wrapping_mul(31) ^ b as u64)));
    let case: Case = match name {
        "conv3d" | "conv3d_strided" => {
            let stride = if name == "conv3d" { 1 } else { 2 };
            let (x, w, b) = (g.leaf(&[2, 2, 5, 4, 4]), g.leaf(&[3, 2, 3, 3, 3]), g.leaf(&[3]));
            let (xs, ws, bs) = (x.clone(), w.clone(), b.clone());
            (
                Box::new(move || probe(&conv3d(&xs, &ws, Some(&bs), stride, 1)?, 3)),
                named(&[("x", &x), ("w", &w), ("b", &b)]),
            )
        }
        "conv_transpose3d" => {
            let (x, w, b) = (g.leaf(&[1, 2, 3, 2, 3]), g.leaf(&[2, 3, 4, 4, 4]), g.leaf(&[3]));
            let (xs, ws, bs) = (x.clone(), w.clone(), b.clone());
            (
                Box::new(move || probe(&conv_transpose3d(&xs, &ws, Some(&bs), 2, 1)?, 4)),
                named(&[("x", &x), ("w", &w), ("b", &b)]),
            )
        }
        "conv2d" => {
            let (x, w, b) = (g.leaf(&[2, 2, 5, 6]), g.leaf(&[3, 2, 3, 3]), g.leaf(&[3]));
            let (xs, ws, bs) = (x.clone(), w.clone(), b.clone());
            (
                Box::new(move || probe(&conv2d(&xs, &ws, Some(&bs), 2, 1)?, 5)),
                named(&[("x", &x), ("w", &w), ("b", &b)]),
            )
        }
        "relu" => {
            let x = g.off_kink(&[2, 3, 4]);
            unary(x, |x| Ok(relu(x)))
        }
        "leaky_relu" => {
            let x = g.off_kink(&[2, 3, 4]);
            unary(x, |x| Ok(leaky_relu(x, 0.2)))
        }
        "sigmoid" => {
            let x = g.uniform(&[2, 3, 4], -4.0, 4.0).requires_grad_(true);
            unary(x, |x| Ok(sigmoid(x)))
        }
        "softmax_channel" => {
            let x = g.uniform(&[2, 3, 2, 2, 2], -3.0, 3.0).requires_grad_(true);
            unary(x, softmax_channel)
        }
        "concat_channels" => binary(g.leaf(&[2, 1, 3, 3]), g.leaf(&[2, 3, 3, 3]), |a, b| {
            concat_channels(&[a.clone(), b.clone()])
        }),
        "slice_channels" => {
            let x = g.leaf(&[2, 4, 3, 3]);
            unary(x, |x| slice_channels(x, 1, 2))
        }
        "add" => binary(g.leaf(&[2, 3, 4]), g.leaf(&[2, 3, 4]), add),
        "add_broadcast" => binary(g.leaf(&[2, 3, 2, 2, 2]), g.leaf(&[2, 1, 2, 2, 2]), add),
        "sub" => binary(g.leaf(&[2, 3, 2, 2, 2]), g.leaf(&[2, 1, 2, 2, 2]), sub),
        "mul" => binary(g.leaf(&[2, 3, 4]), g.leaf(&[2, 3, 4]), mul),
        "mul_broadcast" => binary(g.leaf(&[2, 3, 2, 2, 2]), g.leaf(&[2, 1, 2, 2, 2]), mul),
        "square" => {
            let x = g.leaf(&[3, 4]);
            unary(x, |x| Ok(square(x)))
        }
        "scale" => {
            let x = g.leaf(&[3, 4]);
            unary(x, |x| Ok(scale(x, -2.5)))
        }
        "add_scalar" => {
            let x = g.leaf(&[3, 4]);
            unary(x, |x| Ok(add_scalar(x, 0.75)))
        }
        "instance_norm" => {
            let (x, gamma, beta) = (g.leaf(&[2, 3, 3, 2, 2]), g.leaf(&[3]), g.leaf(&[3]));
            let (xs, gs, bs) = (x.clone(), gamma.clone(), beta.clone());
            (
                Box::new(move || probe(&instance_norm(&xs, &gs, &bs, INSTANCE_NORM_EPS)?, 6)),
                named(&[("x", &x), ("gamma", &gamma), ("beta", &beta)]),
            )
        }
        "expand_repeat" => {
            let x = g.leaf(&[2, 2, 3, 3]);
            unary(x, |x| expand_repeat(x, 3, 4))
        }
        "permute_axes" => {
            let x = g.leaf(&[2, 2, 3, 4, 5]);
            unary(x, |x| permute_axes(x, &[0, 1, 4, 2, 3]))
        }
        "reduce_mean" => {
            let x = g.leaf(&[2, 2, 3, 4, 5]);
            unary(x, |x| reduce_mean(x, &[2, 4]))
        }
        "mean_all" => {
            let x = g.leaf(&[2, 5]);
            let xs = x.clone();
            (Box::new(move || Ok(mean_all(&xs))), named(&[("x", &x)]))
        }
        "reshape" => {
            let x = g.leaf(&[2, 6]);
            unary(x, |x| x.reshape(&[3, 4]))
        }
        "lsgan_generator_loss" => {
            let p = g.uniform(&[2, 1, 2, 2, 2], -0.5, 1.5).requires_grad_(true);
            let ps = p.clone();
            (Box::new(move || Ok(lsgan_generator_loss(&ps))), named(&[("patch_fake", &p)]))
        }
        "lsgan_discriminator_loss" => {
            let (r, f) = (
                g.uniform(&[2, 1, 2, 2, 2], -0.5, 1.5).requires_grad_(true),
                g.uniform(&[2, 1, 2, 2, 2], -0.5, 1.5).requires_grad_(true),
            );
            let (rs, fs) = (r.clone(), f.clone());
            (
                Box::new(move || lsgan_discriminator_loss(&rs, &fs)),
                named(&[("patch_real", &r), ("patch_fake", &f)]),
            )
        }
        "voxel_recon_loss" | "projection_loss" => {
            let (p, t) = (
                g.uniform(&[2, 1, 8, 8, 8], 0.0, 1.0).requires_grad_(true),
                g.uniform(&[2, 1, 8, 8, 8], 0.0, 1.0).requires_grad_(true),
            );
            let (ps, ts) = (p.clone(), t.clone());
            let f: Box<dyn Fn() -> Result<Tensor<f64>>> = if name == "voxel_recon_loss" {
                Box::new(move || voxel_recon_loss(&ps, &ts))
            } else {
                Box::new(move || projection_loss(&ps, &ts))
            };
            (f, named(&[("pred", &p), ("target", &t)]))
        }
        "generator" => {
            let mut store = ParamStore::new();
            let gen = Generator::new(small_generator_config(), &mut store, &mut g.0)?;
            let p = store.cast::<f64>();
            let (f, l) = (g.uniform(&[1, 1, 8, 8], 0.0, 1.0), g.uniform(&[1, 1, 8, 8], 0.0, 1.0));
            let (f, l) = (f.requires_grad_(true), l.requires_grad_(true));
            let mut inputs = param_inputs("", &p);
            inputs.extend(named(&[("frontal", &f), ("lateral", &l)]));
            (Box::new(move || probe(&gen.forward(&p, &f, &l)?, 7)), inputs)
        }
        "discriminator" => {
            let mut store = ParamStore::new();
            let disc = Discriminator::new(small_discriminator_config(), &mut store, &mut g.0)?;
            let p = store.cast::<f64>();
            let (f, l) = (g.uniform(&[1, 1, 8, 8], 0.0, 1.0), g.uniform(&[1, 1, 8, 8], 0.0, 1.0));
            let v = g.uniform(&[1, 1, 8, 8, 8], 0.0, 1.0).requires_grad_(true);
            let mut inputs = param_inputs("", &p);
            inputs.push(("volume".into(), v.clone()));
            (Box::new(move || probe(&disc.forward(&p, &f, &l, &v)?, 8)), inputs)
        }
        "total_generator_loss" => {
            let mut gs = ParamStore::new();
            let gen = Generator::new(small_generator_config(), &mut gs, &mut g.0)?;
            let mut ds = ParamStore::new();
            let disc = Discriminator::new(small_discriminator_config(), &mut ds, &mut g.0)?;
            let (gp, dp) = (gs.cast::<f64>(), ds.cast::<f64>());
            let (f, l) = (g.uniform(&[1, 1, 8, 8], 0.0, 1.0), g.uniform(&[1, 1, 8, 8], 0.0, 1.0));
            let target = g.uniform(&[1, 1, 8, 8, 8], 0.0, 1.0);
            let mut inputs = param_inputs("", &gp);
            inputs.extend(param_inputs("", &dp));
            (
                Box::new(move || {
                    let fake = gen.forward(&gp, &f, &l)?;
                    let patch = disc.forward(&dp, &f, &l, &fake)?;
                    Ok(total_generator_loss(Some(&patch), &fake, &target, &LossWeights::default())?.total)
                }),
                inputs,
            )
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck target `{other}`; registered: {}",
                REGISTERED.join(", ")
            )))
        }
    };
    Ok(case)
}

/// Options used for a registered target. Whole networks contain thousands
/// of ReLU kinks, so they use a smaller, refined step.
pub fn options_for(name: &str) -> GradCheckOptions {
    match name {
        "generator" | "discriminator" | "total_generator_loss" => GradCheckOptions {
            eps: 1e-6,
            max_coords: 32,
            refine: true,
            ..Default::default()
        },
        _ => GradCheckOptions::default(),
    }
}

pub fn run(name: &str) -> Result<GradCheckReport> {
    run_with(name, &options_for(name))
}

pub fn run_with(name: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (f, inputs) = build(name)?;
    grad_check(f, &inputs, opts)
}

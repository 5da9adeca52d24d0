//! Building blocks shared by the generator and the discriminator.
//!
//! Layers hold parameter names only; values live in a [`ParamStore`], so one
//! network description can run in `f32` for training and in `f64` for
//! gradient checks.

mod discriminator;
mod generator;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{
    lift_to_unified, FineDistill, Fusion, Generator, GeneratorConfig, ViewAttention, View,
};

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamStore, INIT_STD};
use crate::tensor::{
    conv2d, conv3d, conv_transpose3d, instance_norm, leaky_relu, relu, Scalar, Tensor, INSTANCE_NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Rank {
    Two,
    Three,
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: String,
    b: String,
    stride: usize,
    pad: usize,
    rank: Rank,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        rank: Rank,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (w, b) = (format!("{name}.w"), format!("{name}.b"));
        let shape = match rank {
            Rank::Two => vec![cout, cin, k, k],
            Rank::Three => vec![cout, cin, k, k, k],
        };
        store.normal(&w, &shape, INIT_STD, rng)?;
        store.constant(&b, &[cout], 0.0)?;
        Ok(Conv { w, b, stride, pad, rank })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (w, b) = (p.get(&self.w)?, p.get(&self.b)?);
        match self.rank {
            Rank::Two => conv2d(x, w, Some(b), self.stride, self.pad),
            Rank::Three => conv3d(x, w, Some(b), self.stride, self.pad),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> &str {
        &self.b
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: String,
    beta: String,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let (gamma, beta) = (format!("{name}.gamma"), format!("{name}.beta"));
        store.constant(&gamma, &[c], 1.0)?;
        store.constant(&beta, &[c], 0.0)?;
        Ok(Norm { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        instance_norm(x, p.get(&self.gamma)?, p.get(&self.beta)?, INSTANCE_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Act {
    Relu,
    Leaky(f64),
}

impl Act {
    fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Act::Relu => relu(x),
            Act::Leaky(a) => leaky_relu(x, a),
        }
    }
}

/// Convolution, optional instance norm, activation.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    conv: Conv,
    norm: Option<Norm>,
    act: Act,
}

impl ConvBlock {
    /// The generator's basic block: `k=3, p=1` conv, instance norm, ReLU.
    pub fn basic<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        rank: Rank,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv: Conv::new(store, rng, &format!("{name}.conv"), rank, cin, cout, 3, stride, 1)?,
            norm: Some(Norm::new(store, &format!("{name}.norm"), cout)?),
            act: Act::Relu,
        })
    }

    pub fn with(conv: Conv, norm: Option<Norm>, act: Act) -> Self {
        ConvBlock { conv, norm, act }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.conv.forward(p, x)?;
        if let Some(n) = &self.norm {
            h = n.forward(p, &h)?;
        }
        Ok(self.act.apply(&h))
    }
}

/// Transposed conv (`k=4, s=2, p=1`, doubling every extent), instance norm, ReLU.
#[derive(Clone, Debug)]
pub(crate) struct UpBlock {
    w: String,
    b: String,
    norm: Norm,
}

impl UpBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let (w, b) = (format!("{name}.up.w"), format!("{name}.up.b"));
        store.normal(&w, &[cin, cout, 4, 4, 4], INIT_STD, rng)?;
        store.constant(&b, &[cout], 0.0)?;
        Ok(UpBlock {
            w,
            b,
            norm: Norm::new(store, &format!("{name}.up_norm"), cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = conv_transpose3d(x, p.get(&self.w)?, Some(p.get(&self.b)?), 2, 1)?;
        Ok(relu(&self.norm.forward(p, &h)?))
    }
}

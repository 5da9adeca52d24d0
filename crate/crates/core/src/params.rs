//! Named parameter collections.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the zero-mean normal used for conv weights.
pub const INIT_STD: f64 = 0.02;

/// Ordered map from path-like names (`gen.dec1.vaa.mix.w`) to trainable leaves.
pub struct ParamStore<T: Scalar = f32> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: IndexMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<Tensor<T>> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let t = if tensor.requires_grad() { tensor } else { tensor.detach().requires_grad_(true) };
        self.params.insert(name, t.clone());
        Ok(t)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor<T>> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor<T>> {
        self.insert(name, Tensor::full(shape, T::of(value)))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Fresh leaves in another precision with identical names and values.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect(),
        }
    }

    /// Deep copy with fresh leaves (no shared buffers).
    pub fn deep_clone(&self) -> Self {
        self.cast::<T>()
    }

    /// Copies values from `other` for every name both stores share; errors on
    /// shape mismatch or on names missing from `other`.
    pub fn load_from(&self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in &self.params {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{name}: {:?} vs {:?}", src.shape(), t.shape()),
                ));
            }
            t.set_data(src.to_vec())?;
        }
        Ok(())
    }

    /// Root of the summed squared gradients, over parameters that have one.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.into_iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        s.constant("b", &[2], 0.0).unwrap();
        s.constant("a", &[3], 1.0).unwrap();
        assert!(matches!(s.constant("a", &[1], 0.0), Err(Error::DuplicateParam(_))));
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(s.numel(), 5);
        assert!(s.get("a").unwrap().requires_grad());
        assert!(matches!(s.get("zz"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn normal_init_is_seeded() {
        let mk = || {
            let mut s = ParamStore::<f32>::new();
            s.normal("w", &[100], INIT_STD, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            s.get("w").unwrap().to_vec()
        };
        let a = mk();
        assert_eq!(a, mk());
        let sd = (a.iter().map(|v| v * v).sum::<f32>() / 100.0).sqrt();
        assert!(sd > 0.01 && sd < 0.03);
    }

    #[test]
    fn cast_keeps_values() {
        let mut s = ParamStore::<f32>::new();
        s.constant("x", &[2], 0.25).unwrap();
        let d = s.cast::<f64>();
        assert_eq!(d.get("x").unwrap().to_vec(), vec![0.25f64, 0.25]);
        assert!(d.get("x").unwrap().requires_grad());
    }
}

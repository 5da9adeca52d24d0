//! Training losses. Every expectation is realized as a mean over the batch
//! and all elements.

use crate::error::{Error, Result};
use crate::tensor::{add, add_scalar, mean_all, reduce_mean, scale, square, sub, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub vox: f64,
    pub proj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 0.1,
            vox: 10.0,
            proj: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.vox, self.proj];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// `mean((D(x, G(x)) - 1)^2)`.
pub fn lsgan_generator_loss<T: Scalar>(patch_fake: &Tensor<T>) -> Tensor<T> {
    mean_all(&square(&add_scalar(patch_fake, -1.0)))
}

/// `0.5 * (mean((D(x, y) - 1)^2) + mean(D(x, G(x))^2))`. The fake patch map
/// must come from a detached generator output.
pub fn lsgan_discriminator_loss<T: Scalar>(patch_real: &Tensor<T>, patch_fake: &Tensor<T>) -> Result<Tensor<T>> {
    let real = mean_all(&square(&add_scalar(patch_real, -1.0)));
    let fake = mean_all(&square(patch_fake));
    Ok(scale(&add(&real, &fake)?, 0.5))
}

pub fn voxel_recon_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "voxel_recon_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(mean_all(&square(&sub(pred, target)?)))
}

/// Sum over the axial, coronal and sagittal mean projections of the squared
/// error between `pred` and `target`, both `(N, C, z, y, x)`.
pub fn projection_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() || pred.ndim() != 5 {
        return Err(Error::shape(
            "projection_loss",
            format!("needs equal (N, C, z, y, x) shapes, got {:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let mut total: Option<Tensor<T>> = None;
    for axis in [2, 3, 4] {
        let term = voxel_recon_loss(&reduce_mean(pred, &[axis])?, &reduce_mean(target, &[axis])?)?;
        total = Some(match total {
            Some(t) => add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.expect("three projection planes"))
}

/// Weighted generator objective and its unweighted parts.
pub struct GeneratorLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub adv: f64,
    pub vox: f64,
    pub proj: f64,
}

/// `patch_fake` may be `None` when the adversarial weight is zero; the
/// adversarial component is then reported as zero.
pub fn total_generator_loss<T: Scalar>(
    patch_fake: Option<&Tensor<T>>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    w: &LossWeights,
) -> Result<GeneratorLoss<T>> {
    let vox = voxel_recon_loss(pred, target)?;
    let proj = projection_loss(pred, target)?;
    let mut total = add(&scale(&vox, w.vox), &scale(&proj, w.proj))?;
    let mut adv_value = 0.0;
    if let Some(pf) = patch_fake {
        let adv = lsgan_generator_loss(pf);
        adv_value = adv.item().as_f64();
        total = add(&total, &scale(&adv, w.adv))?;
    }
    Ok(GeneratorLoss {
        adv: adv_value,
        vox: vox.item().as_f64(),
        proj: proj.item().as_f64(),
        total,
    })
}

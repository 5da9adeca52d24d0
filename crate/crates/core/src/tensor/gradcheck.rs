//! Central-difference verification of backward rules.

use super::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// At most this many coordinates are probed per input (evenly spaced).
    pub max_coords: usize,
    /// Gradient magnitudes below this are treated as this when normalizing.
    pub abs_floor: f64,
    /// Also difference each coordinate with a step of `eps / 10` and keep
    /// the estimate closer to the analytic value. A step that straddles a
    /// ReLU kink disagrees at one step size only; a wrong backward rule
    /// disagrees at both.
    pub refine: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            tol: 1e-4,
            max_coords: 64,
            abs_floor: 1e-6,
            refine: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub coords: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares analytic gradients of `f` with central differences.
///
/// `f` must rebuild its graph from the current contents of the `inputs`
/// leaves on every call; the checker perturbs those leaves in place and
/// restores them afterwards. For each input the error is
/// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, abs_floor)`.
pub fn grad_check<F>(f: F, inputs: &[(String, Tensor<f64>)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (_, t) in inputs {
        t.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let mut checks = Vec::with_capacity(inputs.len());
    for (name, t) in inputs {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let n = t.numel();
        let count = n.min(opts.max_coords.max(1));
        let mut max_abs_err = 0.0f64;
        let mut scale = opts.abs_floor;
        for c in 0..count {
            let j = if count == n { c } else { c * n / count };
            let mut numeric = central_difference(&f, t, j, opts.eps)?;
            if opts.refine {
                let fine = central_difference(&f, t, j, opts.eps / 10.0)?;
                if (fine - analytic[j]).abs() < (numeric - analytic[j]).abs() {
                    numeric = fine;
                }
            }
            max_abs_err = max_abs_err.max((numeric - analytic[j]).abs());
            scale = scale.max(numeric.abs()).max(analytic[j].abs());
        }
        checks.push(InputCheck {
            name: name.clone(),
            coords: count,
            max_abs_err,
            rel_err: max_abs_err / scale,
        });
    }
    for (_, t) in inputs {
        t.zero_grad();
    }
    let max_rel_err = checks.iter().fold(0.0f64, |m, c| m.max(c.rel_err));
    Ok(GradCheckReport {
        passed: max_rel_err.is_finite() && max_rel_err < opts.tol,
        inputs: checks,
        max_rel_err,
    })
}

fn central_difference<F>(f: &F, t: &Tensor<f64>, j: usize, eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    let orig = t.data()[j];
    t.data_mut()[j] = orig + eps;
    let plus = f().map(|l| l.item());
    t.data_mut()[j] = orig - eps;
    let minus = f().map(|l| l.item());
    t.data_mut()[j] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

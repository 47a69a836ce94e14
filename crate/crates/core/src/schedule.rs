//! Interpolant schedules and denoiser/velocity/score conversions.
//!
//! The path from noise to data is `x_t = alpha_hat(t) eps + beta(t) x1` with the
//! boundary conditions alpha_hat(0) = 1, alpha_hat(1) = 0, beta(0) = 0,
//! beta(1) = 1. The default schedule is linear: alpha_hat = 1 - t, beta = t,
//! which keeps the denominator d(t) = alpha_hat' beta - alpha_hat beta' at the
//! constant -1 and reduces the velocity formula to (D - x_t)/(1 - t).
//!
//! A "general bridge" schedule decomposes the noise contribution as
//! alpha(t) x0 + gamma(t) eps with alpha = 1 - t, gamma = a t (1 - t); when the
//! prior is standard normal the two noise terms combine into
//! alpha_hat = sqrt(alpha^2 + gamma^2) and all one-sided formulas apply.
//!
//! Conversions:
//! - velocity:  v = (alpha_hat' x_t - d(t) D) / alpha_hat
//! - score:     s = -(x_t - beta D) / alpha_hat^2
//! - and the equivalent velocity-based score s = (beta' x_t - beta v) / (alpha_hat d(t)),
//!   kept as an independent formula for cross-checking (they agree to 1e-10).
//!
//! alpha_hat is floored at [`ALPHA_CLAMP`] inside conversions; samplers
//! additionally stop all stochastic terms for t >= 1 - delta.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, TangentVector};

/// Floor applied to alpha_hat inside velocity/score conversions.
pub const ALPHA_CLAMP: f64 = 1e-4;

/// Training-time distribution p(t) is Uniform(0,1) and the loss weight w(t) is
/// identically one; both are fixed here rather than configurable.
pub const TRAIN_WEIGHT: f64 = 1.0;

/// Interpolant coefficient family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// alpha_hat = 1 - t, beta = t.
    OneSidedLinear,
    /// alpha = 1 - t, beta = t, gamma = a t (1 - t); alpha_hat = sqrt(alpha^2 + gamma^2).
    GeneralBridge { a: f64 },
}

/// The four scalars consumed by the conversion formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha_hat: f64,
    pub beta: f64,
    pub dalpha_hat: f64,
    pub dbeta: f64,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} is outside [0, 1]")));
    }
    Ok(())
}

impl Schedule {
    /// (alpha_hat, beta, alpha_hat', beta') at time t.
    pub fn coeffs(&self, t: f64) -> Result<Coeffs> {
        check_t(t)?;
        match self {
            Schedule::OneSidedLinear => Ok(Coeffs {
                alpha_hat: 1.0 - t,
                beta: t,
                dalpha_hat: -1.0,
                dbeta: 1.0,
            }),
            Schedule::GeneralBridge { a } => {
                // alpha_hat = (1 - t) sqrt(1 + a^2 t^2), in closed form to stay
                // finite at t = 1 where the sqrt(alpha^2 + gamma^2) quotient is 0/0
                let u = (1.0 + a * a * t * t).sqrt();
                Ok(Coeffs {
                    alpha_hat: (1.0 - t) * u,
                    beta: t,
                    dalpha_hat: -u + (1.0 - t) * a * a * t / u,
                    dbeta: 1.0,
                })
            }
        }
    }

    /// d(t) = alpha_hat' beta - alpha_hat beta' (the denominator of Eq-style
    /// conversions; -1 identically for the linear schedule).
    pub fn denominator(&self, t: f64) -> Result<f64> {
        let c = self.coeffs(t)?;
        Ok(c.dalpha_hat * c.beta - c.alpha_hat * c.dbeta)
    }

    /// Prior coefficient alpha(t) of the decomposed form alpha x0 + beta x1 + gamma eps.
    /// For the one-sided schedule the prior sample is the noise, so alpha = alpha_hat.
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            Schedule::OneSidedLinear => 1.0 - t,
            Schedule::GeneralBridge { .. } => 1.0 - t,
        }
    }

    pub fn dalpha(&self, _t: f64) -> f64 {
        -1.0
    }

    pub fn beta(&self, t: f64) -> f64 {
        t
    }

    pub fn dbeta(&self, _t: f64) -> f64 {
        1.0
    }

    /// Extra-noise coefficient gamma(t); zero for the one-sided schedule.
    pub fn gamma(&self, t: f64) -> f64 {
        match self {
            Schedule::OneSidedLinear => 0.0,
            Schedule::GeneralBridge { a } => a * t * (1.0 - t),
        }
    }

    pub fn dgamma(&self, t: f64) -> f64 {
        match self {
            Schedule::OneSidedLinear => 0.0,
            Schedule::GeneralBridge { a } => a * (1.0 - 2.0 * t),
        }
    }

    /// alpha_hat with the conversion floor applied.
    pub fn alpha_hat_clamped(&self, t: f64) -> Result<f64> {
        Ok(self.coeffs(t)?.alpha_hat.max(ALPHA_CLAMP))
    }
}

/// x_t = alpha_hat(t) noise + beta(t) x1. The noise sample must already live on
/// the CoM-free subspace (draw iid normal, then center).
pub fn interpolate(
    s: &Schedule,
    noise: &TangentVector,
    x1: &PointCloud,
    t: f64,
) -> Result<PointCloud> {
    if noise.components().len() != x1.coords().len() {
        return Err(Error::ShapeMismatch("noise does not match data cloud".into()));
    }
    let c = s.coeffs(t)?;
    let coords = noise
        .components()
        .iter()
        .zip(x1.coords())
        .map(|(n, x)| c.alpha_hat * n + c.beta * x)
        .collect();
    // CoM-freeness is preserved by linearity; skip revalidation.
    PointCloud::from_coords(x1.space(), coords)
}

/// v = (alpha_hat' x_t - d(t) D) / alpha_hat, with alpha_hat floored at the clamp.
pub fn velocity_from_denoiser(
    s: &Schedule,
    d_val: &PointCloud,
    x_t: &PointCloud,
    t: f64,
) -> Result<TangentVector> {
    if d_val.coords().len() != x_t.coords().len() {
        return Err(Error::ShapeMismatch("denoiser output does not match state".into()));
    }
    let c = s.coeffs(t)?;
    let d = c.dalpha_hat * c.beta - c.alpha_hat * c.dbeta;
    let ah = c.alpha_hat.max(ALPHA_CLAMP);
    let components = x_t
        .coords()
        .iter()
        .zip(d_val.coords())
        .map(|(x, dv)| (c.dalpha_hat * x - d * dv) / ah)
        .collect();
    TangentVector::from_components(x_t.space(), components)
}

/// s = -(x_t - beta D) / alpha_hat^2, with alpha_hat floored at the clamp.
pub fn score_from_denoiser(
    s: &Schedule,
    d_val: &PointCloud,
    x_t: &PointCloud,
    t: f64,
) -> Result<TangentVector> {
    if d_val.coords().len() != x_t.coords().len() {
        return Err(Error::ShapeMismatch("denoiser output does not match state".into()));
    }
    let c = s.coeffs(t)?;
    let ah = c.alpha_hat.max(ALPHA_CLAMP);
    let components = x_t
        .coords()
        .iter()
        .zip(d_val.coords())
        .map(|(x, dv)| -(x - c.beta * dv) / (ah * ah))
        .collect();
    TangentVector::from_components(x_t.space(), components)
}

/// Velocity-based score s = (beta' x_t - beta v) / (alpha_hat d(t)). Kept as an
/// independent route for cross-checks against [`score_from_denoiser`].
pub fn score_from_velocity(
    s: &Schedule,
    v: &TangentVector,
    x_t: &PointCloud,
    t: f64,
) -> Result<TangentVector> {
    if v.components().len() != x_t.coords().len() {
        return Err(Error::ShapeMismatch("velocity does not match state".into()));
    }
    let c = s.coeffs(t)?;
    let d = c.dalpha_hat * c.beta - c.alpha_hat * c.dbeta;
    if d == 0.0 {
        return Err(Error::OutOfRange(format!(
            "score denominator d(t) vanishes at t = {t}"
        )));
    }
    let ah = c.alpha_hat.max(ALPHA_CLAMP);
    let components = x_t
        .coords()
        .iter()
        .zip(v.components())
        .map(|(x, vv)| (c.dbeta * x - c.beta * vv) / (ah * d))
        .collect();
    TangentVector::from_components(x_t.space(), components)
}

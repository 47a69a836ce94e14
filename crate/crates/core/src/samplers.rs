//! Euler / Euler-Maruyama integrators for the generative ODE and SDE, in both
//! the conventional (full-space) and quotient (symmetry-reduced) variants.
//!
//! The quotient variant integrates the horizontal lift of the reduced process:
//! drift and noise are projected onto the horizontal subspace at the current
//! state, and the stochastic branch adds the orbit-volume drift `-gamma eta_t
//! h(x)` that corrects for the curvature of the orbit geometry. With the
//! noise scale at zero the SDE stepper short-circuits to the ODE stepper, so
//! the two agree bit for bit.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::denoiser::Denoiser;
use crate::draws::{standard_normal_cloud, standard_normal_tangent};
use crate::error::{Error, Result};
use crate::geometry::{
    angular_momentum, horizontal_project, mean_curvature, planar_cross, GroupElement, PointCloud,
    SpaceKind, SymmetrySpace, TangentVector,
};
use crate::objectives::{kabsch_align, KABSCH_EPS};
use crate::schedule::{score_from_denoiser, velocity_from_denoiser, Schedule};

/// Default SDE noise scale gamma.
pub const DEFAULT_NOISE_SCALE: f64 = 0.35;
/// Default stochastic cutoff delta: for t >= 1 - delta the noise, score and
/// curvature terms are disabled and the step is deterministic.
pub const DEFAULT_STOCHASTIC_CUTOFF: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ode,
    Sde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Conventional,
    Quotient,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Variant::Conventional),
            "quotient" => Ok(Variant::Quotient),
            other => Err(Error::Config(format!(
                "unknown sampler variant '{other}' (expected conventional or quotient)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Conventional => "conventional",
            Variant::Quotient => "quotient",
        }
    }
}

/// Noise temperature eta(t) >= 0.
#[derive(Clone)]
pub enum EtaSchedule {
    Constant(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl EtaSchedule {
    pub fn value(&self, t: f64) -> Result<f64> {
        let v = match self {
            EtaSchedule::Constant(c) => *c,
            EtaSchedule::Custom(f) => f(t),
        };
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::OutOfRange(format!(
                "eta({t}) = {v}, must be finite and non-negative"
            )));
        }
        Ok(v)
    }
}

impl fmt::Debug for EtaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EtaSchedule::Constant(c) => write!(f, "EtaSchedule::Constant({c})"),
            EtaSchedule::Custom(_) => write!(f, "EtaSchedule::Custom(..)"),
        }
    }
}

/// Uniform time grid 0 = t_0 < ... < t_K = 1 with exact endpoints.
pub fn uniform_grid(steps: usize) -> Vec<f64> {
    let k = steps.max(1);
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub grid: Vec<f64>,
    /// gamma; zero makes the SDE identical to the ODE.
    pub noise_scale: f64,
    pub eta: EtaSchedule,
    pub seed: u64,
    /// delta in (0, 0.1].
    pub stochastic_cutoff: f64,
    /// Ablation switch for the orbit-volume drift; on by default. Only
    /// meaningful for the quotient SDE.
    pub curvature_enabled: bool,
}

impl SamplerConfig {
    pub fn ode(variant: Variant, steps: usize, seed: u64) -> Self {
        SamplerConfig {
            mode: Mode::Ode,
            variant,
            grid: uniform_grid(steps),
            noise_scale: 0.0,
            eta: EtaSchedule::Constant(1.0),
            seed,
            stochastic_cutoff: DEFAULT_STOCHASTIC_CUTOFF,
            curvature_enabled: true,
        }
    }

    pub fn sde(variant: Variant, steps: usize, seed: u64) -> Self {
        SamplerConfig {
            mode: Mode::Sde,
            variant,
            grid: uniform_grid(steps),
            noise_scale: DEFAULT_NOISE_SCALE,
            eta: EtaSchedule::Constant(1.0),
            seed,
            stochastic_cutoff: DEFAULT_STOCHASTIC_CUTOFF,
            curvature_enabled: true,
        }
    }

    pub fn steps(&self) -> usize {
        self.grid.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 {
            return Err(Error::Config("time grid needs at least two points".into()));
        }
        if self.grid[0] != 0.0 || *self.grid.last().unwrap() != 1.0 {
            return Err(Error::Config(
                "time grid must start at exactly 0 and end at exactly 1".into(),
            ));
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("time grid must be strictly increasing".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite and >= 0".into()));
        }
        if !(self.stochastic_cutoff > 0.0 && self.stochastic_cutoff <= 0.1) {
            return Err(Error::Config(
                "stochastic_cutoff must lie in (0, 0.1]".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step integration diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    /// Norm of the full displacement x_{i+1} - x_i.
    pub step_norm: f64,
    /// Norm of the horizontal (shape-changing) part of the displacement.
    pub tangential_norm: f64,
    /// Norm of the vertical (orbit-directed) part of the displacement.
    pub vertical_norm: f64,
    /// Norm of the angular momentum carried by the displacement at x_i.
    pub ang_mom_norm: f64,
    /// Optimal-rotation angle between consecutive states (radians).
    pub frame_rot_angle: f64,
}

/// Time-ordered integration record; the last state is the generated sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PointCloud>,
    /// One entry per step, i.e. `states.len() - 1`.
    pub steps: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn final_state(&self) -> &PointCloud {
        self.states.last().expect("trajectory has states")
    }
}

/// Total polygonal path length: sum of per-step displacement norms.
pub fn trajectory_length(traj: &Trajectory) -> f64 {
    traj.states
        .windows(2)
        .map(|w| {
            w[0].coords()
                .iter()
                .zip(w[1].coords())
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Rotation angle (radians, in [0, pi]) of a group element.
pub fn rotation_angle(g: &GroupElement) -> f64 {
    match g {
        GroupElement::Planar(r) => r[(1, 0)].atan2(r[(0, 0)]).abs(),
        GroupElement::Spatial(r) => {
            let c = (r.trace() - 1.0) / 2.0;
            c.clamp(-1.0, 1.0).acos()
        }
    }
}

/// One explicit Euler step of the probability-flow ODE.
pub fn ode_step<D: Denoiser + ?Sized>(
    variant: Variant,
    space: SymmetrySpace,
    model: &D,
    s: &Schedule,
    x: &PointCloud,
    t: f64,
    dt: f64,
) -> Result<PointCloud> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::OutOfRange(format!("dt = {dt}, must be positive")));
    }
    let d_out = model.denoise(x, t)?;
    let v = velocity_from_denoiser(s, &d_out, x, t)?;
    let v = match variant {
        Variant::Conventional => v,
        Variant::Quotient => horizontal_project(space, x, &v)?,
    };
    Ok(x.add_scaled(&v, dt))
}

/// One Euler-Maruyama step of the sampling SDE.
///
/// Conventional: `x + (v + g s) dt + sqrt(2 g dt) xi` with `g = gamma eta_t`.
/// Quotient: `x + [P(v + g s) - g h(x)] dt + sqrt(2 g dt) P(xi)`.
/// For `t >= 1 - delta`, or when `2 g dt = 0`, the step is the deterministic
/// ODE step and the generator is not consumed.
pub fn sde_step<D: Denoiser + ?Sized, R: Rng>(
    variant: Variant,
    space: SymmetrySpace,
    model: &D,
    s: &Schedule,
    cfg: &SamplerConfig,
    x: &PointCloud,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::OutOfRange(format!("dt = {dt}, must be positive")));
    }
    if t >= 1.0 - cfg.stochastic_cutoff {
        return ode_step(variant, space, model, s, x, t, dt);
    }
    let eta = cfg.eta.value(t)?;
    let g = cfg.noise_scale * eta;
    if g == 0.0 {
        return ode_step(variant, space, model, s, x, t, dt);
    }
    let d_out = model.denoise(x, t)?;
    let v = velocity_from_denoiser(s, &d_out, x, t)?;
    let score = score_from_denoiser(s, &d_out, x, t)?;
    let noise_coeff = (2.0 * g * dt).sqrt();
    let xi = standard_normal_tangent(space, rng);
    match variant {
        Variant::Conventional => {
            let drift = v.add(&score.scale(g));
            Ok(x.add_scaled(&drift, dt).add_scaled(&xi, noise_coeff))
        }
        Variant::Quotient => {
            let mut drift = horizontal_project(space, x, &v.add(&score.scale(g)))?;
            if cfg.curvature_enabled {
                let h = mean_curvature(space, x)?;
                drift = drift.sub(&h.scale(g));
            }
            let pxi = horizontal_project(space, x, &xi)?;
            Ok(x.add_scaled(&drift, dt).add_scaled(&pxi, noise_coeff))
        }
    }
}

/// Displacement diagnostics between consecutive states.
fn step_diagnostics(
    space: SymmetrySpace,
    x: &PointCloud,
    next: &PointCloud,
) -> Result<StepDiagnostics> {
    let delta: Vec<f64> = next
        .coords()
        .iter()
        .zip(x.coords())
        .map(|(b, a)| b - a)
        .collect();
    let delta = TangentVector::from_components(space, delta)?;
    let step_norm = delta.norm();
    // At a degenerate state the orbit directions collapse; report the whole
    // displacement as tangential rather than failing the run.
    let (tangential_norm, vertical_norm) = match horizontal_project(space, x, &delta) {
        Ok(h) => (h.norm(), delta.sub(&h).norm()),
        Err(_) => (step_norm, 0.0),
    };
    let ang_mom_norm = match space.kind() {
        SpaceKind::PlanarRotation => planar_cross(x, &delta).abs(),
        SpaceKind::ShapeSpace => angular_momentum(x, &delta)?.norm(),
    };
    let frame_rot_angle = rotation_angle(&kabsch_align(x, next, KABSCH_EPS)?.rotation);
    Ok(StepDiagnostics {
        step_norm,
        tangential_norm,
        vertical_norm,
        ang_mom_norm,
        frame_rot_angle,
    })
}

/// Integrate one trajectory over the config grid.
///
/// The start state is drawn from the centered standard normal prior unless
/// supplied. The generator is consumed only by the prior draw (when used) and
/// by stochastic steps, so an ODE run needs no randomness beyond the prior.
pub fn sample<D: Denoiser + ?Sized, R: Rng>(
    cfg: &SamplerConfig,
    space: SymmetrySpace,
    model: &D,
    s: &Schedule,
    x0: Option<PointCloud>,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    let x0 = match x0 {
        Some(x) => {
            if x.coords().len() != space.coord_len() {
                return Err(Error::ShapeMismatch(
                    "start state does not match the sampler space".into(),
                ));
            }
            x
        }
        None => standard_normal_cloud(space, rng),
    };
    let k = cfg.steps();
    let mut states = Vec::with_capacity(k + 1);
    let mut diags = Vec::with_capacity(k);
    states.push(x0);
    for i in 0..k {
        let (t, t_next) = (cfg.grid[i], cfg.grid[i + 1]);
        let dt = t_next - t;
        let x = states.last().unwrap();
        let next = match cfg.mode {
            Mode::Ode => ode_step(cfg.variant, space, model, s, x, t, dt)?,
            Mode::Sde => sde_step(cfg.variant, space, model, s, cfg, x, t, dt, rng)?,
        };
        diags.push(step_diagnostics(space, x, &next)?);
        states.push(next);
    }
    Ok(Trajectory {
        times: cfg.grid.clone(),
        states,
        steps: diags,
    })
}

/// Integrate `n` independent trajectories in parallel.
///
/// Trajectory `i` uses generator stream `i` of the config seed, so results are
/// independent of the thread count and of `n` (a given index always sees the
/// same stream).
pub fn sample_ensemble<D: Denoiser + Sync + ?Sized>(
    cfg: &SamplerConfig,
    space: SymmetrySpace,
    model: &D,
    s: &Schedule,
    n: usize,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            sample(cfg, space, model, s, None, &mut rng)
        })
        .collect()
}

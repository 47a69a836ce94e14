//! Invariant suite behind the `verify` command.
//!
//! Every check is a named, deterministic pass/fail record built from the
//! library's own contracts: projection algebra, curvature identities,
//! equivariance, alignment optimality, loss gauge freedoms, gradient
//! correctness and sampler guarantees. The suite is self-contained (no
//! training, no large Monte Carlo) so a fresh checkout can run it in seconds.

use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::denoiser::{AnalyticGaussianDenoiser, Denoiser, MlpDenoiser, MlpLayout, TimeFeatures};
use crate::draws::{random_rotation, standard_normal_cloud, standard_normal_tangent};
use crate::error::Result;
use crate::geometry::{
    angular_momentum, apply_group, apply_group_tangent, center_tangent, horizontal_project,
    mean_curvature, planar_cross, vertical_basis, PointCloud, SymmetrySpace, TangentVector,
};
use crate::metrics::{brute_force_best_rotation, fd_logdet_grad};
use crate::objectives::{
    kabsch_align, loss_af3, loss_conventional, BatchItem, LossVariant, TrainingBatch, KABSCH_EPS,
};
use crate::report::{CheckRecord, OracleReport, RunWriter};
use crate::samplers::{
    rotation_angle, sample, trajectory_length, SamplerConfig, Variant,
};
use crate::schedule::{interpolate, score_from_denoiser, score_from_velocity, Schedule};

/// Fault-injection hook for the curvature checks.
///
/// `FlipSign` negates the mean-curvature field before the checks compare it
/// against independent references, so a verification run with the hook armed
/// must fail exactly the curvature-named checks. It exists to prove the suite
/// actually exercises the curvature term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurvatureHook {
    #[default]
    Clean,
    FlipSign,
}

fn hooked_curvature(
    hook: CurvatureHook,
    space: SymmetrySpace,
    x: &PointCloud,
) -> Result<TangentVector> {
    let h = mean_curvature(space, x)?;
    Ok(match hook {
        CurvatureHook::Clean => h,
        CurvatureHook::FlipSign => h.scale(-1.0),
    })
}

fn shape_space(n: usize) -> SymmetrySpace {
    SymmetrySpace::shape_so3(n).expect("n >= 3")
}

/// Max over random clouds/tangents of the relative projection defects.
fn projection_checks(report: &mut OracleReport, rng: &mut ChaCha12Rng) -> Result<()> {
    let mut idem: f64 = 0.0;
    let mut sadj: f64 = 0.0;
    let mut vert: f64 = 0.0;
    let mut ang: f64 = 0.0;
    let mut lin: f64 = 0.0;
    for trial in 0..50 {
        let space = shape_space(3 + trial % 8);
        let x = standard_normal_cloud(space, rng);
        let v = standard_normal_tangent(space, rng);
        let u = standard_normal_tangent(space, rng);
        let pv = horizontal_project(space, &x, &v)?;
        let ppv = horizontal_project(space, &x, &pv)?;
        let scale = v.norm().max(1e-300);
        idem = idem.max(ppv.sub(&pv).norm() / scale);
        let pu = horizontal_project(space, &x, &u)?;
        sadj = sadj.max((pu.dot(&v) - u.dot(&pv)).abs() / (u.norm() * v.norm()).max(1e-300));
        for b in vertical_basis(space, &x)? {
            let pb = horizontal_project(space, &x, &b)?;
            vert = vert.max(pb.norm() / b.norm().max(1e-300));
        }
        ang = ang.max(angular_momentum(&x, &pv)?.norm() / scale);
        // CoM stays zero: the centered copy must coincide with the original.
        lin = lin.max(center_tangent(&pv).sub(&pv).norm() / scale);
    }
    report.push(CheckRecord::upper("projection_idempotent", idem, 1e-9));
    report.push(CheckRecord::upper("projection_self_adjoint", sadj, 1e-9));
    report.push(CheckRecord::upper("projection_kills_vertical", vert, 1e-9));
    report.push(CheckRecord::upper(
        "projection_zero_angular_momentum",
        ang,
        1e-9,
    ));
    report.push(CheckRecord::upper(
        "projection_zero_linear_momentum",
        lin,
        1e-9,
    ));

    // Planar case: the horizontal space is the radial line through x.
    let space = SymmetrySpace::planar_so2();
    let mut radial: f64 = 0.0;
    for _ in 0..50 {
        let x = standard_normal_cloud(space, rng);
        let v = standard_normal_tangent(space, rng);
        let pv = horizontal_project(space, &x, &v)?;
        let r = x.point2().norm();
        radial = radial.max(planar_cross(&x, &pv).abs() / (r * v.norm()).max(1e-300));
    }
    report.push(CheckRecord::upper("projection_planar_radial", radial, 1e-12));
    Ok(())
}

fn curvature_checks(
    report: &mut OracleReport,
    hook: CurvatureHook,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    // Against the finite-difference gradient of -1/2 log det K.
    let mut fd_err: f64 = 0.0;
    for trial in 0..20 {
        let space = shape_space(3 + trial % 5);
        let x = standard_normal_cloud(space, rng);
        let h = hooked_curvature(hook, space, &x)?;
        let fd = fd_logdet_grad(&x, 1e-5)?;
        fd_err = fd_err.max(h.sub(&fd).norm() / h.norm().max(1e-300));
    }
    report.push(CheckRecord::upper(
        "curvature_matches_fd_gradient",
        fd_err,
        1e-5,
    ));

    // Planar closed form -x/|x|^2, checked at explicit points.
    let space = SymmetrySpace::planar_so2();
    let mut planar_err: f64 = 0.0;
    for &(a, b) in &[(1.0, 0.0), (0.3, -0.4), (-2.0, 1.5), (0.0, 5.0)] {
        let x = PointCloud::from_coords(space, vec![a, b])?;
        let h = hooked_curvature(hook, space, &x)?;
        let r2 = a * a + b * b;
        let expect = TangentVector::from_components(space, vec![-a / r2, -b / r2])?;
        planar_err = planar_err.max(h.sub(&expect).norm() * r2.sqrt());
    }
    report.push(CheckRecord::upper(
        "curvature_planar_closed_form",
        planar_err,
        1e-10,
    ));

    // The field is horizontal and scales like 1/r (both survive a sign flip;
    // the two checks above are the ones the injection hook must break).
    let mut horiz: f64 = 0.0;
    let mut scaling: f64 = 0.0;
    for trial in 0..20 {
        let space = shape_space(3 + trial % 5);
        let x = loop {
            // The epsilon regularizer in K^-1 is absolute, so the scaling
            // comparison needs a well-conditioned K to stay meaningful.
            let x = standard_normal_cloud(space, rng);
            if crate::geometry::inertia_matrix(&x)?.lambda_min() > 0.5 {
                break x;
            }
        };
        let h = hooked_curvature(hook, space, &x)?;
        let ph = horizontal_project(space, &x, &h)?;
        horiz = horiz.max(ph.sub(&h).norm() / h.norm().max(1e-300));
        let doubled = x.add_scaled(&x.as_tangent(), 1.0);
        let h2 = hooked_curvature(hook, space, &doubled)?;
        scaling = scaling.max(h2.sub(&h.scale(0.5)).norm() / h.norm().max(1e-300));
    }
    report.push(CheckRecord::upper("curvature_is_horizontal", horiz, 1e-9));
    report.push(CheckRecord::upper(
        "curvature_inverse_scaling",
        scaling,
        1e-7,
    ));
    Ok(())
}

fn equivariance_checks(
    report: &mut OracleReport,
    hook: CurvatureHook,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    let mut proj: f64 = 0.0;
    let mut curv: f64 = 0.0;
    for trial in 0..40 {
        let space = if trial % 2 == 0 {
            SymmetrySpace::planar_so2()
        } else {
            shape_space(3 + trial % 6)
        };
        let x = standard_normal_cloud(space, rng);
        let v = standard_normal_tangent(space, rng);
        let g = random_rotation(space, rng);
        let gx = apply_group(&g, &x)?;
        let lhs = horizontal_project(space, &gx, &apply_group_tangent(&g, &v)?)?;
        let rhs = apply_group_tangent(&g, &horizontal_project(space, &x, &v)?)?;
        proj = proj.max(lhs.sub(&rhs).norm() / v.norm().max(1e-300));
        let hl = hooked_curvature(hook, space, &gx)?;
        let hr = apply_group_tangent(&g, &hooked_curvature(hook, space, &x)?)?;
        curv = curv.max(hl.sub(&hr).norm() / hr.norm().max(1e-300));
    }
    report.push(CheckRecord::upper("projection_equivariant", proj, 1e-9));
    report.push(CheckRecord::upper("curvature_equivariant", curv, 1e-9));
    Ok(())
}

fn schedule_checks(report: &mut OracleReport, rng: &mut ChaCha12Rng) -> Result<()> {
    let s = Schedule::OneSidedLinear;
    let space = shape_space(4);

    let x1 = standard_normal_cloud(space, rng);
    let eps = standard_normal_tangent(space, rng);
    let at_zero = interpolate(&s, &eps, &x1, 0.0)?;
    let at_one = interpolate(&s, &eps, &x1, 1.0)?;
    let mut endpoint: f64 = 0.0;
    for (i, c) in at_zero.coords().iter().enumerate() {
        endpoint = endpoint.max((c - eps.components()[i]).abs());
    }
    for (i, c) in at_one.coords().iter().enumerate() {
        endpoint = endpoint.max((c - x1.coords()[i]).abs());
    }
    report.push(CheckRecord::upper(
        "interpolation_endpoints",
        endpoint,
        1e-12,
    ));

    // Score via the denoiser and via the velocity must be the same function.
    let den = AnalyticGaussianDenoiser::new(1.0, s.clone())?;
    let mut score_gap: f64 = 0.0;
    for _ in 0..20 {
        let x = standard_normal_cloud(space, rng);
        let t = 0.05 + 0.9 * rng.random::<f64>();
        let d = den.denoise(&x, t)?;
        let direct = score_from_denoiser(&s, &d, &x, t)?;
        let v = crate::schedule::velocity_from_denoiser(&s, &d, &x, t)?;
        let via_v = score_from_velocity(&s, &v, &x, t)?;
        score_gap = score_gap.max(direct.sub(&via_v).norm() / direct.norm().max(1e-300));
    }
    report.push(CheckRecord::upper(
        "score_routes_agree",
        score_gap,
        1e-10,
    ));
    Ok(())
}

fn alignment_checks(report: &mut OracleReport, rng: &mut ChaCha12Rng) -> Result<()> {
    // Exact recovery when y is a rotated copy of x.
    let mut recover: f64 = 0.0;
    for trial in 0..20 {
        let space = if trial % 2 == 0 {
            SymmetrySpace::planar_so2()
        } else {
            shape_space(4 + trial % 4)
        };
        let x = standard_normal_cloud(space, rng);
        let y = apply_group(&random_rotation(space, rng), &x)?;
        let a = kabsch_align(&x, &y, KABSCH_EPS)?;
        let mut gap: f64 = 0.0;
        for (p, q) in a.aligned.coords().iter().zip(y.coords()) {
            gap = gap.max((p - q).abs());
        }
        recover = recover.max(gap / x.norm().max(1e-300));
    }
    report.push(CheckRecord::upper("kabsch_exact_recovery", recover, 1e-9));

    // Never worse than a random search over the group.
    let mut excess: f64 = f64::NEG_INFINITY;
    for trial in 0..20 {
        let space = if trial % 2 == 0 {
            SymmetrySpace::planar_so2()
        } else {
            shape_space(4)
        };
        let x = standard_normal_cloud(space, rng);
        let y = standard_normal_cloud(space, rng);
        let a = kabsch_align(&x, &y, KABSCH_EPS)?;
        let mut r2 = 0.0;
        for (p, q) in a.aligned.coords().iter().zip(y.coords()) {
            r2 += (p - q) * (p - q);
        }
        let (_, brute) = brute_force_best_rotation(&x, &y, 2000, rng)?;
        excess = excess.max(r2.sqrt() - brute);
    }
    report.push(CheckRecord::upper(
        "kabsch_beats_random_search",
        excess,
        1e-12,
    ));

    // The optimal rotation is the orthogonal factor of the polar decomposition
    // of the cross-covariance C = sum x y^T: R = (C^T C)^(1/2) C^(-1).
    let space = shape_space(5);
    let mut polar_gap: f64 = 0.0;
    let mut seed = 0;
    let mut done = 0;
    while done < 10 {
        let mut local = ChaCha12Rng::seed_from_u64(9000 + seed);
        seed += 1;
        let x = standard_normal_cloud(space, &mut local);
        let y = standard_normal_cloud(space, &mut local);
        let mut c = Matrix3::zeros();
        for i in 0..x.n_points() {
            c += x.point3(i) * y.point3(i).transpose();
        }
        // The identity only produces a rotation on the positive-determinant
        // branch; skip draws where Kabsch needs the reflection correction.
        if c.determinant() <= 1e-6 {
            continue;
        }
        done += 1;
        let ctc = c.transpose() * c;
        let eig = ctc.symmetric_eigen();
        let mut root = Matrix3::zeros();
        for k in 0..3 {
            let u = eig.eigenvectors.column(k);
            root += u * u.transpose() * eig.eigenvalues[k].max(0.0).sqrt();
        }
        let polar = root * c.try_inverse().expect("det > 0");
        let a = kabsch_align(&x, &y, KABSCH_EPS)?;
        let rot = match a.rotation {
            crate::geometry::GroupElement::Spatial(m) => m,
            _ => unreachable!("spatial space"),
        };
        polar_gap = polar_gap.max((rot - polar).norm());
    }
    report.push(CheckRecord::upper(
        "kabsch_polar_identity",
        polar_gap,
        1e-8,
    ));
    Ok(())
}

/// Denoiser wrappers used by the gauge checks.
struct ConstantDenoiser(PointCloud);

impl Denoiser for ConstantDenoiser {
    fn denoise(&self, _x_t: &PointCloud, _t: f64) -> Result<PointCloud> {
        Ok(self.0.clone())
    }
}

struct VerticalShift<'a> {
    base: &'a MlpDenoiser,
    magnitude: f64,
}

impl Denoiser for VerticalShift<'_> {
    fn denoise(&self, x_t: &PointCloud, t: f64) -> Result<PointCloud> {
        let d = self.base.denoise(x_t, t)?;
        // Push the output along the orbit direction of the *input* state:
        // that is the vertical subspace the quotient residual projects out.
        let space = d.space();
        let mut comps = Vec::with_capacity(d.coords().len());
        match space.kind() {
            crate::geometry::SpaceKind::PlanarRotation => {
                let p = x_t.point2();
                comps.extend_from_slice(&[-p.y * self.magnitude, p.x * self.magnitude]);
            }
            crate::geometry::SpaceKind::ShapeSpace => {
                for i in 0..x_t.n_points() {
                    let p = x_t.point3(i);
                    comps.extend_from_slice(&[
                        -p.y * self.magnitude,
                        p.x * self.magnitude,
                        0.0,
                    ]);
                }
            }
        }
        let shift = TangentVector::from_components(space, comps)?;
        Ok(d.add_scaled(&shift, 1.0))
    }
}

struct RotatedOutput<'a> {
    base: &'a MlpDenoiser,
    g: crate::geometry::GroupElement,
}

impl Denoiser for RotatedOutput<'_> {
    fn denoise(&self, x_t: &PointCloud, t: f64) -> Result<PointCloud> {
        apply_group(&self.g, &self.base.denoise(x_t, t)?)
    }
}

fn loss_checks(report: &mut OracleReport, rng: &mut ChaCha12Rng) -> Result<()> {
    let s = Schedule::OneSidedLinear;
    let space = shape_space(4);
    let layout = MlpLayout {
        hidden: vec![16, 16],
        ..MlpLayout::new(space)
    };
    let net = MlpDenoiser::init(space, layout, rng)?;
    let target = |r: &mut ChaCha12Rng| Ok(standard_normal_cloud(space, r));
    let batch = TrainingBatch::draw(space, &target, 32, false, rng)?;

    // Vertical components of the model output are invisible to the quotient
    // loss but not to the conventional one.
    let base_q = crate::objectives::loss_value(&net, &s, LossVariant::Quotient, &batch)?.0;
    let shifted = VerticalShift {
        base: &net,
        magnitude: 0.35,
    };
    let shift_q = crate::objectives::loss_value(&shifted, &s, LossVariant::Quotient, &batch)?.0;
    report.push(CheckRecord::upper(
        "quotient_loss_vertical_invariant",
        (base_q - shift_q).abs() / base_q.abs().max(1e-300),
        1e-9,
    ));

    // Globally rotating the model output leaves the aligned loss unchanged.
    let base_af3 = loss_af3(&net, &s, &batch)?.value;
    let rotated = RotatedOutput {
        base: &net,
        g: random_rotation(space, rng),
    };
    let rot_af3 = crate::objectives::loss_value(&rotated, &s, LossVariant::Af3Align, &batch)?.0;
    report.push(CheckRecord::upper(
        "aligned_loss_rotation_invariant",
        (base_af3 - rot_af3).abs() / base_af3.abs().max(1e-300),
        1e-9,
    ));

    // Projecting the residual can only shrink it.
    let base_c = loss_conventional(&net, &s, &batch)?.value;
    report.push(CheckRecord::upper(
        "quotient_loss_not_larger",
        base_q - base_c,
        1e-12,
    ));

    // A denoiser that reproduces a point-mass target exactly has zero loss.
    let x1 = standard_normal_cloud(space, rng);
    let point_mass = ConstantDenoiser(x1.clone());
    let point_batch = TrainingBatch {
        items: (0..16)
            .map(|i| {
                let eps = standard_normal_tangent(space, rng);
                Ok(BatchItem {
                    x1: x1.clone(),
                    noise: eps,
                    t: (i as f64 + 0.5) / 16.0,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let perfect = crate::objectives::loss_value(&point_mass, &s, LossVariant::Conventional, &point_batch)?.0;
    report.push(CheckRecord::upper(
        "loss_zero_at_perfect_denoiser",
        perfect,
        1e-15,
    ));
    Ok(())
}

fn gradient_check(report: &mut OracleReport, rng: &mut ChaCha12Rng) -> Result<()> {
    let s = Schedule::OneSidedLinear;
    let space = SymmetrySpace::planar_so2();
    let layout = MlpLayout {
        hidden: vec![12, 12],
        time_features: TimeFeatures { frequencies: 3 },
        ..MlpLayout::new(space)
    };
    let mut net = MlpDenoiser::init(space, layout, rng)?;
    let target = |r: &mut ChaCha12Rng| Ok(standard_normal_cloud(space, r));
    let batch = TrainingBatch::draw(space, &target, 8, false, rng)?;

    let out = loss_conventional(&net, &s, &batch)?;
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    let layers = net.n_layers();
    for layer in 0..layers {
        let (rows, cols) = (out.grad.weights[layer].nrows(), out.grad.weights[layer].ncols());
        for probe in 0..5 {
            let r = (probe * 131 + layer * 17) % rows;
            let c = (probe * 37) % cols;
            let analytic = out.grad.weights[layer][(r, c)];
            let orig = *net.weight_mut(layer, r, c);
            *net.weight_mut(layer, r, c) = orig + h;
            let up = loss_conventional(&net, &s, &batch)?.value;
            *net.weight_mut(layer, r, c) = orig - h;
            let down = loss_conventional(&net, &s, &batch)?.value;
            *net.weight_mut(layer, r, c) = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(1e-6));
        }
    }
    report.push(CheckRecord::upper("backprop_matches_fd", worst, 1e-5));
    Ok(())
}

fn sampler_checks(report: &mut OracleReport) -> Result<()> {
    let s = Schedule::OneSidedLinear;
    let space = shape_space(5);
    let den = AnalyticGaussianDenoiser::new(1.0, s.clone())?;

    // SDE with zero noise is bitwise the ODE.
    let ode_cfg = SamplerConfig::ode(Variant::Quotient, 60, 41);
    let mut sde_cfg = SamplerConfig::sde(Variant::Quotient, 60, 41);
    sde_cfg.noise_scale = 0.0;
    let mut r1 = ChaCha12Rng::seed_from_u64(7);
    let x0 = standard_normal_cloud(space, &mut r1);
    let mut r2 = r1.clone();
    let ode = sample(&ode_cfg, space, &den, &s, Some(x0.clone()), &mut r1)?;
    let sde = sample(&sde_cfg, space, &den, &s, Some(x0.clone()), &mut r2)?;
    let mut gap: f64 = 0.0;
    for (a, b) in ode.states.iter().zip(&sde.states) {
        for (p, q) in a.coords().iter().zip(b.coords()) {
            gap = gap.max((p - q).abs());
        }
    }
    report.push(CheckRecord::upper("sde_zero_noise_is_ode", gap, 0.0));

    // Quotient steps carry no angular momentum, and the quotient ODE never
    // rotates the frame end to end.
    let sde_full = SamplerConfig::sde(Variant::Quotient, 100, 42);
    let mut r3 = ChaCha12Rng::seed_from_u64(11);
    let traj = sample(&sde_full, space, &den, &s, None, &mut r3)?;
    let max_ang = traj
        .steps
        .iter()
        .fold(0.0_f64, |acc, d| acc.max(d.ang_mom_norm));
    report.push(CheckRecord::upper(
        "quotient_steps_angular_momentum_free",
        max_ang,
        1e-9,
    ));

    let mut max_angle: f64 = 0.0;
    for seed in 0..3 {
        let cfg = SamplerConfig::ode(Variant::Quotient, 100, seed);
        let mut r = ChaCha12Rng::seed_from_u64(100 + seed);
        let traj = sample(&cfg, space, &den, &s, None, &mut r)?;
        let a = kabsch_align(&traj.states[0], traj.final_state(), KABSCH_EPS)?;
        max_angle = max_angle.max(rotation_angle(&a.rotation));
    }
    report.push(CheckRecord::upper(
        "quotient_ode_freezes_orientation",
        max_angle,
        1e-5,
    ));

    // Same config, same seed: identical output bytes.
    let cfg = SamplerConfig::sde(Variant::Conventional, 50, 9);
    let mut ra = ChaCha12Rng::seed_from_u64(33);
    let mut rb = ChaCha12Rng::seed_from_u64(33);
    let ta = sample(&cfg, space, &den, &s, None, &mut ra)?;
    let tb = sample(&cfg, space, &den, &s, None, &mut rb)?;
    let mut replay: f64 = 0.0;
    for (p, q) in ta
        .final_state()
        .coords()
        .iter()
        .zip(tb.final_state().coords())
    {
        replay = replay.max((p - q).abs());
    }
    report.push(CheckRecord::upper("sampler_deterministic_replay", replay, 0.0));

    // A radial denoiser makes both variants trace the same path, and the
    // projected path can never be longer.
    let mut route_gap: f64 = 0.0;
    let mut shorter = 0;
    let pairs = 20;
    for seed in 0..pairs {
        let conv = SamplerConfig::ode(Variant::Conventional, 50, seed);
        let quot = SamplerConfig::ode(Variant::Quotient, 50, seed);
        let mut r = ChaCha12Rng::seed_from_u64(500 + seed);
        let x0 = standard_normal_cloud(space, &mut r);
        let tc = sample(&conv, space, &den, &s, Some(x0.clone()), &mut r)?;
        let tq = sample(&quot, space, &den, &s, Some(x0), &mut r)?;
        for (p, q) in tc
            .final_state()
            .coords()
            .iter()
            .zip(tq.final_state().coords())
        {
            route_gap = route_gap.max((p - q).abs());
        }
        if trajectory_length(&tq) <= trajectory_length(&tc) * (1.0 + 1e-9) {
            shorter += 1;
        }
    }
    report.push(CheckRecord::upper(
        "radial_task_routes_agree",
        route_gap,
        1e-10,
    ));
    report.push(CheckRecord::lower(
        "quotient_path_not_longer",
        shorter as f64 / pairs as f64,
        0.95,
    ));
    Ok(())
}

/// Run the full suite. The hook is [`CurvatureHook::Clean`] in production;
/// tests arm it to prove the curvature checks have teeth.
pub fn run_suite(hook: CurvatureHook) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed);
    projection_checks(&mut report, &mut rng)?;
    curvature_checks(&mut report, hook, &mut rng)?;
    equivariance_checks(&mut report, hook, &mut rng)?;
    schedule_checks(&mut report, &mut rng)?;
    alignment_checks(&mut report, &mut rng)?;
    loss_checks(&mut report, &mut rng)?;
    gradient_check(&mut report, &mut rng)?;
    sampler_checks(&mut report)?;
    Ok(report)
}

/// Command entry: run the suite, write `oracle_report.json` and a run record,
/// return the report. The caller maps failures to a nonzero exit code.
pub fn cmd_verify(out_dir: &Path, seed: u64, config_text: &str) -> Result<OracleReport> {
    let mut writer = RunWriter::create(out_dir, "verify", seed, config_text)?;
    let report = run_suite(CurvatureHook::Clean)?;
    report.write(&writer.path("oracle_report.json"))?;
    writer.track("oracle_report.json")?;
    writer.metric("checks_total", report.checks.len());
    writer.metric(
        "checks_failed",
        report.failed().iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
    );
    writer.finish()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes_and_is_large_enough() {
        let report = run_suite(CurvatureHook::Clean).unwrap();
        assert!(
            report.checks.len() >= 20,
            "only {} checks",
            report.checks.len()
        );
        let failed: Vec<_> = report.failed().iter().map(|c| c.name.clone()).collect();
        assert!(failed.is_empty(), "failed checks: {failed:?}");
    }

    #[test]
    fn sign_flip_hook_fails_curvature_checks() {
        let report = run_suite(CurvatureHook::FlipSign).unwrap();
        let failed: Vec<_> = report.failed().iter().map(|c| c.name.clone()).collect();
        assert!(!failed.is_empty());
        assert!(
            failed.iter().all(|n| n.contains("curvature")),
            "non-curvature check failed under the curvature hook: {failed:?}"
        );
        assert!(failed.iter().any(|n| n == "curvature_matches_fd_gradient"));
        assert!(failed.iter().any(|n| n == "curvature_planar_closed_form"));
    }

    #[test]
    fn cmd_verify_writes_report_and_record() {
        let dir = tempfile::tempdir().unwrap();
        let report = cmd_verify(dir.path(), 0, "").unwrap();
        assert!(report.all_pass());
        let text = std::fs::read_to_string(dir.path().join("oracle_report.json")).unwrap();
        assert!(text.contains("projection_idempotent"));
        assert!(dir.path().join("run_record.json").exists());
    }
}

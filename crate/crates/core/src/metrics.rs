//! Independent oracles and statistical metrics.
//!
//! Everything in this module is deliberately written from scratch against the
//! mathematical definitions: finite differences instead of the closed-form
//! curvature, kernel-weighted Monte-Carlo instead of analytic conditional
//! expectations, random search instead of the SVD alignment. These routines
//! exist to cross-examine the rest of the crate, so they must not share code
//! with the modules they check beyond elementary linear algebra.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{GroupElement, PointCloud, SpaceKind, SymmetrySpace, TangentVector};
use crate::samplers::Trajectory;
use crate::schedule::Schedule;

/// Labeled homogeneous collection of clouds.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub label: String,
    pub clouds: Vec<PointCloud>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, clouds: Vec<PointCloud>) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::InvalidInput("sample set must be nonempty".into()));
        }
        let len = clouds[0].coords().len();
        if clouds.iter().any(|c| c.coords().len() != len) {
            return Err(Error::ShapeMismatch(
                "sample set clouds must share one shape".into(),
            ));
        }
        Ok(SampleSet {
            label: label.into(),
            clouds,
        })
    }

    /// Raw coordinate vectors, one per cloud.
    pub fn flattened(&self) -> Vec<Vec<f64>> {
        self.clouds.iter().map(|c| c.coords().to_vec()).collect()
    }

    /// Rotation-invariant descriptors, one per cloud.
    pub fn descriptors(&self) -> Result<Vec<Vec<f64>>> {
        self.clouds.iter().map(shape_descriptor).collect()
    }

    /// Euclidean norm of each cloud (the radius for single planar points).
    pub fn norms(&self) -> Vec<f64> {
        self.clouds.iter().map(|c| c.norm()).collect()
    }
}

// ---------------------------------------------------------------------------
// finite-difference curvature oracle

/// Allowed central-difference step range.
pub const FD_STEP_RANGE: (f64, f64) = (1e-7, 1e-3);

fn gram_3x3(coords: &[f64]) -> Matrix3<f64> {
    // K = sum_n |p|^2 I - p p^T, assembled directly from raw coordinates
    let mut k = Matrix3::zeros();
    for p in coords.chunks_exact(3) {
        let v = Vector3::new(p[0], p[1], p[2]);
        k += Matrix3::identity() * v.norm_squared() - v * v.transpose();
    }
    k
}

fn neg_half_logdet(space: SymmetrySpace, coords: &[f64]) -> Result<f64> {
    match space.kind() {
        SpaceKind::PlanarRotation => {
            let n2 = coords[0] * coords[0] + coords[1] * coords[1];
            if n2 <= 1e-18 {
                return Err(Error::Degenerate("point at the origin".into()));
            }
            Ok(-0.5 * n2.ln())
        }
        SpaceKind::ShapeSpace => {
            let k = gram_3x3(coords);
            let eig = k.symmetric_eigenvalues();
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            if min <= 1e-6 * k.trace() {
                return Err(Error::Degenerate(format!(
                    "orbit-degenerate cloud (lambda_min {min:.3e})"
                )));
            }
            Ok(-0.5 * k.determinant().ln())
        }
    }
}

/// Central-difference gradient of -1/2 log det K (3-d clouds) or of
/// -1/2 log |x|^2 (planar), per ambient coordinate.
pub fn fd_logdet_grad(x: &PointCloud, step: f64) -> Result<TangentVector> {
    if !(step >= FD_STEP_RANGE.0 && step <= FD_STEP_RANGE.1) {
        return Err(Error::OutOfRange(format!(
            "fd step {step} outside [{:.0e}, {:.0e}]",
            FD_STEP_RANGE.0, FD_STEP_RANGE.1
        )));
    }
    let space = x.space();
    neg_half_logdet(space, x.coords())?;
    let mut coords = x.coords().to_vec();
    let mut grad = Vec::with_capacity(coords.len());
    for i in 0..coords.len() {
        let orig = coords[i];
        coords[i] = orig + step;
        let fp = neg_half_logdet(space, &coords)?;
        coords[i] = orig - step;
        let fm = neg_half_logdet(space, &coords)?;
        coords[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    TangentVector::from_components(space, grad)
}

// ---------------------------------------------------------------------------
// Monte-Carlo conditional expectation

/// Default kernel bandwidth at time t: 0.1 * alpha_hat(t) * sqrt(ambient dim).
pub fn default_bandwidth(s: &Schedule, t: f64, space: SymmetrySpace) -> Result<f64> {
    let c = s.coeffs(t)?;
    Ok(0.1 * c.alpha_hat.max(1e-4) * (space.coord_len() as f64).sqrt())
}

const BOOTSTRAP_RESAMPLES: usize = 100;
const MIN_EFFECTIVE_SAMPLES: f64 = 100.0;

fn centered_normal_raw<R: Rng>(space: SymmetrySpace, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..space.coord_len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    if space.kind() == SpaceKind::ShapeSpace {
        let n = space.n_points() as f64;
        let mut mean = [0.0f64; 3];
        for p in v.chunks_exact(3) {
            mean[0] += p[0];
            mean[1] += p[1];
            mean[2] += p[2];
        }
        for m in &mut mean {
            *m /= n;
        }
        for p in v.chunks_exact_mut(3) {
            p[0] -= mean[0];
            p[1] -= mean[1];
            p[2] -= mean[2];
        }
    }
    v
}

fn weighted_mean(samples: &[Vec<f64>], weights: &[f64], idx: Option<&[usize]>) -> Vec<f64> {
    let dim = samples[0].len();
    let mut acc = vec![0.0; dim];
    let mut wsum = 0.0;
    let mut add = |i: usize| {
        let w = weights[i];
        wsum += w;
        for (a, v) in acc.iter_mut().zip(&samples[i]) {
            *a += w * v;
        }
    };
    match idx {
        Some(ids) => ids.iter().for_each(|&i| add(i)),
        None => (0..samples.len()).for_each(&mut add),
    }
    if wsum > 0.0 {
        for a in &mut acc {
            *a /= wsum;
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TargetPose {
    AsDrawn,
    AlignedToQuery,
}

fn mc_conditional_impl<F>(
    target: &F,
    s: &Schedule,
    x_t: &PointCloud,
    t: f64,
    n: usize,
    bandwidth: f64,
    pose: TargetPose,
    rng: &mut ChaCha12Rng,
) -> Result<(PointCloud, f64)>
where
    F: Fn(&mut ChaCha12Rng) -> Result<PointCloud>,
{
    if n < 10_000 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 10000 draws, got {n}"
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::OutOfRange("bandwidth must be positive".into()));
    }
    let space = x_t.space();
    let c = s.coeffs(t)?;
    let query = x_t.coords();
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut logw: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = target(rng)?;
        if x1.coords().len() != query.len() {
            return Err(Error::ShapeMismatch(
                "target sample does not match query shape".into(),
            ));
        }
        let eps = centered_normal_raw(space, rng);
        let mut d2 = 0.0;
        for ((x1i, ei), qi) in x1.coords().iter().zip(&eps).zip(query) {
            let xt_i = c.alpha_hat * ei + c.beta * x1i;
            d2 += (xt_i - qi) * (xt_i - qi);
        }
        logw.push(-d2 / (2.0 * bandwidth * bandwidth));
        let kept = match pose {
            TargetPose::AsDrawn => x1.coords().to_vec(),
            TargetPose::AlignedToQuery => align_coords(x1.coords(), query, space).0,
        };
        samples.push(kept);
    }
    let max_lw = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|lw| (lw - max_lw).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    let w2sum: f64 = weights.iter().map(|w| w * w).sum();
    let ess = wsum * wsum / w2sum.max(f64::MIN_POSITIVE);
    if ess < MIN_EFFECTIVE_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "effective sample size {ess:.1} < {MIN_EFFECTIVE_SAMPLES} (narrow bandwidth?)"
        )));
    }
    let estimate = weighted_mean(&samples, &weights, None);
    // bootstrap the weighted mean to get a standard error
    let dim = estimate.len();
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut idx = vec![0usize; n];
    for b in 0..BOOTSTRAP_RESAMPLES {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        let est = weighted_mean(&samples, &weights, Some(&idx));
        // streaming variance over bootstrap replicates
        for j in 0..dim {
            let delta = est[j] - mean[j];
            mean[j] += delta / (b as f64 + 1.0);
            m2[j] += delta * (est[j] - mean[j]);
        }
    }
    let var_sum: f64 = m2.iter().map(|v| v / (BOOTSTRAP_RESAMPLES as f64 - 1.0)).sum();
    let stderr = var_sum.sqrt();
    // the weighted average of CoM-free clouds can drift off-center by rounding
    let cloud = crate::geometry::com_center(space, &estimate)?;
    Ok((cloud, stderr))
}

/// Kernel-weighted estimate of `E[x1 | x_t]` with bootstrap standard error.
///
/// Draws n joint pairs (x1, x_t') from the target and the interpolant, weights
/// them by a Gaussian kernel on `|x_t' - x_t|`, and returns the weighted mean.
/// The standard error is the norm of the per-coordinate bootstrap deviations
/// (100 resamples).
pub fn mc_conditional_expectation<F>(
    target: &F,
    s: &Schedule,
    x_t: &PointCloud,
    t: f64,
    n: usize,
    bandwidth: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(PointCloud, f64)>
where
    F: Fn(&mut ChaCha12Rng) -> Result<PointCloud>,
{
    mc_conditional_impl(target, s, x_t, t, n, bandwidth, TargetPose::AsDrawn, rng)
}

/// As [`mc_conditional_expectation`] but each drawn x1 is first rotated onto
/// the query point: estimates `E[A_{x_t}(x1) | x_t]`.
pub fn mc_aligned_conditional_expectation<F>(
    target: &F,
    s: &Schedule,
    x_t: &PointCloud,
    t: f64,
    n: usize,
    bandwidth: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(PointCloud, f64)>
where
    F: Fn(&mut ChaCha12Rng) -> Result<PointCloud>,
{
    mc_conditional_impl(
        target,
        s,
        x_t,
        t,
        n,
        bandwidth,
        TargetPose::AlignedToQuery,
        rng,
    )
}

// ---------------------------------------------------------------------------
// rotation search and alignment (local implementations)

fn random_rotation_matrix<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    // uniform via normalized quaternion
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn residual_after(rot: &Matrix3<f64>, x: &[f64], y: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for (p, q) in x.chunks_exact(3).zip(y.chunks_exact(3)) {
        let v = rot * Vector3::new(p[0], p[1], p[2]);
        r2 += (v.x - q[0]).powi(2) + (v.y - q[1]).powi(2) + (v.z - q[2]).powi(2);
    }
    r2.sqrt()
}

/// Best of `trials` uniformly random rotations (plus the identity) by the
/// residual `|g x - y|`. A slow, assumption-free floor for alignment quality.
pub fn brute_force_best_rotation<R: Rng>(
    x: &PointCloud,
    y: &PointCloud,
    trials: usize,
    rng: &mut R,
) -> Result<(GroupElement, f64)> {
    if trials < 1 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    if x.coords().len() != y.coords().len() || x.dim() != y.dim() {
        return Err(Error::ShapeMismatch("clouds must match in shape".into()));
    }
    match x.dim() {
        2 => {
            let (px, py) = (x.coords(), y.coords());
            let resid = |th: f64| {
                let (s, c) = th.sin_cos();
                let rx = c * px[0] - s * px[1];
                let ry = s * px[0] + c * px[1];
                ((rx - py[0]).powi(2) + (ry - py[1]).powi(2)).sqrt()
            };
            let mut best_th = 0.0;
            let mut best = resid(0.0);
            for _ in 0..trials {
                let th = rng.random::<f64>() * std::f64::consts::TAU;
                let r = resid(th);
                if r < best {
                    best = r;
                    best_th = th;
                }
            }
            let (s, c) = best_th.sin_cos();
            Ok((GroupElement::Planar(Matrix2::new(c, -s, s, c)), best))
        }
        3 => {
            let mut best_rot = Matrix3::identity();
            let mut best = residual_after(&best_rot, x.coords(), y.coords());
            for _ in 0..trials {
                let rot = random_rotation_matrix(rng);
                let r = residual_after(&rot, x.coords(), y.coords());
                if r < best {
                    best = r;
                    best_rot = rot;
                }
            }
            Ok((GroupElement::Spatial(best_rot), best))
        }
        d => Err(Error::InvalidInput(format!("unsupported dimension {d}"))),
    }
}

/// Rotate `x` onto `y` by the optimal rotation; returns the rotated
/// coordinates, the rotation angle, and an ambiguity flag. Local SVD route,
/// independent of the alignment used by the training losses.
fn align_coords(x: &[f64], y: &[f64], space: SymmetrySpace) -> (Vec<f64>, f64, bool) {
    match space.kind() {
        SpaceKind::PlanarRotation => {
            let dot = x[0] * y[0] + x[1] * y[1];
            let cross = x[0] * y[1] - x[1] * y[0];
            let h = (dot * dot + cross * cross).sqrt();
            let nx = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let ny = (y[0] * y[0] + y[1] * y[1]).sqrt();
            if h <= 1e-12 * (nx * ny).max(f64::MIN_POSITIVE) {
                return (x.to_vec(), 0.0, true);
            }
            let (c, s) = (dot / h, cross / h);
            (
                vec![c * x[0] - s * x[1], s * x[0] + c * x[1]],
                s.atan2(c).abs(),
                false,
            )
        }
        SpaceKind::ShapeSpace => {
            let mut hmat = Matrix3::zeros();
            for (p, q) in x.chunks_exact(3).zip(y.chunks_exact(3)) {
                hmat += Vector3::new(q[0], q[1], q[2]) * Vector3::new(p[0], p[1], p[2]).transpose();
            }
            let svd = hmat.svd(true, true);
            let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
            let sv = svd.singular_values;
            let det = (u * v_t).determinant();
            let mut d = Matrix3::identity();
            if det < 0.0 {
                d[(2, 2)] = -1.0;
            }
            let rot = u * d * v_t;
            let scale = sv[0].max(f64::MIN_POSITIVE);
            let ambiguous = if det < 0.0 {
                sv[1] - sv[2] <= 1e-9 * scale
            } else {
                sv[1] + sv[2] <= 1e-9 * scale
            };
            let mut out = Vec::with_capacity(x.len());
            for p in x.chunks_exact(3) {
                let v = rot * Vector3::new(p[0], p[1], p[2]);
                out.extend_from_slice(&[v.x, v.y, v.z]);
            }
            let angle = ((rot.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            (out, angle, ambiguous)
        }
    }
}

// ---------------------------------------------------------------------------
// distributional statistics

fn check_feature_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("feature sets must be nonempty".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::ShapeMismatch(
            "feature vectors must share one dimension".into(),
        ));
    }
    Ok(dim)
}

fn euclid(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance `2 E|a-b| - E|a-a'| - E|b-b'|` between two feature sets.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_feature_sets(a, b)?;
    let mean_cross = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in p {
            for y in q {
                s += euclid(x, y);
            }
        }
        s / (p.len() * q.len()) as f64
    };
    let mean_within = |p: &[Vec<f64>]| {
        if p.len() < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                s += euclid(&p[i], &p[j]);
            }
        }
        2.0 * s / (p.len() * p.len()) as f64
    };
    Ok(2.0 * mean_cross(a, b) - mean_within(a) - mean_within(b))
}

/// Observed energy distance plus its permutation null distribution
/// (`n_perms` random relabelings of the pooled samples).
///
/// Precomputes the pooled pairwise-distance matrix, so memory grows as
/// `(|a|+|b|)^2` doubles; fine for the few-thousand-sample sets used here.
pub fn energy_distance_permutation<R: Rng>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_perms: usize,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    check_feature_sets(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let total = na + nb;
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(|v| v.as_slice()).collect();
    let mut dist = vec![0.0f64; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let d = euclid(pooled[i], pooled[j]);
            dist[i * total + j] = d;
            dist[j * total + i] = d;
        }
    }
    let stat_for = |ids: &[usize]| {
        let (first, second) = ids.split_at(na);
        let mut cross = 0.0;
        for &i in first {
            for &j in second {
                cross += dist[i * total + j];
            }
        }
        let mut wa = 0.0;
        for (k, &i) in first.iter().enumerate() {
            for &j in &first[(k + 1)..] {
                wa += dist[i * total + j];
            }
        }
        let mut wb = 0.0;
        for (k, &i) in second.iter().enumerate() {
            for &j in &second[(k + 1)..] {
                wb += dist[i * total + j];
            }
        }
        2.0 * cross / (na * nb) as f64
            - 2.0 * wa / (na * na) as f64
            - 2.0 * wb / (nb * nb) as f64
    };
    let ids: Vec<usize> = (0..total).collect();
    let observed = stat_for(&ids);
    let mut null = Vec::with_capacity(n_perms);
    let mut shuffled = ids;
    for _ in 0..n_perms {
        // Fisher-Yates
        for i in (1..total).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        null.push(stat_for(&shuffled));
    }
    Ok((observed, null))
}

/// Empirical quantile by linear interpolation on the sorted copy.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of empty slice".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::OutOfRange(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("ks needs nonempty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let (va, vb) = (sa[i], sb[j]);
        if va <= vb {
            i += 1;
        }
        if vb <= va {
            j += 1;
        }
        let fa = i as f64 / sa.len() as f64;
        let fb = j as f64 / sb.len() as f64;
        sup = sup.max((fa - fb).abs());
    }
    Ok(sup)
}

/// One-sample Kolmogorov-Smirnov statistic `sup |F_n - F|` against an exact
/// CDF, taking both one-sided gaps at every jump of the empirical CDF.
pub fn ks_to_cdf<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::InvalidInput("ks needs a nonempty sample".into()));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, v) in s.iter().enumerate() {
        let f = cdf(*v);
        sup = sup
            .max(((i + 1) as f64 / n - f).abs())
            .max((f - i as f64 / n).abs());
    }
    Ok(sup)
}

/// Rotation- and relabeling-invariant shape fingerprint: sorted pairwise
/// distances for spatial clouds, the radius for the single planar point
/// (rotations about the origin preserve exactly that).
pub fn shape_descriptor(x: &PointCloud) -> Result<Vec<f64>> {
    if x.dim() == 2 {
        return Ok(vec![x.point2().norm()]);
    }
    let n = x.n_points();
    if n < 2 {
        return Err(Error::InvalidInput(
            "descriptor needs at least two points".into(),
        ));
    }
    let d = x.dim();
    let coords = x.coords();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = coords[i * d + k] - coords[j * d + k];
                s += diff * diff;
            }
            out.push(s.sqrt());
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Net orientation change of a trajectory: optimal-rotation angle between the
/// first and the last state. The flag reports an ambiguous alignment.
pub fn orientation_drift(traj: &Trajectory) -> Result<(f64, bool)> {
    if traj.states.len() < 2 {
        return Err(Error::InvalidInput(
            "orientation drift needs at least two states".into(),
        ));
    }
    let first = &traj.states[0];
    let last = traj.states.last().unwrap();
    let (_, angle, ambiguous) = align_coords(first.coords(), last.coords(), first.space());
    Ok((angle, ambiguous))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticGaussianDenoiser, Denoiser};
    use crate::draws::{random_rotation, standard_normal_cloud};
    use crate::geometry::{apply_group, com_center, mean_curvature};
    use crate::objectives::{kabsch_align, KABSCH_EPS};
    use crate::samplers::{sample, SamplerConfig, Variant};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn space3() -> SymmetrySpace {
        SymmetrySpace::shape_so3(3).unwrap()
    }

    #[test]
    fn fd_matches_closed_form_curvature_on_random_clouds() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 100 {
            let x = standard_normal_cloud(space3(), &mut rng);
            let Ok(h) = mean_curvature(space3(), &x) else {
                continue;
            };
            let fd = fd_logdet_grad(&x, 1e-5).unwrap();
            let scale = h.norm();
            let err = fd.sub(&h).norm();
            assert!(err <= 1e-5 * scale, "rel err {}", err / scale);
            checked += 1;
        }
    }

    #[test]
    fn fd_planar_case_is_minus_x_over_norm_squared() {
        let space = SymmetrySpace::planar_so2();
        let x = PointCloud::from_coords(space, vec![2.0, 0.0]).unwrap();
        let fd = fd_logdet_grad(&x, 1e-5).unwrap();
        assert_relative_eq!(fd.components()[0], -0.5, epsilon = 1e-8);
        assert_relative_eq!(fd.components()[1], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn fd_scales_inversely_with_cloud_size() {
        let x = com_center(
            space3(),
            &[0.9, 0.1, -0.4, -0.2, 0.8, 0.6, -0.7, -0.9, -0.2],
        )
        .unwrap();
        let doubled =
            PointCloud::from_coords(space3(), x.coords().iter().map(|c| 2.0 * c).collect())
                .unwrap();
        let g1 = fd_logdet_grad(&x, 1e-5).unwrap();
        let g2 = fd_logdet_grad(&doubled, 1e-5).unwrap();
        assert_relative_eq!(g2.norm(), g1.norm() / 2.0, max_relative = 1e-6);
    }

    #[test]
    fn fd_rejects_bad_steps_and_degenerate_clouds() {
        let x = standard_normal_cloud(space3(), &mut ChaCha12Rng::seed_from_u64(3));
        assert!(fd_logdet_grad(&x, 1e-8).is_err());
        assert!(fd_logdet_grad(&x, 1e-2).is_err());
        let collinear = com_center(
            space3(),
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            fd_logdet_grad(&collinear, 1e-5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn mc_gaussian_target_matches_analytic_denoiser() {
        // Planar case: kernel conditioning degrades exponentially with ambient
        // dimension, so the closed-form comparison lives where the estimator
        // is sharp. The bandwidth is chosen so the kernel-smoothing bias
        // (a pull toward the marginal mean of order bw^2) stays well below the
        // Monte-Carlo standard error.
        let space = SymmetrySpace::planar_so2();
        let s = Schedule::OneSidedLinear;
        let sigma = 1.2;
        let model = AnalyticGaussianDenoiser::new(sigma, s).unwrap();
        let target = move |r: &mut ChaCha12Rng| -> Result<PointCloud> {
            let raw = standard_normal_cloud(space, r);
            PointCloud::from_coords(space, raw.coords().iter().map(|v| sigma * v).collect())
        };
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let t = 0.5;
        let x_t = PointCloud::from_coords(space, vec![0.4, -0.3]).unwrap();
        let (est, stderr) =
            mc_conditional_expectation(&target, &s, &x_t, t, 200_000, 0.12, &mut rng).unwrap();
        let exact = model.denoise(&x_t, t).unwrap();
        let err = euclid(est.coords(), exact.coords());
        assert!(
            err <= 3.0 * stderr,
            "mc estimate off by {err} with stderr {stderr}"
        );
    }

    fn diatomic_target(space: SymmetrySpace) -> impl Fn(&mut ChaCha12Rng) -> Result<PointCloud> {
        move |r: &mut ChaCha12Rng| {
            let g = random_rotation(space, r);
            let base = com_center(space, &[0.5, 0.0, 0.0, -0.5, 0.0, 0.0])?;
            apply_group(&g, &base)
        }
    }

    #[test]
    fn mc_unaligned_diatomic_bond_contracts() {
        let space = SymmetrySpace::shape_so3(2).unwrap();
        let target = diatomic_target(space);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let t = 0.5;
        let x_t = {
            let g = random_rotation(space, &mut rng);
            let base = com_center(space, &[0.5, 0.0, 0.0, -0.5, 0.0, 0.0]).unwrap();
            let oriented = apply_group(&g, &base).unwrap();
            let noise = centered_normal_raw(space, &mut rng);
            let c = Schedule::OneSidedLinear.coeffs(t).unwrap();
            let coords: Vec<f64> = oriented
                .coords()
                .iter()
                .zip(&noise)
                .map(|(x1, e)| c.beta * x1 + c.alpha_hat * e)
                .collect();
            com_center(space, &coords).unwrap()
        };
        let s = Schedule::OneSidedLinear;
        let bw = default_bandwidth(&s, t, space).unwrap();
        let (est, _) =
            mc_conditional_expectation(&target, &s, &x_t, t, 100_000, bw, &mut rng).unwrap();
        let bond = euclid(
            &est.coords()[0..3],
            &est.coords()[3..6],
        );
        assert!(
            bond <= 0.99,
            "unaligned posterior bond should contract, got {bond}"
        );
        let mut rng2 = ChaCha12Rng::seed_from_u64(8);
        let (est_aligned, _) =
            mc_aligned_conditional_expectation(&target, &s, &x_t, t, 100_000, bw, &mut rng2)
                .unwrap();
        let bond_aligned = euclid(&est_aligned.coords()[0..3], &est_aligned.coords()[3..6]);
        assert!(
            (bond_aligned - 1.0).abs() <= 1e-2,
            "aligned posterior keeps bond length, got {bond_aligned}"
        );
    }

    #[test]
    fn mc_narrow_bandwidth_reports_insufficient_samples() {
        let space = space3();
        let s = Schedule::OneSidedLinear;
        let target =
            |r: &mut ChaCha12Rng| -> Result<PointCloud> { Ok(standard_normal_cloud(space, r)) };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x_t = standard_normal_cloud(space, &mut rng);
        match mc_conditional_expectation(&target, &s, &x_t, 0.5, 10_000, 1e-6, &mut rng) {
            Err(Error::InsufficientSamples(_)) => {}
            other => panic!("expected insufficient samples, got {other:?}"),
        }
        match mc_conditional_expectation(&target, &s, &x_t, 0.5, 100, 0.5, &mut rng) {
            Err(Error::InsufficientSamples(_)) => {}
            other => panic!("expected n too small, got {other:?}"),
        }
    }

    #[test]
    fn brute_force_identity_and_dominance() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = standard_normal_cloud(space3(), &mut rng);
        let (_, r0) = brute_force_best_rotation(&x, &x, 10, &mut rng).unwrap();
        assert_eq!(r0, 0.0, "identity candidate gives zero residual on y = x");
        for _ in 0..10 {
            let y = standard_normal_cloud(space3(), &mut rng);
            let (_, brute) = brute_force_best_rotation(&x, &y, 200, &mut rng).unwrap();
            let aligned = kabsch_align(&x, &y, KABSCH_EPS).unwrap().aligned;
            let opt = euclid(aligned.coords(), y.coords());
            assert!(brute >= opt - 1e-12, "brute {brute} below optimum {opt}");
        }
    }

    #[test]
    fn brute_force_converges_to_alignment_optimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..3 {
            let x = standard_normal_cloud(space3(), &mut rng);
            let y = standard_normal_cloud(space3(), &mut rng);
            let (_, brute) = brute_force_best_rotation(&x, &y, 100_000, &mut rng).unwrap();
            let aligned = kabsch_align(&x, &y, KABSCH_EPS).unwrap().aligned;
            let opt = euclid(aligned.coords(), y.coords());
            assert!(
                brute - opt <= 0.02 * y.norm(),
                "gap {} above 2% of |y| {}",
                brute - opt,
                y.norm()
            );
        }
    }

    #[test]
    fn energy_distance_point_masses_and_self() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0]];
        assert_relative_eq!(energy_distance(&a, &b).unwrap(), 10.0, epsilon = 1e-12);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let all: Vec<Vec<f64>> = (0..400)
            .map(|_| standard_normal_cloud(space3(), &mut rng).coords().to_vec())
            .collect();
        let (first, second) = all.split_at(200);
        let e = energy_distance(first, second).unwrap();
        let (_, null) =
            energy_distance_permutation(first, second, 200, &mut rng).unwrap();
        let q95 = quantile(&null, 0.95).unwrap();
        assert!(
            e <= q95,
            "same-distribution split {e} above permutation 95th {q95}"
        );
    }

    #[test]
    fn energy_distance_same_gaussian_below_null_quantile() {
        let mut rng = ChaCha12Rng::seed_from_u64(2026);
        let draw = |rng: &mut ChaCha12Rng| -> Vec<Vec<f64>> {
            (0..2000)
                .map(|_| standard_normal_cloud(space3(), rng).coords().to_vec())
                .collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let (e, null) = energy_distance_permutation(&a, &b, 200, &mut rng).unwrap();
        let q95 = quantile(&null, 0.95).unwrap();
        assert!(e <= q95, "independent same-law draws: {e} vs 95th {q95}");
    }

    #[test]
    fn ks_statistic_known_cases() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0], &[1.0]).unwrap(), 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let draw = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..5000)
                .map(|_| {
                    let mode = if rng.random::<f64>() < 0.5 { 1.0 } else { 2.5 };
                    mode + 0.15 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        };
        let ks = ks_statistic(&draw(&mut rng), &draw(&mut rng)).unwrap();
        assert!(ks <= 0.05, "same-mixture draws KS {ks}");
    }

    #[test]
    fn ks_to_cdf_known_cases() {
        // empirical {0.5} vs U[0,1]: gaps are |1 - 0.5| and |0.5 - 0|
        let ks = ks_to_cdf(&[0.5], |v| v.clamp(0.0, 1.0)).unwrap();
        assert!((ks - 0.5).abs() < 1e-15);
        // evenly spread sample vs its own law stays near the 1/sqrt(n) scale
        let n = 4000;
        let sample: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let ks = ks_to_cdf(&sample, |v| v.clamp(0.0, 1.0)).unwrap();
        assert!(ks <= 1.0 / n as f64 + 1e-12, "{ks}");
        // a uniform random draw should pass a 5% band easily
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let sample: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let ks = ks_to_cdf(&sample, |v| v.clamp(0.0, 1.0)).unwrap();
        assert!(ks <= 0.03, "{ks}");
    }

    #[test]
    fn descriptor_invariance_and_triangle() {
        let space = space3();
        // equilateral triangle with unit sides, CoM at the origin
        let h = 1.0 / 3.0f64.sqrt();
        let raw = [
            h, 0.0, 0.0,
            -h / 2.0, 0.5, 0.0,
            -h / 2.0, -0.5, 0.0,
        ];
        let x = com_center(space, &raw).unwrap();
        let d = shape_descriptor(&x).unwrap();
        for v in &d {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let y = standard_normal_cloud(space, &mut rng);
        let g = random_rotation(space, &mut rng);
        let dy = shape_descriptor(&y).unwrap();
        let dgy = shape_descriptor(&apply_group(&g, &y).unwrap()).unwrap();
        for (p, q) in dy.iter().zip(&dgy) {
            assert!((p - q).abs() <= 1e-12);
        }
        let z = standard_normal_cloud(space, &mut rng);
        let dz = shape_descriptor(&z).unwrap();
        let diff = euclid(&dy, &dz);
        assert!(diff > 1e-9, "distinct shapes must separate, diff {diff}");
    }

    #[test]
    fn orientation_drift_detects_inserted_rotation() {
        let space = space3();
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let x = standard_normal_cloud(space, &mut rng);
        let constant = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![x.clone(), x.clone()],
            steps: vec![],
        };
        let (angle, _) = orientation_drift(&constant).unwrap();
        assert!(angle <= 1e-12);
        let rotated = apply_group(
            &GroupElement::Spatial(crate::draws::rot_z(0.3)),
            &x,
        )
        .unwrap();
        let turned = Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![x.clone(), x.clone(), rotated],
            steps: vec![],
        };
        let (angle, ambiguous) = orientation_drift(&turned).unwrap();
        assert!(angle >= 0.3 - 1e-6, "drift {angle}");
        assert!(!ambiguous);
    }

    #[test]
    fn orientation_drift_stays_small_on_quotient_ode() {
        let space = space3();
        let s = Schedule::OneSidedLinear;
        let model = AnalyticGaussianDenoiser::new(1.0, s).unwrap();
        let cfg = SamplerConfig::ode(Variant::Quotient, 200, 6);
        for i in 0..5 {
            let mut rng = ChaCha12Rng::seed_from_u64(100 + i);
            let traj = sample(&cfg, space, &model, &s, None, &mut rng).unwrap();
            let (angle, _) = orientation_drift(&traj).unwrap();
            assert!(angle <= 1e-5, "trajectory {i}: drift {angle}");
        }
    }

    #[test]
    fn mc_stderr_shrinks_with_sample_size() {
        let space = SymmetrySpace::planar_so2();
        let s = Schedule::OneSidedLinear;
        let target =
            |r: &mut ChaCha12Rng| -> Result<PointCloud> { Ok(standard_normal_cloud(space, r)) };
        let x_t = PointCloud::from_coords(space, vec![0.7, -0.4]).unwrap();
        let bw = 0.3;
        let mut errs = Vec::new();
        for (i, n) in [10_000usize, 40_000, 160_000].into_iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(500 + i as u64);
            let (_, stderr) =
                mc_conditional_expectation(&target, &s, &x_t, 0.5, n, bw, &mut rng).unwrap();
            errs.push(stderr);
        }
        // quadrupling n should halve the stderr, within a factor 1.5
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                ratio >= 2.0 / 1.5 && ratio <= 2.0 * 1.5,
                "stderr ratio {ratio} outside [1.33, 3.0] (errs {errs:?})"
            );
        }
    }
}

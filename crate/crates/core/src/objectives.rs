//! Alignment operator, training losses, and the SGD training loop.
//!
//! Four denoiser losses are provided, differing only in the regression target
//! or the residual metric:
//!
//! - conventional: residual `D(x_t) - x1`;
//! - geodiff_align: residual against `x1` aligned onto `x_t` by the optimal
//!   rotation (Kabsch);
//! - af3_align: residual against `x1` aligned onto the model's own output,
//!   where the alignment reference is evaluated without gradient;
//! - quotient: the conventional residual projected onto the horizontal space
//!   at `x_t` before squaring, so vertical (rotational) error is not penalized.
//!
//! Loss evaluators report the time-weighted value `w(t) (d(t)/alpha_hat)^2 |r|^2`
//! (the weight that makes denoiser regression equivalent to velocity matching).
//! The training loop minimizes the unweighted residual instead: under uniform
//! t-draws the `(d/alpha_hat)^2` factor has heavy tails (1/(1-t)^2 with no
//! clipping allowed), which makes SGD diverge at any useful learning rate. The
//! evaluators stay available for reporting and testing.

use nalgebra::{Matrix2, Matrix3};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::denoiser::{Denoiser, MlpDenoiser, MlpGradient, MlpLayout};
use crate::draws::{random_rotation, standard_normal_tangent};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_group, check_nondegenerate, horizontal_project, GroupElement, PointCloud, SymmetrySpace,
    TangentVector,
};
use crate::schedule::{interpolate, velocity_from_denoiser, Schedule, ALPHA_CLAMP};
use rand::{Rng, SeedableRng};

/// Threshold (relative to the largest singular value) below which the Kabsch
/// problem is reported as near-singular.
pub const KABSCH_EPS: f64 = 1e-8;

/// Number of items processed per parallel chunk during batch evaluation; fixed
/// so the reduction order (and thus the result bits) is independent of the
/// thread count.
const PAR_CHUNK: usize = 16;
/// Column count of one batched denoiser GEMM during training.
const GEMM_CHUNK: usize = 512;

/// Result of aligning one cloud onto another.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// g* x, the input rotated by the optimal rotation.
    pub aligned: PointCloud,
    pub rotation: GroupElement,
    /// True when the optimum was ambiguous (near-singular cross-covariance);
    /// the returned minimizer is then a deterministic representative.
    pub degenerate: bool,
}

/// Rotate `x` by the rotation minimizing `|g x - y|` over the proper rotations.
///
/// For d = 3 this is the Kabsch algorithm: SVD of the cross-covariance
/// `H = sum_n y^(n) x^(n)^T` with the determinant sign correction applied to
/// the smallest singular vector. A singular H (e.g. collinear clouds) leaves
/// part of the rotation undetermined; the SVD's deterministic sign convention
/// picks one minimizer and the result is flagged.
pub fn kabsch_align(x: &PointCloud, y: &PointCloud, eps: f64) -> Result<Alignment> {
    if x.coords().len() != y.coords().len() || x.dim() != y.dim() {
        return Err(Error::ShapeMismatch("alignment needs matching shapes".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::OutOfRange("eps must be non-negative".into()));
    }
    match x.dim() {
        2 => {
            let (p, q) = (x.point2(), y.point2());
            let dot = p.dot(&q);
            let cross = p.x * q.y - p.y * q.x;
            let h = (dot * dot + cross * cross).sqrt();
            let scale = p.norm() * q.norm();
            if h <= eps * scale.max(f64::MIN_POSITIVE) {
                // y (or x) at the origin: every rotation ties; pick identity
                return Ok(Alignment {
                    aligned: x.clone(),
                    rotation: GroupElement::Planar(Matrix2::identity()),
                    degenerate: true,
                });
            }
            let (c, s) = (dot / h, cross / h);
            let rot = Matrix2::new(c, -s, s, c);
            let r = rot * p;
            Ok(Alignment {
                aligned: PointCloud::from_coords(x.space(), vec![r.x, r.y])?,
                rotation: GroupElement::Planar(rot),
                degenerate: false,
            })
        }
        3 => {
            let mut h = Matrix3::zeros();
            for i in 0..x.n_points() {
                h += y.point3(i) * x.point3(i).transpose();
            }
            let svd = h.svd(true, true);
            let u = svd.u.expect("svd with u");
            let v_t = svd.v_t.expect("svd with v_t");
            let sv = svd.singular_values;
            let det_sign = (u * v_t).determinant();
            let mut d = Matrix3::identity();
            if det_sign < 0.0 {
                d[(2, 2)] = -1.0;
            }
            let rot = u * d * v_t;
            // The minimizer is unique iff sigma2 + sigma3 > 0 without the
            // determinant flip, or sigma2 > sigma3 with it; anything else
            // (e.g. a rank-1 H from a diatomic) leaves a continuum of optima.
            let scale = sv[0].max(f64::MIN_POSITIVE);
            let degenerate = if det_sign < 0.0 {
                sv[1] - sv[2] <= eps * scale
            } else {
                sv[1] + sv[2] <= eps * scale
            };
            let mut coords = Vec::with_capacity(x.coords().len());
            for i in 0..x.n_points() {
                let r = rot * x.point3(i);
                coords.extend_from_slice(&[r.x, r.y, r.z]);
            }
            Ok(Alignment {
                aligned: PointCloud::from_coords(x.space(), coords)?,
                rotation: GroupElement::Spatial(rot),
                degenerate,
            })
        }
        d => Err(Error::InvalidInput(format!("unsupported dimension {d}"))),
    }
}

/// Which training loss to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    Conventional,
    GeodiffAlign,
    Af3Align,
    Quotient,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(LossVariant::Conventional),
            "geodiff-align" => Ok(LossVariant::GeodiffAlign),
            "af3-align" => Ok(LossVariant::Af3Align),
            "quotient" => Ok(LossVariant::Quotient),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected conventional, geodiff-align, af3-align or quotient)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Conventional => "conventional",
            LossVariant::GeodiffAlign => "geodiff-align",
            LossVariant::Af3Align => "af3-align",
            LossVariant::Quotient => "quotient",
        }
    }
}

/// One training sample: clean data, prior noise, and the interpolation time.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub x1: PointCloud,
    pub noise: TangentVector,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
}

impl TrainingBatch {
    /// Draw a batch from the target distribution: x1 from `target` (optionally
    /// rotation-augmented), centered normal noise, t uniform on [0, 1).
    pub fn draw<F>(
        space: SymmetrySpace,
        target: &F,
        batch_size: usize,
        augment: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self>
    where
        F: Fn(&mut ChaCha12Rng) -> Result<PointCloud>,
    {
        let mut items = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut x1 = target(rng)?;
            if augment {
                let g = random_rotation(space, rng);
                x1 = apply_group(&g, &x1)?;
            }
            let noise = standard_normal_tangent(space, rng);
            let t = rng.random::<f64>();
            items.push(BatchItem { x1, noise, t });
        }
        Ok(TrainingBatch { items })
    }
}

/// Loss value with gradients and degenerate-sample accounting.
#[derive(Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: MlpGradient,
    /// Items that entered the mean.
    pub used: usize,
    /// Items skipped because x_t was degenerate (quotient variants only).
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Weighting {
    /// w(t) (d/alpha_hat)^2 -- the velocity-equivalent weight used by evaluators.
    Eq5,
    /// Plain unweighted residual -- the training objective.
    Unit,
}

fn time_weight(s: &Schedule, t: f64, weighting: Weighting) -> Result<f64> {
    match weighting {
        Weighting::Unit => Ok(1.0),
        Weighting::Eq5 => {
            let c = s.coeffs(t)?;
            let d = c.dalpha_hat * c.beta - c.alpha_hat * c.dbeta;
            let ah = c.alpha_hat.max(ALPHA_CLAMP);
            Ok(crate::schedule::TRAIN_WEIGHT * (d / ah) * (d / ah))
        }
    }
}

/// The interpolated state an item is evaluated at, or None when the item is
/// skipped as degenerate (quotient variant only: the projection at x_t would
/// not be defined there).
fn item_state(s: &Schedule, variant: LossVariant, item: &BatchItem) -> Result<Option<PointCloud>> {
    let x_t = interpolate(s, &item.noise, &item.x1, item.t)?;
    if matches!(variant, LossVariant::Quotient)
        && check_nondegenerate(x_t.space(), &x_t).is_err()
    {
        return Ok(None);
    }
    Ok(Some(x_t))
}

/// Weighted squared residual of one item given the denoiser output at x_t,
/// and (optionally) the upstream vector for backprop.
fn eval_item_given_d(
    s: &Schedule,
    variant: LossVariant,
    item: &BatchItem,
    x_t: &PointCloud,
    d_out: &PointCloud,
    weighting: Weighting,
    want_upstream: bool,
) -> Result<(f64, Option<TangentVector>)> {
    let w = time_weight(s, item.t, weighting)?;
    let residual = |target: &PointCloud| -> TangentVector {
        d_out.as_tangent().sub(&target.as_tangent())
    };
    let (value_vec, upstream): (TangentVector, Option<TangentVector>) = match variant {
        LossVariant::Conventional => {
            let r = residual(&item.x1);
            (r.clone(), want_upstream.then(|| r.scale(2.0 * w)))
        }
        LossVariant::GeodiffAlign => {
            let target = kabsch_align(&item.x1, &x_t, KABSCH_EPS)?.aligned;
            let r = residual(&target);
            (r.clone(), want_upstream.then(|| r.scale(2.0 * w)))
        }
        LossVariant::Af3Align => {
            // the alignment reference is the model output with no gradient path
            let target = kabsch_align(&item.x1, &d_out, KABSCH_EPS)?.aligned;
            let r = residual(&target);
            (r.clone(), want_upstream.then(|| r.scale(2.0 * w)))
        }
        LossVariant::Quotient => {
            let r = residual(&item.x1);
            let pr = horizontal_project(x_t.space(), x_t, &r)?;
            (pr.clone(), want_upstream.then(|| pr.scale(2.0 * w)))
        }
    };
    let value = w * value_vec.dot(&value_vec);
    Ok((value, upstream))
}

/// Per-item evaluation: weighted squared residual and (optionally) the upstream
/// vector for backprop. Returns None when the item is skipped as degenerate.
fn eval_item<D: Denoiser>(
    model: &D,
    s: &Schedule,
    variant: LossVariant,
    item: &BatchItem,
    weighting: Weighting,
    want_upstream: bool,
) -> Result<Option<(f64, PointCloud, Option<TangentVector>)>> {
    let Some(x_t) = item_state(s, variant, item)? else {
        return Ok(None);
    };
    let d_out = model.denoise(&x_t, item.t)?;
    let (value, upstream) =
        eval_item_given_d(s, variant, item, &x_t, &d_out, weighting, want_upstream)?;
    Ok(Some((value, x_t, upstream)))
}

fn eval_batch_grads(
    net: &MlpDenoiser,
    s: &Schedule,
    variant: LossVariant,
    batch: &TrainingBatch,
    weighting: Weighting,
) -> Result<LossOutput> {
    if batch.items.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    // Fixed-size chunks, evaluated sequentially, each as a handful of GEMMs:
    // the denoiser forward/backward dominates training time and per-sample
    // matrix-vector chains leave most of the machine idle.
    let mut value = 0.0;
    let mut grad = MlpGradient::zeros_like(net);
    let mut used = 0;
    let mut skipped = 0;
    for chunk in batch.items.chunks(GEMM_CHUNK) {
        let mut states = Vec::with_capacity(chunk.len());
        let mut kept_items = Vec::with_capacity(chunk.len());
        for item in chunk {
            match item_state(s, variant, item)? {
                None => skipped += 1,
                Some(x_t) => {
                    states.push((x_t, item.t));
                    kept_items.push(item);
                }
            }
        }
        if kept_items.is_empty() {
            continue;
        }
        let refs: Vec<(&PointCloud, f64)> = states.iter().map(|(x, t)| (x, *t)).collect();
        let (d_outs, acts) = net.denoise_batch(&refs)?;
        let mut upstreams = Vec::with_capacity(kept_items.len());
        for ((item, (x_t, _)), d_out) in kept_items.iter().zip(&states).zip(&d_outs) {
            let (v, upstream) =
                eval_item_given_d(s, variant, item, x_t, d_out, weighting, true)?;
            value += v;
            upstreams.push(upstream.expect("requested upstream"));
            used += 1;
        }
        grad.axpy(1.0, &net.backward_batch(&acts, &upstreams)?);
    }
    if used == 0 {
        return Err(Error::Degenerate(
            "every sample in the batch was degenerate".into(),
        ));
    }
    let inv = 1.0 / used as f64;
    grad.scale(inv);
    Ok(LossOutput {
        value: value * inv,
        grad,
        used,
        skipped,
    })
}

/// Evaluate the loss value only, for any denoiser implementation.
/// Returns (mean weighted loss, items used, items skipped).
pub fn loss_value<D: Denoiser + Sync>(
    model: &D,
    s: &Schedule,
    variant: LossVariant,
    batch: &TrainingBatch,
) -> Result<(f64, usize, usize)> {
    if batch.items.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let partials: Vec<Result<(f64, usize, usize)>> = batch
        .items
        .par_chunks(PAR_CHUNK)
        .map(|chunk| {
            let mut value = 0.0;
            let (mut used, mut skipped) = (0usize, 0usize);
            for item in chunk {
                match eval_item(model, s, variant, item, Weighting::Eq5, false)? {
                    None => skipped += 1,
                    Some((v, _, _)) => {
                        value += v;
                        used += 1;
                    }
                }
            }
            Ok((value, used, skipped))
        })
        .collect();
    let (mut value, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for p in partials {
        let (v, u, sk) = p?;
        value += v;
        used += u;
        skipped += sk;
    }
    if used == 0 {
        return Err(Error::Degenerate(
            "every sample in the batch was degenerate".into(),
        ));
    }
    Ok((value / used as f64, used, skipped))
}

/// `E w (d/alpha_hat)^2 |D(x_t) - x1|^2` with gradients.
pub fn loss_conventional(
    net: &MlpDenoiser,
    s: &Schedule,
    batch: &TrainingBatch,
) -> Result<LossOutput> {
    eval_batch_grads(net, s, LossVariant::Conventional, batch, Weighting::Eq5)
}

/// Conventional loss with x1 rotated onto x_t before the residual.
pub fn loss_geodiff(net: &MlpDenoiser, s: &Schedule, batch: &TrainingBatch) -> Result<LossOutput> {
    eval_batch_grads(net, s, LossVariant::GeodiffAlign, batch, Weighting::Eq5)
}

/// Conventional loss with x1 rotated onto the (gradient-frozen) model output.
pub fn loss_af3(net: &MlpDenoiser, s: &Schedule, batch: &TrainingBatch) -> Result<LossOutput> {
    eval_batch_grads(net, s, LossVariant::Af3Align, batch, Weighting::Eq5)
}

/// `E w (d/alpha_hat)^2 |P_{x_t}(D(x_t) - x1)|^2` with gradients; degenerate
/// x_t samples are skipped and counted.
pub fn loss_quotient(net: &MlpDenoiser, s: &Schedule, batch: &TrainingBatch) -> Result<LossOutput> {
    eval_batch_grads(net, s, LossVariant::Quotient, batch, Weighting::Eq5)
}

/// One sample of the general-schedule (prior, data, noise, time) quadruple.
#[derive(Debug, Clone)]
pub struct GeneralBatchItem {
    pub x0: PointCloud,
    pub x1: PointCloud,
    pub eps: TangentVector,
    pub t: f64,
}

/// Velocity-matching quotient loss for general schedules:
/// `E w(t) |P_{x_t}(v_theta - (alpha' x0 + beta' x1 + gamma' eps))|^2`
/// with x_t = alpha x0 + beta x1 + gamma eps and v_theta from the denoiser.
pub fn loss_quotient_general(
    net: &MlpDenoiser,
    s: &Schedule,
    batch: &[GeneralBatchItem],
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let partials: Vec<Result<(f64, MlpGradient, usize, usize)>> = batch
        .par_chunks(PAR_CHUNK)
        .map(|chunk| {
            let mut value = 0.0;
            let mut grad = MlpGradient::zeros_like(net);
            let (mut used, mut skipped) = (0usize, 0usize);
            for item in chunk {
                match eval_general_item(net, s, item, true)? {
                    None => skipped += 1,
                    Some((v, x_t, upstream)) => {
                        value += v;
                        let g = net.backward(&x_t, item.t, &upstream.unwrap())?;
                        grad.axpy(1.0, &g);
                        used += 1;
                    }
                }
            }
            Ok((value, grad, used, skipped))
        })
        .collect();
    let mut value = 0.0;
    let mut grad = MlpGradient::zeros_like(net);
    let (mut used, mut skipped) = (0usize, 0usize);
    for p in partials {
        let (v, g, u, sk) = p?;
        value += v;
        grad.axpy(1.0, &g);
        used += u;
        skipped += sk;
    }
    if used == 0 {
        return Err(Error::Degenerate(
            "every sample in the batch was degenerate".into(),
        ));
    }
    let inv = 1.0 / used as f64;
    grad.scale(inv);
    Ok(LossOutput {
        value: value * inv,
        grad,
        used,
        skipped,
    })
}

/// Value-only general-schedule quotient loss for any denoiser.
pub fn loss_quotient_general_value<D: Denoiser + Sync>(
    model: &D,
    s: &Schedule,
    batch: &[GeneralBatchItem],
) -> Result<(f64, usize, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (mut value, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for item in batch {
        match eval_general_item(model, s, item, false)? {
            None => skipped += 1,
            Some((v, _, _)) => {
                value += v;
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Degenerate(
            "every sample in the batch was degenerate".into(),
        ));
    }
    Ok((value / used as f64, used, skipped))
}

fn eval_general_item<D: Denoiser>(
    model: &D,
    s: &Schedule,
    item: &GeneralBatchItem,
    want_upstream: bool,
) -> Result<Option<(f64, PointCloud, Option<TangentVector>)>> {
    let t = item.t;
    let (a, b, g) = (s.alpha(t), s.beta(t), s.gamma(t));
    let coords: Vec<f64> = item
        .x0
        .coords()
        .iter()
        .zip(item.x1.coords())
        .zip(item.eps.components())
        .map(|((x0, x1), e)| a * x0 + b * x1 + g * e)
        .collect();
    let x_t = PointCloud::from_coords(item.x1.space(), coords)?;
    if check_nondegenerate(x_t.space(), &x_t).is_err() {
        return Ok(None);
    }
    let d_out = model.denoise(&x_t, t)?;
    let v_theta = velocity_from_denoiser(s, &d_out, &x_t, t)?;
    let (da, db, dg) = (s.dalpha(t), s.dbeta(t), s.dgamma(t));
    let target: Vec<f64> = item
        .x0
        .coords()
        .iter()
        .zip(item.x1.coords())
        .zip(item.eps.components())
        .map(|((x0, x1), e)| da * x0 + db * x1 + dg * e)
        .collect();
    let target = TangentVector::from_components(x_t.space(), target)?;
    let r = v_theta.sub(&target);
    let pr = horizontal_project(x_t.space(), &x_t, &r)?;
    let value = crate::schedule::TRAIN_WEIGHT * pr.dot(&pr);
    let upstream = if want_upstream {
        // dv/dD = -d(t)/alpha_hat (elementwise scalar)
        let c = s.coeffs(t)?;
        let d = c.dalpha_hat * c.beta - c.alpha_hat * c.dbeta;
        let ah = c.alpha_hat.max(ALPHA_CLAMP);
        Some(pr.scale(2.0 * crate::schedule::TRAIN_WEIGHT * (-d / ah)))
    } else {
        None
    };
    Ok(Some((value, x_t, upstream)))
}

/// Training hyperparameters (the optimizer is SGD with momentum 0.9, fixed).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossVariant,
    /// One epoch draws and consumes one fresh batch (synthetic data stream).
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Apply an independent uniform rotation to each data sample.
    pub augment: bool,
    pub schedule: Schedule,
}

pub const MOMENTUM: f64 = 0.9;

#[derive(Debug)]
pub struct TrainResult {
    pub model: MlpDenoiser,
    /// (epoch, mean training loss) per epoch.
    pub losses: Vec<(usize, f64)>,
    pub skipped_total: usize,
}

/// Train an MLP denoiser against a synthetic target sampler.
///
/// Deterministic given the seed: parameter init, batch draws and the parallel
/// gradient reduction are all fixed-order. Aborts with a divergence error if
/// the loss stops being finite. The per-epoch loss recorded here is the
/// unweighted objective actually minimized (see the module docs for why the
/// time weight is not applied during optimization).
pub fn train<F>(
    space: SymmetrySpace,
    layout: MlpLayout,
    cfg: &TrainConfig,
    target: &F,
) -> Result<TrainResult>
where
    F: Fn(&mut ChaCha12Rng) -> Result<PointCloud> + Sync,
{
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config("lr must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut net = MlpDenoiser::init(space, layout, &mut rng)?;
    let mut momentum = MlpGradient::zeros_like(&net);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut skipped_total = 0;
    for epoch in 0..cfg.epochs {
        let batch = TrainingBatch::draw(space, target, cfg.batch_size, cfg.augment, &mut rng)?;
        let out = eval_batch_grads(&net, &cfg.schedule, cfg.loss, &batch, Weighting::Unit)?;
        if !out.value.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became non-finite at epoch {epoch} (lr {} too large?)",
                cfg.lr
            )));
        }
        momentum.scale(MOMENTUM);
        momentum.axpy(1.0, &out.grad);
        net.apply_update(-cfg.lr, &momentum);
        if !net.params_finite() {
            return Err(Error::Diverged(format!(
                "parameters became non-finite at epoch {epoch}"
            )));
        }
        skipped_total += out.skipped;
        losses.push((epoch, out.value));
    }
    Ok(TrainResult {
        model: net,
        losses,
        skipped_total,
    })
}

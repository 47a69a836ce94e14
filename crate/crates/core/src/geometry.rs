//! Quotient-space geometry of the total space.
//!
//! Two concrete symmetry settings are supported:
//!
//! - `ShapeSpace`: N points in R^3 with the center of mass removed, acted on by
//!   global rotations SO(3). The key object is the 3x3 matrix
//!   `K = sum_n |x^(n)|^2 I - sum_n x^(n) x^(n)^T`, through which both the
//!   horizontal projection and the orbit-volume (mean-curvature) correction are
//!   expressed in closed form.
//! - `PlanarRotation`: a single point in R^2 acted on by SO(2); orbits are circles
//!   around the origin, the horizontal direction is radial.
//!
//! Conventions enforced here:
//! - shape-space clouds are kept CoM-free (row mean ~ 0);
//! - tangent vectors are re-centered before any projection, so translational
//!   components can never leak through;
//! - every inversion of K is regularized as (K + eps I)^-1 with eps = 1e-8;
//! - configurations too close to the degenerate set (collinear clouds, the SO(2)
//!   origin) produce loud errors instead of silently regularized output.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Regularizer added to K before inversion, always applied.
pub const REGULARIZATION_EPS: f64 = 1e-8;
/// A shape-space cloud is degenerate when lambda_min(K) <= tol * tr(K).
pub const DEGENERACY_TOL: f64 = 1e-6;
/// A planar point is degenerate when its norm falls below this.
pub const SO2_MIN_NORM: f64 = 1e-9;
/// CoM-free tolerance: row-mean norm <= COM_TOL * max(1, rms of coords).
pub const COM_TOL: f64 = 1e-9;
/// Orthogonality tolerance for rotation matrices fed to `apply_group`.
pub const ROTATION_ORTHO_TOL: f64 = 1e-10;

/// Which total space / symmetry group pair a cloud lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    /// One point in R^2 modulo SO(2) rotations about the origin.
    PlanarRotation,
    /// N points in R^3, CoM removed, modulo SO(3) rotations.
    ShapeSpace,
}

/// Descriptor of the total space M and symmetry group G.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetrySpace {
    kind: SpaceKind,
    n_points: usize,
    dim: usize,
    ambient_dim: usize,
    group_dim: usize,
    degeneracy_tol: f64,
}

impl SymmetrySpace {
    /// R^2 with SO(2) symmetry: one planar point, orbits are circles.
    pub fn planar_so2() -> Self {
        SymmetrySpace {
            kind: SpaceKind::PlanarRotation,
            n_points: 1,
            dim: 2,
            ambient_dim: 2,
            group_dim: 1,
            degeneracy_tol: DEGENERACY_TOL,
        }
    }

    /// CoM-free R^{3N} with SO(3) symmetry; `ambient_dim` = 3N - 3 after CoM removal.
    pub fn shape_so3(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::InvalidInput(format!(
                "shape space needs at least 2 points, got {n_points}"
            )));
        }
        Ok(SymmetrySpace {
            kind: SpaceKind::ShapeSpace,
            n_points,
            dim: 3,
            ambient_dim: 3 * n_points - 3,
            group_dim: 3,
            degeneracy_tol: DEGENERACY_TOL,
        })
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }
    pub fn n_points(&self) -> usize {
        self.n_points
    }
    /// Coordinate dimension per point (2 or 3).
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// Dimension of M (after CoM reduction for the shape space).
    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    /// Dimension of the group orbit (1 for SO(2), 3 for SO(3)).
    pub fn group_dim(&self) -> usize {
        self.group_dim
    }
    pub fn degeneracy_tol(&self) -> f64 {
        self.degeneracy_tol
    }
    /// Total number of stored coordinates (N * d).
    pub fn coord_len(&self) -> usize {
        self.n_points * self.dim
    }
}

/// State on the total space: N points of dimension d, stored row-major.
///
/// Shape-space clouds satisfy the CoM-free invariant on construction; use
/// [`com_center`] to bring raw coordinates onto M first.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    space: SymmetrySpace,
    coords: Vec<f64>,
}

/// Tangent direction at some base cloud: same shape as the cloud it is attached to.
///
/// The base point is supplied alongside the vector in every operation that needs
/// it; the type itself only carries the space tag and components.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    space: SymmetrySpace,
    components: Vec<f64>,
}

/// The 3x3 matrix K of the shape space: symmetric positive semidefinite,
/// positive definite exactly when the base cloud is non-collinear.
#[derive(Debug, Clone, PartialEq)]
pub struct Inertia3 {
    matrix: Matrix3<f64>,
}

/// A rotation of the relevant dimension, validated on use.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupElement {
    Planar(Matrix2<f64>),
    Spatial(Matrix3<f64>),
}

fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl PointCloud {
    /// Build a cloud from row-major coordinates, validating finiteness, shape and
    /// (for the shape space) the CoM-free invariant.
    pub fn from_coords(space: SymmetrySpace, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != space.coord_len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coordinates, got {}",
                space.coord_len(),
                coords.len()
            )));
        }
        if !all_finite(&coords) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        let cloud = PointCloud { space, coords };
        if space.kind() == SpaceKind::ShapeSpace {
            let mean = cloud.row_mean3();
            let tol = COM_TOL * cloud.rms_norm().max(1.0);
            if mean.norm() > tol {
                return Err(Error::InvalidInput(format!(
                    "cloud is not CoM-free: row-mean norm {:.3e} exceeds {:.3e}; center it first",
                    mean.norm(),
                    tol
                )));
            }
        }
        Ok(cloud)
    }

    /// All-zero cloud (useful as an accumulator; zero is CoM-free).
    pub fn zeros(space: SymmetrySpace) -> Self {
        PointCloud {
            space,
            coords: vec![0.0; space.coord_len()],
        }
    }

    pub fn space(&self) -> SymmetrySpace {
        self.space
    }
    pub fn n_points(&self) -> usize {
        self.space.n_points()
    }
    pub fn dim(&self) -> usize {
        self.space.dim()
    }
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
    pub(crate) fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }
    /// Consume the cloud, returning the raw coordinates.
    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn point3(&self, i: usize) -> Vector3<f64> {
        debug_assert_eq!(self.dim(), 3);
        Vector3::new(self.coords[3 * i], self.coords[3 * i + 1], self.coords[3 * i + 2])
    }

    pub fn point2(&self) -> Vector2<f64> {
        debug_assert_eq!(self.dim(), 2);
        Vector2::new(self.coords[0], self.coords[1])
    }

    /// Euclidean norm of the flattened coordinates.
    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Root-mean-square of the flattened coordinates.
    pub fn rms_norm(&self) -> f64 {
        if self.coords.is_empty() {
            return 0.0;
        }
        (self.coords.iter().map(|v| v * v).sum::<f64>() / self.coords.len() as f64).sqrt()
    }

    fn row_mean3(&self) -> Vector3<f64> {
        let n = self.n_points() as f64;
        let mut m = Vector3::zeros();
        for i in 0..self.n_points() {
            m += self.point3(i);
        }
        m / n
    }

    /// Interpret this cloud's coordinates as a tangent vector (same shape).
    pub fn as_tangent(&self) -> TangentVector {
        TangentVector {
            space: self.space,
            components: self.coords.clone(),
        }
    }

    /// x + c * v, without re-validating the CoM invariant (callers keep states on M).
    pub fn add_scaled(&self, v: &TangentVector, c: f64) -> PointCloud {
        debug_assert_eq!(self.coords.len(), v.components.len());
        let coords = self
            .coords
            .iter()
            .zip(&v.components)
            .map(|(x, d)| x + c * d)
            .collect();
        PointCloud {
            space: self.space,
            coords,
        }
    }
}

impl TangentVector {
    pub fn from_components(space: SymmetrySpace, components: Vec<f64>) -> Result<Self> {
        if components.len() != space.coord_len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} components, got {}",
                space.coord_len(),
                components.len()
            )));
        }
        if !all_finite(&components) {
            return Err(Error::InvalidInput("non-finite tangent component".into()));
        }
        Ok(TangentVector { space, components })
    }

    pub fn zeros(space: SymmetrySpace) -> Self {
        TangentVector {
            space,
            components: vec![0.0; space.coord_len()],
        }
    }

    pub fn space(&self) -> SymmetrySpace {
        self.space
    }
    pub fn components(&self) -> &[f64] {
        &self.components
    }
    pub(crate) fn components_mut(&mut self) -> &mut [f64] {
        &mut self.components
    }
    pub fn into_components(self) -> Vec<f64> {
        self.components
    }

    pub fn point3(&self, i: usize) -> Vector3<f64> {
        debug_assert_eq!(self.space.dim(), 3);
        Vector3::new(
            self.components[3 * i],
            self.components[3 * i + 1],
            self.components[3 * i + 2],
        )
    }

    pub fn point2(&self) -> Vector2<f64> {
        debug_assert_eq!(self.space.dim(), 2);
        Vector2::new(self.components[0], self.components[1])
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &TangentVector) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scale(&self, c: f64) -> TangentVector {
        TangentVector {
            space: self.space,
            components: self.components.iter().map(|v| c * v).collect(),
        }
    }

    pub fn add(&self, other: &TangentVector) -> TangentVector {
        debug_assert_eq!(self.components.len(), other.components.len());
        TangentVector {
            space: self.space,
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &TangentVector) -> TangentVector {
        debug_assert_eq!(self.components.len(), other.components.len());
        TangentVector {
            space: self.space,
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl Inertia3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Smallest eigenvalue (K is symmetric PSD, so this is >= 0 up to rounding).
    pub fn lambda_min(&self) -> f64 {
        self.matrix
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Subtract the row mean so the cloud lies on the CoM-free subspace M.
///
/// For the planar SO(2) space there is no CoM constraint and the input is
/// returned unchanged (after validation).
pub fn com_center(space: SymmetrySpace, raw: &[f64]) -> Result<PointCloud> {
    if raw.len() != space.coord_len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} coordinates, got {}",
            space.coord_len(),
            raw.len()
        )));
    }
    if !all_finite(raw) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    match space.kind() {
        SpaceKind::PlanarRotation => Ok(PointCloud {
            space,
            coords: raw.to_vec(),
        }),
        SpaceKind::ShapeSpace => {
            let n = space.n_points() as f64;
            let mut mean = [0.0; 3];
            for chunk in raw.chunks_exact(3) {
                mean[0] += chunk[0];
                mean[1] += chunk[1];
                mean[2] += chunk[2];
            }
            mean[0] /= n;
            mean[1] /= n;
            mean[2] /= n;
            let coords = raw
                .chunks_exact(3)
                .flat_map(|c| [c[0] - mean[0], c[1] - mean[1], c[2] - mean[2]])
                .collect();
            Ok(PointCloud { space, coords })
        }
    }
}

/// Subtract the per-coordinate row mean from a tangent vector (shape space only;
/// identity on the planar space). Keeps translational components out of tangents.
pub fn center_tangent(v: &TangentVector) -> TangentVector {
    match v.space.kind() {
        SpaceKind::PlanarRotation => v.clone(),
        SpaceKind::ShapeSpace => {
            let n = v.space.n_points() as f64;
            let mut mean = [0.0; 3];
            for chunk in v.components.chunks_exact(3) {
                mean[0] += chunk[0];
                mean[1] += chunk[1];
                mean[2] += chunk[2];
            }
            mean[0] /= n;
            mean[1] /= n;
            mean[2] /= n;
            let components = v
                .components
                .chunks_exact(3)
                .flat_map(|c| [c[0] - mean[0], c[1] - mean[1], c[2] - mean[2]])
                .collect();
            TangentVector {
                space: v.space,
                components,
            }
        }
    }
}

/// K = sum_n |x^(n)|^2 I - sum_n x^(n) x^(n)^T for a shape-space cloud.
pub fn inertia_matrix(x: &PointCloud) -> Result<Inertia3> {
    if x.dim() != 3 {
        return Err(Error::InvalidInput(
            "inertia matrix is defined for 3-d clouds only".into(),
        ));
    }
    let mut sq = 0.0;
    let mut outer = Matrix3::zeros();
    for i in 0..x.n_points() {
        let p = x.point3(i);
        sq += p.norm_squared();
        outer += p * p.transpose();
    }
    Ok(Inertia3 {
        matrix: Matrix3::identity() * sq - outer,
    })
}

/// (K + eps I)^-1, symmetrized. eps > 0 guarantees invertibility.
pub fn regularized_inverse(k: &Inertia3, eps: f64) -> Result<Matrix3<f64>> {
    if !(eps > 0.0) {
        return Err(Error::OutOfRange(format!("eps must be positive, got {eps}")));
    }
    let reg = k.matrix + Matrix3::identity() * eps;
    let inv = reg
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("regularized K not invertible".into()))?;
    // K + eps I is symmetric; symmetrize the inverse to kill rounding skew.
    Ok((inv + inv.transpose()) * 0.5)
}

/// Loud check that the configuration is outside the degenerate set.
pub fn check_nondegenerate(space: SymmetrySpace, x: &PointCloud) -> Result<()> {
    match space.kind() {
        SpaceKind::PlanarRotation => {
            let n = x.point2().norm();
            if n <= SO2_MIN_NORM {
                Err(Error::Degenerate(format!(
                    "planar point too close to the origin: |x| = {n:.3e}"
                )))
            } else {
                Ok(())
            }
        }
        SpaceKind::ShapeSpace => {
            let k = inertia_matrix(x)?;
            let (lmin, tr) = (k.lambda_min(), k.trace());
            if lmin <= space.degeneracy_tol() * tr {
                Err(Error::Degenerate(format!(
                    "cloud is (near-)collinear: lambda_min(K) = {lmin:.3e} <= {:.1e} * tr(K) = {:.3e}",
                    space.degeneracy_tol(),
                    space.degeneracy_tol() * tr
                )))
            } else {
                Ok(())
            }
        }
    }
}

/// Basis of the vertical (orbit) directions at x: G linearly independent vectors.
///
/// SO(3): the three fields (e_i x x^(n))_n. SO(2): the single field (-x_2, x_1).
pub fn vertical_basis(space: SymmetrySpace, x: &PointCloud) -> Result<Vec<TangentVector>> {
    check_nondegenerate(space, x)?;
    match space.kind() {
        SpaceKind::PlanarRotation => {
            let p = x.point2();
            Ok(vec![TangentVector {
                space,
                components: vec![-p.y, p.x],
            }])
        }
        SpaceKind::ShapeSpace => {
            let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
            let mut basis = Vec::with_capacity(3);
            for a in axes {
                let mut components = Vec::with_capacity(space.coord_len());
                for i in 0..x.n_points() {
                    let c = a.cross(&x.point3(i));
                    components.extend_from_slice(&[c.x, c.y, c.z]);
                }
                basis.push(TangentVector { space, components });
            }
            Ok(basis)
        }
    }
}

/// Total angular momentum sum_n x^(n) x v^(n) of a 3-d tangent about the origin.
pub fn angular_momentum(x: &PointCloud, v: &TangentVector) -> Result<Vector3<f64>> {
    if x.dim() != 3 {
        return Err(Error::InvalidInput(
            "angular momentum is defined for 3-d clouds only".into(),
        ));
    }
    if v.components.len() != x.coords.len() {
        return Err(Error::ShapeMismatch("tangent does not match cloud".into()));
    }
    let mut l = Vector3::zeros();
    for i in 0..x.n_points() {
        l += x.point3(i).cross(&v.point3(i));
    }
    Ok(l)
}

/// Planar cross product x wedge v (scalar angular momentum for SO(2)).
pub fn planar_cross(x: &PointCloud, v: &TangentVector) -> f64 {
    let p = x.point2();
    let w = v.point2();
    p.x * w.y - p.y * w.x
}

/// Projection core shared by the public op and the samplers. Assumes `v` has
/// already been centered and the base point checked for degeneracy; samplers
/// call it directly so both sampler variants share every centering operation.
pub(crate) fn project_centered(
    space: SymmetrySpace,
    x: &PointCloud,
    v: &TangentVector,
) -> TangentVector {
    match space.kind() {
        SpaceKind::PlanarRotation => {
            let p = x.point2();
            let n2 = p.norm_squared();
            let w = v.point2();
            let c = w.dot(&p) / n2;
            TangentVector {
                space,
                components: vec![c * p.x, c * p.y],
            }
        }
        SpaceKind::ShapeSpace => {
            // v^(n) - [K^-1 (sum x x v)] x x^(n)
            let k = inertia_matrix(x).expect("3-d cloud");
            let kinv = regularized_inverse(&k, REGULARIZATION_EPS).expect("eps > 0");
            let l = angular_momentum(x, v).expect("shapes match");
            // One refinement step on the regularized solve: drops the systematic
            // eps/lambda_min bias (~1e-8 relative on unit-scale clouds) to O(eps^2)
            // so the kernel/idempotence identities hold to 1e-9 at any scale.
            // Branch-free and deterministic; degenerate K never reaches here.
            let a0 = kinv * l;
            let a = a0 + kinv * (l - k.matrix() * a0);
            let mut components = Vec::with_capacity(space.coord_len());
            for i in 0..x.n_points() {
                let r = v.point3(i) - a.cross(&x.point3(i));
                components.extend_from_slice(&[r.x, r.y, r.z]);
            }
            TangentVector { space, components }
        }
    }
}

/// Orthogonal projection of a tangent onto the horizontal space at x.
///
/// SO(3): `v^(n) - [K^-1 (sum_n' x^(n') x v^(n'))] x x^(n)` with the regularized
/// inverse; the input is re-centered first. SO(2): the radial component
/// `(v . xhat) xhat`. The output has (up to roundoff) zero row sum and zero
/// angular momentum about the base point.
pub fn horizontal_project(
    space: SymmetrySpace,
    x: &PointCloud,
    v: &TangentVector,
) -> Result<TangentVector> {
    if v.components.len() != x.coords.len() {
        return Err(Error::ShapeMismatch("tangent does not match cloud".into()));
    }
    check_nondegenerate(space, x)?;
    let centered = center_tangent(v);
    Ok(project_centered(space, x, &centered))
}

/// The lifted mean-curvature field at x.
///
/// SO(3): `h~^(n) = -(tr(K^-1) I - K^-1) x^(n)` with the regularized inverse.
/// SO(2): `-x / |x|^2` (from -1/2 grad log of the squared orbit radius).
/// The output is horizontal and CoM-free up to roundoff.
pub fn mean_curvature(space: SymmetrySpace, x: &PointCloud) -> Result<TangentVector> {
    check_nondegenerate(space, x)?;
    match space.kind() {
        SpaceKind::PlanarRotation => {
            let p = x.point2();
            let n2 = p.norm_squared();
            Ok(TangentVector {
                space,
                components: vec![-p.x / n2, -p.y / n2],
            })
        }
        SpaceKind::ShapeSpace => {
            let k = inertia_matrix(x)?;
            let kinv = regularized_inverse(&k, REGULARIZATION_EPS)?;
            let m = Matrix3::identity() * kinv.trace() - kinv;
            let mut components = Vec::with_capacity(space.coord_len());
            for i in 0..x.n_points() {
                let r = -(m * x.point3(i));
                components.extend_from_slice(&[r.x, r.y, r.z]);
            }
            Ok(TangentVector { space, components })
        }
    }
}

fn validate_rotation2(g: &Matrix2<f64>) -> Result<()> {
    let dev = (g.transpose() * g - Matrix2::identity()).norm();
    if dev > ROTATION_ORTHO_TOL {
        return Err(Error::InvalidInput(format!(
            "matrix is not orthogonal: |g^T g - I| = {dev:.3e}"
        )));
    }
    if g.determinant() < 0.0 {
        return Err(Error::InvalidInput("matrix is a reflection, not a rotation".into()));
    }
    Ok(())
}

fn validate_rotation3(g: &Matrix3<f64>) -> Result<()> {
    let dev = (g.transpose() * g - Matrix3::identity()).norm();
    if dev > ROTATION_ORTHO_TOL {
        return Err(Error::InvalidInput(format!(
            "matrix is not orthogonal: |g^T g - I| = {dev:.3e}"
        )));
    }
    if g.determinant() < 0.0 {
        return Err(Error::InvalidInput("matrix is a reflection, not a rotation".into()));
    }
    Ok(())
}

/// Rotate every point of the cloud by g. Preserves CoM-freeness and pairwise
/// distances; g must be a proper rotation of the matching dimension.
pub fn apply_group(g: &GroupElement, x: &PointCloud) -> Result<PointCloud> {
    match (g, x.dim()) {
        (GroupElement::Planar(m), 2) => {
            validate_rotation2(m)?;
            let p = m * x.point2();
            Ok(PointCloud {
                space: x.space,
                coords: vec![p.x, p.y],
            })
        }
        (GroupElement::Spatial(m), 3) => {
            validate_rotation3(m)?;
            let mut coords = Vec::with_capacity(x.coords.len());
            for i in 0..x.n_points() {
                let p = m * x.point3(i);
                coords.extend_from_slice(&[p.x, p.y, p.z]);
            }
            Ok(PointCloud {
                space: x.space,
                coords,
            })
        }
        _ => Err(Error::ShapeMismatch(
            "rotation dimension does not match cloud dimension".into(),
        )),
    }
}

/// Rotate a tangent vector by g (same action as on clouds).
pub fn apply_group_tangent(g: &GroupElement, v: &TangentVector) -> Result<TangentVector> {
    match (g, v.space.dim()) {
        (GroupElement::Planar(m), 2) => {
            validate_rotation2(m)?;
            let p = m * v.point2();
            Ok(TangentVector {
                space: v.space,
                components: vec![p.x, p.y],
            })
        }
        (GroupElement::Spatial(m), 3) => {
            validate_rotation3(m)?;
            let mut components = Vec::with_capacity(v.components.len());
            for i in 0..v.space.n_points() {
                let p = m * v.point3(i);
                components.extend_from_slice(&[p.x, p.y, p.z]);
            }
            Ok(TangentVector {
                space: v.space,
                components,
            })
        }
        _ => Err(Error::ShapeMismatch(
            "rotation dimension does not match tangent dimension".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn triangle_cloud() -> PointCloud {
        let space = SymmetrySpace::shape_so3(3).unwrap();
        PointCloud::from_coords(space, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, 0.0])
            .unwrap()
    }

    #[test]
    fn com_center_subtracts_row_mean() {
        let space = SymmetrySpace::shape_so3(2).unwrap();
        let c = com_center(space, &[1.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.coords(), &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn com_center_is_identity_on_centered_input() {
        let space = SymmetrySpace::shape_so3(2).unwrap();
        let raw = [-1.0, 0.5, 0.0, 1.0, -0.5, 0.0];
        let c = com_center(space, &raw).unwrap();
        assert_eq!(c.coords(), &raw);
    }

    #[test]
    fn com_center_rowsum_vanishes_on_random_cloud() {
        let space = SymmetrySpace::shape_so3(8).unwrap();
        // fixed arbitrary values, nothing special about them
        let raw: Vec<f64> = (0..24).map(|i| ((i * 7919 % 97) as f64) / 13.0 - 3.0).collect();
        let c = com_center(space, &raw).unwrap();
        let mut sum = [0.0; 3];
        for chunk in c.coords().chunks_exact(3) {
            sum[0] += chunk[0];
            sum[1] += chunk[1];
            sum[2] += chunk[2];
        }
        let n = (sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2]).sqrt();
        assert!(n <= 1e-12, "row sum {n}");
    }

    #[test]
    fn com_center_rejects_non_finite() {
        let space = SymmetrySpace::shape_so3(2).unwrap();
        assert!(com_center(space, &[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn inertia_matrix_triangle() {
        let k = inertia_matrix(&triangle_cloud()).unwrap();
        let expected = Matrix3::new(2.0, -1.0, 0.0, -1.0, 2.0, 0.0, 0.0, 0.0, 4.0);
        assert_relative_eq!(*k.matrix(), expected, epsilon = 1e-14);
    }

    #[test]
    fn inertia_matrix_scales_quadratically() {
        let x = triangle_cloud();
        let scaled = PointCloud::from_coords(
            x.space(),
            x.coords().iter().map(|v| 2.5 * v).collect(),
        )
        .unwrap();
        let k1 = inertia_matrix(&x).unwrap();
        let k2 = inertia_matrix(&scaled).unwrap();
        assert_relative_eq!(*k2.matrix(), k1.matrix() * 6.25, epsilon = 1e-12);
    }

    #[test]
    fn inertia_matrix_collinear_has_zero_lambda_min() {
        let space = SymmetrySpace::shape_so3(2).unwrap();
        let x =
            PointCloud::from_coords(space, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let k = inertia_matrix(&x).unwrap();
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0);
        assert_relative_eq!(*k.matrix(), expected, epsilon = 1e-14);
        assert!(k.lambda_min().abs() <= 1e-12);
        assert!(check_nondegenerate(space, &x).is_err());
    }

    #[test]
    fn regularized_inverse_diagonal() {
        let k = Inertia3 {
            matrix: Matrix3::from_diagonal(&Vector3::new(1.0, 3.0, 4.0)),
        };
        let inv = regularized_inverse(&k, 1e-12).unwrap();
        assert_relative_eq!(inv[(0, 0)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(inv[(1, 1)], 1.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(inv[(2, 2)], 0.25, epsilon = 1e-9);
    }

    #[test]
    fn regularized_inverse_of_zero_is_scaled_identity() {
        let k = Inertia3 {
            matrix: Matrix3::zeros(),
        };
        let inv = regularized_inverse(&k, 1e-8).unwrap();
        assert_relative_eq!(inv, Matrix3::identity() * 1e8, max_relative = 1e-10);
    }

    #[test]
    fn regularized_inverse_multiplies_back() {
        let m = Matrix3::new(3.0, 0.5, -0.2, 0.5, 2.0, 0.1, -0.2, 0.1, 1.5);
        let k = Inertia3 { matrix: m };
        let inv = regularized_inverse(&k, 1e-8).unwrap();
        let prod = inv * (m + Matrix3::identity() * 1e-8);
        assert!((prod - Matrix3::identity()).norm() <= 1e-10);
    }

    #[test]
    fn vertical_basis_planar() {
        let space = SymmetrySpace::planar_so2();
        let x = PointCloud::from_coords(space, vec![1.0, 0.0]).unwrap();
        let basis = vertical_basis(space, &x).unwrap();
        assert_eq!(basis.len(), 1);
        assert_eq!(basis[0].components(), &[0.0, 1.0]);
    }

    #[test]
    fn vertical_basis_triangle_z_axis() {
        let x = triangle_cloud();
        let basis = vertical_basis(x.space(), &x).unwrap();
        assert_eq!(basis.len(), 3);
        let ez = &basis[2];
        assert_eq!(
            ez.components(),
            &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 1.0, -1.0, 0.0]
        );
    }

    #[test]
    fn vertical_basis_vectors_are_com_free() {
        let x = triangle_cloud();
        for b in vertical_basis(x.space(), &x).unwrap() {
            let mut sum = [0.0; 3];
            for chunk in b.components().chunks_exact(3) {
                sum[0] += chunk[0];
                sum[1] += chunk[1];
                sum[2] += chunk[2];
            }
            assert!(sum.iter().all(|s| s.abs() <= 1e-12));
        }
    }

    #[test]
    fn angular_momentum_of_rotation_field_is_k_times_axis() {
        let x = triangle_cloud();
        let a = Vector3::z();
        let mut comps = Vec::new();
        for i in 0..x.n_points() {
            let c = a.cross(&x.point3(i));
            comps.extend_from_slice(&[c.x, c.y, c.z]);
        }
        let v = TangentVector::from_components(x.space(), comps).unwrap();
        let l = angular_momentum(&x, &v).unwrap();
        assert_relative_eq!(l, Vector3::new(0.0, 0.0, 4.0), epsilon = 1e-12);
    }

    #[test]
    fn angular_momentum_of_base_itself_vanishes() {
        let x = triangle_cloud();
        let l = angular_momentum(&x, &x.as_tangent()).unwrap();
        assert!(l.norm() <= 1e-15);
    }

    #[test]
    fn projection_annihilates_vertical_basis() {
        let x = triangle_cloud();
        for b in vertical_basis(x.space(), &x).unwrap() {
            let p = horizontal_project(x.space(), &x, &b).unwrap();
            assert!(p.norm() <= 1e-9 * b.norm().max(1.0), "residual {}", p.norm());
        }
    }

    #[test]
    fn projection_fixes_horizontal_vectors() {
        let x = triangle_cloud();
        let v = TangentVector::from_components(
            x.space(),
            vec![0.3, -0.1, 0.2, 0.0, 0.4, -0.5, -0.3, -0.3, 0.3],
        )
        .unwrap();
        let p1 = horizontal_project(x.space(), &x, &v).unwrap();
        let p2 = horizontal_project(x.space(), &x, &p1).unwrap();
        assert!(p2.sub(&p1).norm() <= 1e-9 * p1.norm().max(1.0));
    }

    #[test]
    fn projection_output_has_zero_momenta() {
        let x = triangle_cloud();
        let v = TangentVector::from_components(
            x.space(),
            vec![1.0, 2.0, -0.5, 0.3, -1.2, 0.8, 0.1, 0.0, -2.0],
        )
        .unwrap();
        let p = horizontal_project(x.space(), &x, &v).unwrap();
        let l = angular_momentum(&x, &p).unwrap();
        assert!(l.norm() <= 1e-9, "angular momentum {}", l.norm());
        let mut sum = [0.0; 3];
        for chunk in p.components().chunks_exact(3) {
            sum[0] += chunk[0];
            sum[1] += chunk[1];
            sum[2] += chunk[2];
        }
        assert!(sum.iter().all(|s| s.abs() <= 1e-12));
    }

    #[test]
    fn planar_projection_is_radial() {
        let space = SymmetrySpace::planar_so2();
        let x = PointCloud::from_coords(space, vec![3.0, 4.0]).unwrap();
        let v = TangentVector::from_components(space, vec![1.0, 0.0]).unwrap();
        let p = horizontal_project(space, &x, &v).unwrap();
        // (v . xhat) xhat with xhat = (0.6, 0.8): dot = 0.6
        assert_relative_eq!(p.components()[0], 0.36, epsilon = 1e-12);
        assert_relative_eq!(p.components()[1], 0.48, epsilon = 1e-12);
    }

    #[test]
    fn planar_projection_rejects_origin() {
        let space = SymmetrySpace::planar_so2();
        let x = PointCloud::from_coords(space, vec![1e-12, 0.0]).unwrap();
        let v = TangentVector::from_components(space, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            horizontal_project(space, &x, &v),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn mean_curvature_planar_closed_form() {
        let space = SymmetrySpace::planar_so2();
        let x = PointCloud::from_coords(space, vec![2.0, 0.0]).unwrap();
        let h = mean_curvature(space, &x).unwrap();
        assert_relative_eq!(h.components()[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(h.components()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mean_curvature_is_horizontal() {
        let x = triangle_cloud();
        let h = mean_curvature(x.space(), &x).unwrap();
        let p = horizontal_project(x.space(), &x, &h).unwrap();
        assert!(p.sub(&h).norm() <= 1e-9 * h.norm());
    }

    #[test]
    fn mean_curvature_scales_inversely() {
        let x = triangle_cloud();
        let scaled =
            PointCloud::from_coords(x.space(), x.coords().iter().map(|v| 2.0 * v).collect())
                .unwrap();
        let h1 = mean_curvature(x.space(), &x).unwrap();
        let h2 = mean_curvature(x.space(), &scaled).unwrap();
        // exact 1/c homogeneity is broken at ~eps/lambda ~ 5e-9 by the fixed
        // regularizer (K scales by c^2, eps stays put), hence the 1e-7 bound
        for (a, b) in h1.components().iter().zip(h2.components()) {
            assert_relative_eq!(*b, 0.5 * a, epsilon = 1e-7);
        }
    }

    #[test]
    fn apply_group_identity_and_quarter_turn() {
        let space = SymmetrySpace::shape_so3(2).unwrap();
        let x =
            PointCloud::from_coords(space, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let id = GroupElement::Spatial(Matrix3::identity());
        assert_eq!(apply_group(&id, &x).unwrap().coords(), x.coords());

        let rz = GroupElement::Spatial(Matrix3::new(
            0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ));
        let rot = apply_group(&rz, &x).unwrap();
        assert_relative_eq!(rot.point3(0), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn apply_group_preserves_pairwise_distances() {
        let x = triangle_cloud();
        let angle: f64 = 0.7;
        let (s, c) = angle.sin_cos();
        let g = GroupElement::Spatial(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0));
        let y = apply_group(&g, &x).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let d0 = (x.point3(i) - x.point3(j)).norm();
                let d1 = (y.point3(i) - y.point3(j)).norm();
                assert_relative_eq!(d0, d1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn apply_group_rejects_reflections_and_non_orthogonal() {
        let x = triangle_cloud();
        let refl = GroupElement::Spatial(Matrix3::from_diagonal(&Vector3::new(
            -1.0, 1.0, 1.0,
        )));
        assert!(apply_group(&refl, &x).is_err());
        let skew = GroupElement::Spatial(Matrix3::new(
            1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ));
        assert!(apply_group(&skew, &x).is_err());
    }
}

//! Random draws on the total space: centered Gaussian noise and uniform rotations.
//!
//! Noise on M is iid standard normal per coordinate followed by CoM-centering,
//! which is the isotropic Gaussian restricted to the CoM-free subspace. Uniform
//! SO(3) rotations come from normalized 4-normal quaternions; SO(2) from a
//! uniform angle.

use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{com_center, GroupElement, PointCloud, SpaceKind, SymmetrySpace, TangentVector};

/// Standard normal tangent sample, CoM-centered for the shape space.
pub fn standard_normal_tangent<R: Rng>(space: SymmetrySpace, rng: &mut R) -> TangentVector {
    let raw: Vec<f64> = (0..space.coord_len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    com_center(space, &raw).expect("finite draw").as_tangent()
}

/// Standard normal state on M (same construction, typed as a point).
pub fn standard_normal_cloud<R: Rng>(space: SymmetrySpace, rng: &mut R) -> PointCloud {
    let raw: Vec<f64> = (0..space.coord_len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    com_center(space, &raw).expect("finite draw")
}

/// Haar-uniform rotation of the dimension matching the space.
pub fn random_rotation<R: Rng>(space: SymmetrySpace, rng: &mut R) -> GroupElement {
    match space.kind() {
        SpaceKind::PlanarRotation => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            GroupElement::Planar(Matrix2::new(c, -s, s, c))
        }
        SpaceKind::ShapeSpace => {
            let q = Vector4::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q.x, q.y, q.z, q.w,
            ));
            GroupElement::Spatial(*q.to_rotation_matrix().matrix())
        }
    }
}

/// Rotation about the z axis by the given angle (shape-space test helper).
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

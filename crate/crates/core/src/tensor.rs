//! Closed-form algebra on 3x3 Cartesian tensors.
//!
//! A symmetric rank-2 tensor splits into an isotropic scalar (`l = 0`) and a
//! symmetric traceless remainder (`l = 2`). Under a rotation `R` the tensor
//! transforms as `R A R^T`; the scalar part is invariant and the traceless part
//! rotates covariantly. All routines here work in `f64`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Asymmetry accepted on input targets before they are symmetrized.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Orthogonality and determinant tolerance for [`Rotation`].
pub const ROTATION_TOLERANCE: f64 = 1e-10;

/// Isotropic plus traceless split of a symmetric tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalDecomp {
    pub iso: f64,
    pub aniso: Mat3,
}

impl SphericalDecomp {
    pub fn reconstruct(&self) -> Mat3 {
        Mat3::identity() * self.iso + self.aniso
    }
}

/// A proper rotation matrix (`R^T R = I`, `det R = +1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn new(m: Mat3) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let orth = (m.transpose() * m - Mat3::identity()).amax();
        if orth > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "|R^T R - I|_max = {orth:.3e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("det = {det}")));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Rotation by `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}

pub fn sym(a: &Mat3) -> Mat3 {
    (a + a.transpose()) * 0.5
}

/// Symmetric traceless projection `sym(A) - tr(A)/3 I`.
pub fn traceless(a: &Mat3) -> Mat3 {
    let mut s = sym(a);
    let mean = s.trace() / 3.0;
    for k in 0..3 {
        s[(k, k)] -= mean;
    }
    s
}

pub fn dyadic(u: &Vec3, w: &Vec3) -> Mat3 {
    u * w.transpose()
}

pub fn frob_norm(a: &Mat3) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest absolute entry of `A - A^T`.
pub fn asymmetry(a: &Mat3) -> f64 {
    (a - a.transpose()).amax()
}

/// Splits a (numerically) symmetric tensor into its isotropic and traceless
/// parts. Inputs with asymmetry up to [`SYMMETRY_TOLERANCE`] are symmetrized
/// first; anything beyond is rejected.
pub fn decompose(alpha: &Mat3) -> Result<SphericalDecomp> {
    let asym = asymmetry(alpha);
    if !(asym <= SYMMETRY_TOLERANCE) {
        return Err(Error::NonSymmetricInput {
            asymmetry: asym,
            tolerance: SYMMETRY_TOLERANCE,
        });
    }
    let s = sym(alpha);
    let iso = s.trace() / 3.0;
    Ok(SphericalDecomp {
        iso,
        aniso: s - Mat3::identity() * iso,
    })
}

/// Deviatoric part `A - tr(A)/3 I` without any symmetry check.
pub fn deviatoric(a: &Mat3) -> Mat3 {
    a - Mat3::identity() * (a.trace() / 3.0)
}

/// `R A R^T`.
pub fn conjugate(r: &Rotation, a: &Mat3) -> Mat3 {
    r.0 * a * r.0.transpose()
}

/// `Q A Q^T` for any orthogonal `Q`, including improper ones.
pub fn conjugate_orthogonal(q: &Mat3, a: &Mat3) -> Result<Mat3> {
    let orth = (q.transpose() * q - Mat3::identity()).amax();
    if !(orth <= ROTATION_TOLERANCE) {
        return Err(Error::InvalidRotation(format!(
            "|Q^T Q - I|_max = {orth:.3e}"
        )));
    }
    Ok(q * a * q.transpose())
}

/// Uniform sample from SO(3) via a uniformly distributed unit quaternion
/// (Shoemake's subgroup algorithm).
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    use std::f64::consts::TAU;
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    );
    let unit = UnitQuaternion::from_quaternion(q);
    Rotation(*unit.to_rotation_matrix().matrix())
}

/// Expands the `(xx, yy, zz, xy, xz, yz)` storage order into a symmetric tensor.
pub fn from_voigt6(c: &[f64; 6]) -> Mat3 {
    Mat3::new(c[0], c[3], c[4], c[3], c[1], c[5], c[4], c[5], c[2])
}

pub fn to_voigt6(a: &Mat3) -> [f64; 6] {
    [a[(0, 0)], a[(1, 1)], a[(2, 2)], a[(0, 1)], a[(0, 2)], a[(1, 2)]]
}

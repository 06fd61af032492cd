//! Pinhole cameras, SE(3) algebra, per-pixel ray embeddings and epipolar
//! geometry.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;
const RENORMALIZE_DRIFT: f64 = 1e-12;
const SMALL_ANGLE: f64 = 1e-8;

/// Pinhole intrinsics in pixels. Pixel `(x, y)` covers the continuous
/// coordinates `[x, x+1) × [y, y+1)` and is sampled at its center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("empty image size".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// `K⁻¹ (u, v, 1)ᵀ` for a continuous image coordinate.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Ray through the center of integer pixel `(x, y)`.
    #[inline]
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        self.ray(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Continuous image coordinate of a camera-frame point (z must be nonzero).
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Element of SE(3). As a camera pose it maps camera coordinates to world
/// coordinates: `p_world = R p_cam + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates `RᵀR = I` and `det R = 1` within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entries".into()));
        }
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if drift > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidTransform(format!(
                "rotation not in SO(3): orthogonality drift {drift:e}, det {det}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit) with the
    /// given translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let omega = axis.normalize() * angle;
        Self {
            rotation: so3_exp(&omega),
            translation,
        }
    }

    pub fn rotation_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle, Vector3::zeros())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let rotation = if drift > RENORMALIZE_DRIFT {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `Rᵀ (p - t)`: world point into the frame this pose maps from.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.translation))
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidTransform("last row must be (0, 0, 0, 1)".into()));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vector3::new(m[3], m[7], m[11]))
    }

    /// Exponential coordinates of this transform (inverse of [`se3_exp`]).
    pub fn log(&self) -> Twist {
        se3_log(self)
    }
}

/// Tangent vector of SE(3): rotation `omega` (axis-angle) and translational
/// part `v`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(x: &[f64; 6]) -> Self {
        Self {
            omega: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|v| v.is_finite())
    }
}

#[inline]
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula with a second-order series below 1e-8 rad.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = skew(omega);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + w + 0.5 * w2
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + a * w + b * w2
    }
}

pub fn se3_exp(x: &Twist) -> RigidTransform {
    let theta = x.omega.norm();
    let w = skew(&x.omega);
    let w2 = w * w;
    let (rotation, v_mat) = if theta < SMALL_ANGLE {
        (
            Matrix3::identity() + w + 0.5 * w2,
            Matrix3::identity() + 0.5 * w + w2 / 6.0,
        )
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        (
            Matrix3::identity() + a * w + b * w2,
            Matrix3::identity() + b * w + c * w2,
        )
    };
    RigidTransform {
        rotation,
        translation: v_mat * x.v,
    }
}

pub fn se3_log(t: &RigidTransform) -> Twist {
    let omega = nalgebra::Rotation3::from_matrix_unchecked(t.rotation).scaled_axis();
    let theta = omega.norm();
    let w = skew(&omega);
    let w2 = w * w;
    let v_inv = if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * w + w2 / 12.0
    } else {
        let coef = (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta);
        Matrix3::identity() - 0.5 * w + coef * w2
    };
    Twist {
        omega,
        v: v_inv * t.translation,
    }
}

/// Closest rotation in the Frobenius sense (polar factor).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Gradient with respect to a left rotation perturbation `M ← exp([ω]ₓ) M`
/// given `∂L/∂M`.
pub fn left_rotation_gradient(m: &Matrix3<f64>, d_m: &Matrix3<f64>) -> Vector3<f64> {
    let a = m * d_m.transpose();
    Vector3::new(
        a[(1, 2)] - a[(2, 1)],
        a[(2, 0)] - a[(0, 2)],
        a[(0, 1)] - a[(1, 0)],
    )
}

/// Gradient with respect to the twist `ξ = (ω, v)` of the left perturbation
/// `T ← exp(ξ) T`, given `∂L/∂R` and `∂L/∂t` of `T = (R, t)`.
pub fn left_twist_gradient(
    pose: &RigidTransform,
    d_rotation: &Matrix3<f64>,
    d_translation: &Vector3<f64>,
) -> Twist {
    let omega = left_rotation_gradient(&pose.rotation, d_rotation) + pose.translation.cross(d_translation);
    Twist {
        omega,
        v: *d_translation,
    }
}

/// Per-pixel `K⁻¹ p(x, y)` under the pixel-center convention.
#[derive(Clone, Debug, PartialEq)]
pub struct RayField {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<Vector3<f64>>,
}

impl RayField {
    pub fn get(&self, x: usize, y: usize) -> &Vector3<f64> {
        &self.rays[y * self.width + x]
    }
}

pub fn ray_embedding(k: &CameraIntrinsics) -> RayField {
    let rays = (0..k.height)
        .flat_map(|y| (0..k.width).map(move |x| (x, y)))
        .map(|(x, y)| k.pixel_ray(x, y))
        .collect();
    RayField {
        width: k.width,
        height: k.height,
        rays,
    }
}

/// Per-pixel Plücker coordinates `(d, o × d)` in the frame `T` maps into.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerField {
    pub width: usize,
    pub height: usize,
    pub lines: Vec<[f64; 6]>,
}

impl PluckerField {
    pub fn get(&self, x: usize, y: usize) -> &[f64; 6] {
        &self.lines[y * self.width + x]
    }
}

/// `pose` maps the camera frame into the target frame.
pub fn plucker_embedding(k: &CameraIntrinsics, pose: &RigidTransform) -> PluckerField {
    let origin = pose.translation;
    let lines = ray_embedding(k)
        .rays
        .iter()
        .map(|r| {
            let d = (pose.rotation * r).normalize();
            let m = origin.cross(&d);
            [d.x, d.y, d.z, m.x, m.y, m.z]
        })
        .collect();
    PluckerField {
        width: k.width,
        height: k.height,
        lines,
    }
}

/// `F = K⁻ᵀ [t]ₓ R K⁻¹` for `relative` mapping view-1 camera coordinates to
/// view-2 camera coordinates, so that `p₂ᵀ F p₁ = 0`.
pub fn fundamental_matrix(k: &CameraIntrinsics, relative: &RigidTransform) -> Result<Matrix3<f64>> {
    let baseline = relative.translation.norm();
    if baseline < 1e-12 {
        return Err(Error::ZeroBaseline(baseline));
    }
    let k_inv = k.inverse_matrix();
    Ok(k_inv.transpose() * skew(&relative.translation) * relative.rotation * k_inv)
}

/// Epipolar line in view 2 of the continuous view-1 coordinate `pixel`,
/// scaled so that `‖(l₁, l₂)‖ = 1` (the line value is then a signed
/// distance in pixels).
pub fn epipolar_line(
    k: &CameraIntrinsics,
    relative: &RigidTransform,
    pixel: &Vector2<f64>,
) -> Result<Vector3<f64>> {
    let f = fundamental_matrix(k, relative)?;
    let l = f * Vector3::new(pixel.x, pixel.y, 1.0);
    let n = l.x.hypot(l.y);
    Ok(if n > 0.0 { l / n } else { l })
}

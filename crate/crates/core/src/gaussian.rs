//! Gaussian primitives: pixel-aligned construction from depth, rigid
//! transformation with degree-1 spherical-harmonic warping, and set union.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform, Twist};
use crate::plane::DepthMap;

/// Degree-1 SH coefficients indexed `[coefficient][channel]`; coefficient 0 is
/// the DC term, 1..=3 the linear band.
pub type ShCoeffs = [[f64; 3]; 4];

/// `sqrt(1 / 4π)`
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// `sqrt(3 / 4π)`
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 1e2;

/// Cyclic permutation taking a direction `(x, y, z)` to `(y, z, x)`.
pub fn sh_permutation() -> Matrix3<f64> {
    Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0)
}

/// Linear-band basis `Y₁(d) = sqrt(3/4π) Π d`.
#[inline]
pub fn sh_linear_basis(dir: &Vector3<f64>) -> Vector3<f64> {
    SH_C1 * Vector3::new(dir.y, dir.z, dir.x)
}

/// Pre-clamp color `c₀ Y₀ + c · Y₁(d) + 0.5` per channel.
#[inline]
pub fn sh_raw_color(sh: &ShCoeffs, dir: &Vector3<f64>) -> [f64; 3] {
    let y1 = sh_linear_basis(dir);
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = SH_C0 * sh[0][ch] + y1.x * sh[1][ch] + y1.y * sh[2][ch] + y1.z * sh[3][ch] + 0.5;
    }
    out
}

/// View-dependent color for unit direction `dir`, clamped to `[0, 1]`.
pub fn sh_to_color(sh: &ShCoeffs, dir: &Vector3<f64>) -> [f64; 3] {
    sh_raw_color(sh, dir).map(|c| c.clamp(0.0, 1.0))
}

/// Rotates the linear band so that evaluating the result at `R d` equals
/// evaluating `sh` at `d`. The DC term is rotation invariant.
pub fn rotate_sh(sh: &ShCoeffs, rotation: &Matrix3<f64>) -> ShCoeffs {
    let p = sh_permutation();
    let m = p * rotation * p.transpose();
    let mut out = *sh;
    for ch in 0..3 {
        let c = Vector3::new(sh[1][ch], sh[2][ch], sh[3][ch]);
        let r = m * c;
        out[1][ch] = r.x;
        out[2][ch] = r.y;
        out[3][ch] = r.z;
    }
    out
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Unit quaternion of a rotation matrix, sign chosen with `w ≥ 0`.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

/// Matrix `L(a)` with `a ⊗ b = L(a) b` (Hamilton product).
pub fn quat_left_matrix(a: &[f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = *a;
    Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
}

/// Matrix `R(b)` with `a ⊗ b = R(b) a` (Hamilton product).
pub fn quat_right_matrix(b: &[f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = *b;
    Matrix4::new(w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w)
}

pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let r = quat_left_matrix(a) * Vector4::from(*b);
    [r[0], r[1], r[2], r[3]]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    /// In `(0, 1)`.
    pub opacity: f64,
    /// Standard deviations along the local axes, scene units.
    pub scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`, unit norm.
    pub orientation: [f64; 4],
    pub sh: ShCoeffs,
}

impl Gaussian {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.orientation)
    }

    /// `Σ = R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    pub fn is_valid(&self) -> bool {
        let qn: f64 = self.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.opacity > 0.0
            && self.opacity < 1.0
            && self.scale.iter().all(|s| *s > 0.0)
            && (qn - 1.0).abs() < 1e-9
            && self.center.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }
}

impl FromIterator<Gaussian> for GaussianSet {
    fn from_iter<I: IntoIterator<Item = Gaussian>>(iter: I) -> Self {
        Self {
            gaussians: iter.into_iter().collect(),
        }
    }
}

/// Per-Gaussian gradients, laid out like [`GaussianSet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGradients {
    pub centers: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vector3<f64>>,
    pub orientations: Vec<[f64; 4]>,
    pub sh: Vec<ShCoeffs>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            centers: vec![Vector3::zeros(); n],
            opacities: vec![0.0; n],
            scales: vec![Vector3::zeros(); n],
            orientations: vec![[0.0; 4]; n],
            sh: vec![[[0.0; 3]; 4]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn add_assign(&mut self, other: &GaussianGradients) {
        for (a, b) in self.centers.iter_mut().zip(&other.centers) {
            *a += b;
        }
        for (a, b) in self.opacities.iter_mut().zip(&other.opacities) {
            *a += b;
        }
        for (a, b) in self.scales.iter_mut().zip(&other.scales) {
            *a += b;
        }
        for (a, b) in self.orientations.iter_mut().zip(&other.orientations) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
        }
    }

    /// Splits off the gradients of elements `[at, len)`.
    pub fn split_off(&mut self, at: usize) -> GaussianGradients {
        GaussianGradients {
            centers: self.centers.split_off(at),
            opacities: self.opacities.split_off(at),
            scales: self.scales.split_off(at),
            orientations: self.orientations.split_off(at),
            sh: self.sh.split_off(at),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.centers.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacities.iter().all(|x| x.is_finite())
            && self.scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.orientations.iter().flatten().all(|x| x.is_finite())
            && self.sh.iter().flatten().flatten().all(|x| x.is_finite())
    }
}

/// Applies `pose` to every Gaussian: centers and orientations are rotated and
/// translated, the SH linear band is rotated, opacity and scale are kept.
pub fn transform_gaussians(set: &GaussianSet, pose: &RigidTransform) -> GaussianSet {
    let r = pose.rotation();
    let q_r = matrix_to_quat(r);
    set.iter()
        .map(|g| Gaussian {
            center: pose.transform_point(&g.center),
            opacity: g.opacity,
            scale: g.scale,
            orientation: quat_mul(&q_r, &g.orientation),
            sh: rotate_sh(&g.sh, r),
        })
        .collect()
}

/// Chains world-frame gradients of `transform_gaussians(local, pose)` back to
/// the local Gaussians. `transformed` must be that output.
pub fn transform_gaussians_backward(
    pose: &RigidTransform,
    transformed: &GaussianSet,
    grads: &GaussianGradients,
) -> (GaussianGradients, Twist) {
    let r = pose.rotation();
    let p = sh_permutation();
    let m_t = (p * r * p.transpose()).transpose();
    let l_t = quat_left_matrix(&matrix_to_quat(r)).transpose();
    let n = transformed.len();
    let mut local = GaussianGradients::zeros(n);
    let mut d_omega = Vector3::zeros();
    let mut d_v = Vector3::zeros();
    for (i, g) in transformed.iter().enumerate() {
        let gc = grads.centers[i];
        local.centers[i] = r.tr_mul(&gc);
        d_v += gc;
        d_omega += g.center.cross(&gc);

        let gq = Vector4::from(grads.orientations[i]);
        let lq = l_t * gq;
        local.orientations[i] = [lq[0], lq[1], lq[2], lq[3]];
        let rq = quat_right_matrix(&g.orientation).transpose() * gq;
        d_omega += 0.5 * Vector3::new(rq[1], rq[2], rq[3]);

        local.opacities[i] = grads.opacities[i];
        local.scales[i] = grads.scales[i];
        let mut sh = grads.sh[i];
        for ch in 0..3 {
            let gl = Vector3::new(grads.sh[i][1][ch], grads.sh[i][2][ch], grads.sh[i][3][ch]);
            let cl = Vector3::new(g.sh[1][ch], g.sh[2][ch], g.sh[3][ch]);
            let back = m_t * gl;
            sh[1][ch] = back.x;
            sh[2][ch] = back.y;
            sh[3][ch] = back.z;
            d_omega += (p.transpose() * cl).cross(&(p.transpose() * gl));
        }
        local.sh[i] = sh;
    }
    (local, Twist::new(d_omega, d_v))
}

/// Union `a ∪ b`, preserving order (`a` first).
pub fn merge_gaussians(a: &GaussianSet, b: &GaussianSet) -> GaussianSet {
    let mut gaussians = Vec::with_capacity(a.len() + b.len());
    gaussians.extend_from_slice(&a.gaussians);
    gaussians.extend_from_slice(&b.gaussians);
    GaussianSet { gaussians }
}

/// Pre-activation attributes predicted for one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawAttributes {
    pub opacity: f64,
    pub scale: [f64; 3],
    pub orientation: [f64; 4],
    pub sh: ShCoeffs,
    pub offset: [f64; 2],
}

impl Default for RawAttributes {
    /// Zero pre-activations (opacity 0.5, unit scale) with the identity
    /// orientation, since a zero quaternion cannot be normalized.
    fn default() -> Self {
        Self {
            opacity: 0.0,
            scale: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
            sh: [[0.0; 3]; 4],
            offset: [0.0; 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawAttributeField {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<RawAttributes>,
}

impl RawAttributeField {
    pub fn uniform(width: usize, height: usize, value: RawAttributes) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|p| {
            p.opacity.is_finite()
                && p.scale.iter().all(|v| v.is_finite())
                && p.orientation.iter().all(|v| v.is_finite())
                && p.sh.iter().flatten().all(|v| v.is_finite())
                && p.offset.iter().all(|v| v.is_finite())
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn scale_activation(raw: f64) -> f64 {
    raw.clamp(SCALE_MIN.ln(), SCALE_MAX.ln()).exp()
}

/// Camera-frame centers `D(x,y) K⁻¹ (x + 0.5 + δx, y + 0.5 + δy, 1)ᵀ` in
/// row-major pixel order. Offsets are clamped to `[-1, 1]` pixels.
pub fn unproject_pixels(
    depth: &DepthMap,
    offsets: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> Result<Vec<Vector3<f64>>> {
    if depth.dims() != (k.width, k.height) || offsets.len() != k.pixel_count() {
        return Err(Error::ShapeMismatch(format!(
            "depth {:?} and {} offsets for a {}x{} camera",
            depth.dims(),
            offsets.len(),
            k.width,
            k.height
        )));
    }
    depth.ensure_positive()?;
    let mut out = Vec::with_capacity(offsets.len());
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let [dx, dy] = offsets[i].map(|o| o.clamp(-1.0, 1.0));
            out.push(depth.data()[i] * k.ray(x as f64 + 0.5 + dx, y as f64 + 0.5 + dy));
        }
    }
    Ok(out)
}

/// Pixel-aligned Gaussians in the camera frame: one per pixel, with
/// `α = sigmoid`, `s = exp(clamp)`, `q = normalize`, offsets `tanh`-bounded.
pub fn build_gaussians(
    raw: &RawAttributeField,
    depth: &DepthMap,
    k: &CameraIntrinsics,
) -> Result<GaussianSet> {
    if (raw.width, raw.height) != (k.width, k.height) || raw.pixels.len() != k.pixel_count() {
        return Err(Error::ShapeMismatch(format!(
            "raw field {}x{} for a {}x{} camera",
            raw.width, raw.height, k.width, k.height
        )));
    }
    let offsets: Vec<[f64; 2]> = raw.pixels.iter().map(|p| p.offset.map(f64::tanh)).collect();
    let centers = unproject_pixels(depth, &offsets, k)?;
    Ok(raw
        .pixels
        .iter()
        .zip(centers)
        .map(|(p, center)| {
            let qn = p.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian {
                center,
                opacity: sigmoid(p.opacity),
                scale: Vector3::from(p.scale.map(scale_activation)),
                orientation: p.orientation.map(|v| v / qn),
                sh: p.sh,
            }
        })
        .collect())
}

/// Gradients of [`build_gaussians`] with respect to the raw field and the
/// depth map.
pub fn build_gaussians_backward(
    raw: &RawAttributeField,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    grads: &GaussianGradients,
) -> (Vec<RawAttributes>, Vec<f64>) {
    let lo = SCALE_MIN.ln();
    let hi = SCALE_MAX.ln();
    let mut d_raw = Vec::with_capacity(raw.pixels.len());
    let mut d_depth = Vec::with_capacity(raw.pixels.len());
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let p = &raw.pixels[i];
            let d = depth.data()[i];
            let gc = grads.centers[i];
            let off = p.offset.map(f64::tanh);
            let ray = k.ray(x as f64 + 0.5 + off[0], y as f64 + 0.5 + off[1]);
            d_depth.push(gc.dot(&ray));

            let alpha = sigmoid(p.opacity);
            let mut scale = [0.0; 3];
            for a in 0..3 {
                if p.scale[a] > lo && p.scale[a] < hi {
                    scale[a] = grads.scales[i][a] * p.scale[a].exp();
                }
            }
            let qn = p.orientation.iter().map(|v| v * v).sum::<f64>().sqrt();
            let qh = p.orientation.map(|v| v / qn);
            let gq = grads.orientations[i];
            let radial: f64 = (0..4).map(|a| qh[a] * gq[a]).sum();
            let orientation = [0, 1, 2, 3].map(|a| (gq[a] - qh[a] * radial) / qn);
            let offset = [
                gc.x * d / k.fx * (1.0 - off[0] * off[0]),
                gc.y * d / k.fy * (1.0 - off[1] * off[1]),
            ];
            d_raw.push(RawAttributes {
                opacity: grads.opacities[i] * alpha * (1.0 - alpha),
                scale,
                orientation,
                sh: grads.sh[i],
                offset,
            });
        }
    }
    (d_raw, d_depth)
}

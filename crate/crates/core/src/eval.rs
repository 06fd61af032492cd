//! Image and pose metrics: PSNR, geodesic rotation and translation-direction
//! errors, and absolute trajectory error after similarity alignment.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::plane::ImagePlane;

/// Translations shorter than this have no usable direction.
pub const DEGENERATE_TRANSLATION: f64 = 1e-9;

/// `10·log₁₀(1 / MSE)`; identical images give `+∞`.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len();
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    /// `NaN` when `degenerate_translation` is set; stored as `null` in JSON.
    #[serde(deserialize_with = "nan_from_null")]
    pub translation_deg: f64,
    pub degenerate_translation: bool,
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Geodesic rotation angle between `est` and `gt`, and the angle between
/// their translation directions.
pub fn pose_error(est: &RigidTransform, gt: &RigidTransform) -> PoseError {
    let rel = gt.rotation().transpose() * est.rotation();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    let sin = (0.5 * axis.norm()).min(1.0);
    let rotation_deg = sin.atan2(cos).to_degrees();
    let (te, tg) = (est.translation(), gt.translation());
    let degenerate = te.norm() < DEGENERATE_TRANSLATION || tg.norm() < DEGENERATE_TRANSLATION;
    PoseError {
        rotation_deg,
        translation_deg: if degenerate { f64::NAN } else { angle_between_deg(te, tg) },
        degenerate_translation: degenerate,
    }
}

/// Ordered camera centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub centers: Vec<Vector3<f64>>,
}

impl Trajectory {
    pub fn new(centers: Vec<Vector3<f64>>) -> Self {
        Self { centers }
    }

    pub fn from_poses<'a>(poses: impl IntoIterator<Item = &'a RigidTransform>) -> Self {
        Self::new(poses.into_iter().map(|p| *p.translation()).collect())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Least-squares similarity `(s, R, t)` with `s·R·src + t ≈ dst`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Closed-form similarity alignment of `src` onto `dst` (Umeyama).
pub fn align_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 2 {
        return Err(Error::LengthMismatch(src.len(), 2));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        cov += (d - mu_d) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace_ds = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum::<f64>();
    let scale = if var_s > 0.0 { trace_ds / var_s } else { 1.0 };
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// RMSE between `gt` and `est` after aligning `est` to `gt` with a similarity.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let sim = align_similarity(&est.centers, &gt.centers)?;
    let sq: f64 = est
        .centers
        .iter()
        .zip(&gt.centers)
        .map(|(e, g)| (sim.apply(e) - g).norm_squared())
        .sum();
    Ok((sq / est.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

/// Mean and median of the finite entries of `values`.
pub fn summarize(values: &[f64]) -> Summary {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Summary {
            mean: f64::NAN,
            median: f64::NAN,
            count: 0,
        };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Summary {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        count: n,
    }
}

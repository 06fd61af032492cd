//! Photometric losses: windowed SSIM, the L1/SSIM photometric error, inverse
//! warping by depth and pose, and the reprojection, rendering and total
//! losses, each with an analytic gradient.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{left_twist_gradient, CameraIntrinsics, RigidTransform, Twist};
use crate::plane::{DepthMap, ImagePlane, Mask};

/// Warps with fewer valid pixels than this fraction log a warning.
pub const MIN_VALID_FRACTION: f64 = 0.1;
/// Projected points closer than this to the source image plane are invalid.
const MIN_PROJECTED_DEPTH: f64 = 1e-6;
/// Slack on the sampling bounds so identity warps keep border pixels.
const BOUNDS_SLACK: f64 = 1e-9;
/// Sample coordinates this close to a texel center are snapped onto it, so
/// identity warps reproduce the source exactly.
const TEXEL_SNAP: f64 = 1e-9;

fn snap_to_texel(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < TEXEL_SNAP {
        r
    } else {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// SSIM share `ω` of the photometric error.
    pub omega: f64,
    /// Weight of the reprojection loss.
    pub lambda1: f64,
    /// Weight of the rendering loss.
    pub lambda2: f64,
    /// SSIM weight inside the rendering loss.
    pub gamma1: f64,
    /// Squared-error weight inside the rendering loss.
    pub gamma2: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            omega: 0.85,
            lambda1: 1.0,
            lambda2: 1.0,
            gamma1: 0.2,
            gamma2: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ShapeMismatch(format!("loss config: {m}")));
        if !(0.0..=1.0).contains(&self.omega) {
            return bad("omega must lie in [0, 1]");
        }
        if [self.lambda1, self.lambda2, self.gamma1, self.gamma2].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return bad("SSIM window must be odd and at least 3");
        }
        Ok(())
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" correlation: output is `(w - n + 1) × (h - n + 1)`.
fn filter_valid(src: &[f64], w: usize, h: usize, kern: &[f64]) -> Vec<f64> {
    let n = kern.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = kern.iter().zip(&row[x..x + n]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, k) in kern.iter().enumerate() {
                s += k * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow × oh` map back to `w × h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, kern: &[f64]) -> Vec<f64> {
    let n = kern.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (i, k) in kern.iter().enumerate() {
                tmp[(y + i) * ow + x] += k * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (i, k) in kern.iter().enumerate() {
                out[y * w + x + i] += k * v;
            }
        }
    }
    out
}

/// Windows of size `n` (in "valid" filter layout) whose whole support is
/// inside `mask`.
fn full_windows(mask: &Mask, n: usize) -> Vec<bool> {
    let (w, h) = mask.dims();
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let bad = usize::from(!mask.get(x, y));
            sat[(y + 1) * (w + 1) + x + 1] = bad + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let (ow, oh) = (w - n + 1, h - n + 1);
    let at = |x: usize, y: usize| sat[y * (w + 1) + x];
    (0..oh)
        .flat_map(|y| (0..ow).map(move |x| (x, y)))
        .map(|(x, y)| at(x + n, y + n) + at(x, y) - at(x + n, y) - at(x, y + n) == 0)
        .collect()
}

/// Mean SSIM over channels and windows (optionally only windows lying wholly
/// inside `mask`), and optionally its gradient with respect to `b`.
fn ssim_impl(
    a: &ImagePlane,
    b: &ImagePlane,
    mask: Option<&Mask>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    a.ensure_same_shape(b)?;
    let (w, h) = a.dims();
    let n = cfg.ssim_window;
    if w < n || h < n {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} image is smaller than the {n}x{n} SSIM window"
        )));
    }
    let kern = gaussian_window(n, cfg.ssim_sigma);
    let ow = w - n + 1;
    let oh = h - n + 1;
    let centers = match mask {
        None => vec![true; ow * oh],
        Some(m) => full_windows(m, n),
    };
    let count = centers.iter().filter(|v| **v).count();
    if count == 0 {
        return Ok((0.0, want_grad.then(|| vec![0.0; w * h * 3])));
    }
    let norm = 1.0 / (count as f64 * 3.0);
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for ch in 0..3 {
        let ac = a.channel(ch);
        let bc = b.channel(ch);
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let ma = filter_valid(&ac, w, h, &kern);
        let mb = filter_valid(&bc, w, h, &kern);
        let maa = filter_valid(&prod(&ac, &ac), w, h, &kern);
        let mbb = filter_valid(&prod(&bc, &bc), w, h, &kern);
        let mab = filter_valid(&prod(&ac, &bc), w, h, &kern);
        let mut g_mb = vec![0.0; ow * oh];
        let mut g_mbb = vec![0.0; ow * oh];
        let mut g_mab = vec![0.0; ow * oh];
        for i in 0..ow * oh {
            if !centers[i] {
                continue;
            }
            let var_a = maa[i] - ma[i] * ma[i];
            let var_b = mbb[i] - mb[i] * mb[i];
            let cov = mab[i] - ma[i] * mb[i];
            let a1 = 2.0 * ma[i] * mb[i] + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = ma[i] * ma[i] + mb[i] * mb[i] + c1;
            let b2 = var_a + var_b + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                g_mb[i] = norm
                    * s
                    * (2.0 * ma[i] / a1 - 2.0 * ma[i] / a2 - 2.0 * mb[i] / b1 + 2.0 * mb[i] / b2);
                g_mbb[i] = -norm * s / b2;
                g_mab[i] = norm * 2.0 * s / a2;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let s_mb = filter_valid_adjoint(&g_mb, w, h, &kern);
            let s_mbb = filter_valid_adjoint(&g_mbb, w, h, &kern);
            let s_mab = filter_valid_adjoint(&g_mab, w, h, &kern);
            for p in 0..w * h {
                grad[p * 3 + ch] = s_mb[p] + 2.0 * bc[p] * s_mbb[p] + ac[p] * s_mab[p];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean local SSIM with a Gaussian window, averaged over channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane, cfg: &LossConfig) -> Result<f64> {
    Ok(ssim_impl(a, b, None, cfg, false)?.0)
}

/// SSIM and its gradient with respect to `b`.
pub fn ssim_grad(a: &ImagePlane, b: &ImagePlane, mask: Option<&Mask>, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ssim_impl(a, b, mask, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn mean_abs(a: &ImagePlane, b: &ImagePlane, mask: Option<&Mask>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (p, (pa, pb)) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m.data()[p]) {
            continue;
        }
        count += 1;
        sum += pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / (3 * count) as f64, count)
    }
}

/// `ω/2 (1 − SSIM(a, b)) + (1 − ω) ‖a − b‖₁` with a mean-reduced L1 term.
pub fn photometric_error(a: &ImagePlane, b: &ImagePlane, cfg: &LossConfig) -> Result<f64> {
    photometric_error_masked(a, b, None, cfg)
}

/// Photometric error restricted to valid pixels of `mask`.
pub fn photometric_error_masked(a: &ImagePlane, b: &ImagePlane, mask: Option<&Mask>, cfg: &LossConfig) -> Result<f64> {
    let s = if cfg.omega > 0.0 {
        ssim_impl(a, b, mask, cfg, false)?.0
    } else {
        a.ensure_same_shape(b)?;
        1.0
    };
    let (l1, count) = mean_abs(a, b, mask);
    if count == 0 {
        return Ok(0.0);
    }
    Ok(0.5 * cfg.omega * (1.0 - s) + (1.0 - cfg.omega) * l1)
}

/// Masked photometric error and its gradient with respect to `b`.
pub fn photometric_error_grad(
    a: &ImagePlane,
    b: &ImagePlane,
    mask: Option<&Mask>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    a.ensure_same_shape(b)?;
    let (l1, count) = mean_abs(a, b, mask);
    let mut grad = vec![0.0; a.data().len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut value = (1.0 - cfg.omega) * l1;
    if cfg.omega > 0.0 {
        let (s, gs) = ssim_grad(a, b, mask, cfg)?;
        value += 0.5 * cfg.omega * (1.0 - s);
        for (g, v) in grad.iter_mut().zip(gs) {
            *g = -0.5 * cfg.omega * v;
        }
    }
    let scale = (1.0 - cfg.omega) / (3 * count) as f64;
    for (p, (pa, pb)) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m.data()[p]) {
            continue;
        }
        for c in 0..3 {
            let d = pb[c] - pa[c];
            grad[p * 3 + c] += scale * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
        }
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: ImagePlane,
    pub valid_mask: Mask,
}

/// Per-pixel sampling record kept for the backward pass.
#[derive(Clone, Copy, Debug)]
struct Sample {
    point: Vector3<f64>,
    projected: Vector3<f64>,
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
}

fn warp_impl(
    src: &ImagePlane,
    depth: &DepthMap,
    depth_mask: Option<&Mask>,
    tgt_to_src: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<(WarpResult, Vec<Option<Sample>>)> {
    let (w, h) = src.dims();
    if depth.dims() != (w, h) || (k.width, k.height) != (w, h) {
        return Err(Error::ShapeMismatch(format!(
            "source {w}x{h}, depth {:?}, camera {}x{}",
            depth.dims(),
            k.width,
            k.height
        )));
    }
    if w < 2 || h < 2 {
        return Err(Error::ShapeMismatch("bilinear warping needs at least 2x2 pixels".into()));
    }
    let mut image = ImagePlane::new(w, h);
    let mut valid = vec![false; w * h];
    let mut samples = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = depth.data()[i];
            if depth_mask.is_some_and(|m| !m.data()[i]) || !(d > 0.0) {
                continue;
            }
            let point = d * k.pixel_ray(x, y);
            let projected = tgt_to_src.transform_point(&point);
            if projected.z <= MIN_PROJECTED_DEPTH {
                continue;
            }
            let uv = k.project(&projected);
            let sx = uv.x - 0.5;
            let sy = uv.y - 0.5;
            let max_x = (w - 1) as f64;
            let max_y = (h - 1) as f64;
            if !(sx >= -BOUNDS_SLACK && sx <= max_x + BOUNDS_SLACK && sy >= -BOUNDS_SLACK && sy <= max_y + BOUNDS_SLACK) {
                continue;
            }
            let sx = snap_to_texel(sx.clamp(0.0, max_x));
            let sy = snap_to_texel(sy.clamp(0.0, max_y));
            let x0 = (sx.floor() as usize).min(w - 2);
            let y0 = (sy.floor() as usize).min(h - 2);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..3 {
                let v = (1.0 - fy) * ((1.0 - fx) * src.get(x0, y0, c) + fx * src.get(x0 + 1, y0, c))
                    + fy * ((1.0 - fx) * src.get(x0, y0 + 1, c) + fx * src.get(x0 + 1, y0 + 1, c));
                image.set(x, y, c, v);
            }
            valid[i] = true;
            samples[i] = Some(Sample {
                point,
                projected,
                x0,
                y0,
                fx,
                fy,
            });
        }
    }
    let valid_mask = Mask::from_vec(w, h, valid)?;
    Ok((WarpResult { image, valid_mask }, samples))
}

/// Resamples `src` into the target view: each target pixel is lifted with
/// `depth_tgt`, moved by `tgt_to_src`, projected with `k` and bilinearly
/// sampled. Out-of-bounds or behind-camera pixels are marked invalid.
pub fn inverse_warp(
    src: &ImagePlane,
    depth_tgt: &DepthMap,
    tgt_to_src: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    depth_tgt.ensure_positive()?;
    Ok(warp_impl(src, depth_tgt, None, tgt_to_src, k)?.0)
}

/// Gradients of a loss through [`inverse_warp`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGradients {
    pub depth: Vec<f64>,
    /// `∂L/∂R` of `tgt_to_src`.
    pub d_rotation: Matrix3<f64>,
    /// `∂L/∂t` of `tgt_to_src`.
    pub d_translation: Vector3<f64>,
}

fn warp_backward(
    src: &ImagePlane,
    samples: &[Option<Sample>],
    tgt_to_src: &RigidTransform,
    k: &CameraIntrinsics,
    upstream: &[f64],
) -> WarpGradients {
    let (w, h) = src.dims();
    let mut depth = vec![0.0; w * h];
    let mut d_rotation = Matrix3::zeros();
    let mut d_translation = Vector3::zeros();
    let r = tgt_to_src.rotation();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(s) = samples[i] else { continue };
            let mut g_sx = 0.0;
            let mut g_sy = 0.0;
            for c in 0..3 {
                let g = upstream[i * 3 + c];
                if g == 0.0 {
                    continue;
                }
                let v00 = src.get(s.x0, s.y0, c);
                let v10 = src.get(s.x0 + 1, s.y0, c);
                let v01 = src.get(s.x0, s.y0 + 1, c);
                let v11 = src.get(s.x0 + 1, s.y0 + 1, c);
                g_sx += g * ((1.0 - s.fy) * (v10 - v00) + s.fy * (v11 - v01));
                g_sy += g * ((1.0 - s.fx) * (v01 - v00) + s.fx * (v11 - v10));
            }
            if g_sx == 0.0 && g_sy == 0.0 {
                continue;
            }
            let p = s.projected;
            let g_p = Vector3::new(
                g_sx * k.fx / p.z,
                g_sy * k.fy / p.z,
                -(g_sx * k.fx * p.x + g_sy * k.fy * p.y) / (p.z * p.z),
            );
            d_translation += g_p;
            d_rotation += g_p * s.point.transpose();
            depth[i] = r.tr_mul(&g_p).dot(&k.pixel_ray(x, y));
        }
    }
    WarpGradients {
        depth,
        d_rotation,
        d_translation,
    }
}

/// Photometric error of a warp against `target` and its gradients with
/// respect to the target depth and the left twist of `tgt_to_src`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpLoss {
    pub value: f64,
    pub valid_fraction: f64,
    pub d_depth: Vec<f64>,
    pub d_rotation: Matrix3<f64>,
    pub d_translation: Vector3<f64>,
}

pub fn warp_loss_grad(
    target: &ImagePlane,
    src: &ImagePlane,
    depth_tgt: &DepthMap,
    depth_mask: Option<&Mask>,
    tgt_to_src: &RigidTransform,
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<WarpLoss> {
    let (warp, samples) = warp_impl(src, depth_tgt, depth_mask, tgt_to_src, k)?;
    let valid_fraction = warp.valid_mask.fraction();
    if valid_fraction < MIN_VALID_FRACTION {
        log::warn!("inverse warp has only {:.1}% valid pixels", 100.0 * valid_fraction);
    }
    let (value, g_img) = photometric_error_grad(target, &warp.image, Some(&warp.valid_mask), cfg)?;
    let g = warp_backward(src, &samples, tgt_to_src, k, &g_img);
    Ok(WarpLoss {
        value,
        valid_fraction,
        d_depth: g.depth,
        d_rotation: g.d_rotation,
        d_translation: g.d_translation,
    })
}

/// Converts `(∂L/∂R', ∂L/∂t')` of `P⁻¹ = (R', t')` into the left-twist
/// gradient of `P`.
pub fn inverse_pose_twist(pose: &RigidTransform, d_rot_inv: &Matrix3<f64>, d_trans_inv: &Vector3<f64>) -> Twist {
    let r = pose.rotation();
    let t = pose.translation();
    let d_t = -(r * d_trans_inv);
    let d_r = d_rot_inv.transpose() - t * d_trans_inv.transpose();
    left_twist_gradient(pose, &d_r, &d_t)
}

/// `pe(I_t, I_{c1→t}) + pe(I_t, I_{c2→t})`, where each source is warped with
/// `inverse(T_{ci→t})`.
#[allow(clippy::too_many_arguments)]
pub fn reprojection_loss(
    target: &ImagePlane,
    c1: &ImagePlane,
    c2: &ImagePlane,
    depth_t: &DepthMap,
    c1_to_t: &RigidTransform,
    c2_to_t: &RigidTransform,
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (src, pose) in [(c1, c1_to_t), (c2, c2_to_t)] {
        let warp = inverse_warp(src, depth_t, &pose.inverse(), k)?;
        total += photometric_error_masked(target, &warp.image, Some(&warp.valid_mask), cfg)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectionGrad {
    pub value: f64,
    pub per_view: [f64; 2],
    pub valid_fraction: [f64; 2],
    pub d_depth: Vec<f64>,
    /// Left-twist gradients of `T_{c1→t}` and `T_{c2→t}`.
    pub d_poses: [Twist; 2],
}

/// Reprojection loss with gradients; pixels outside `depth_mask` are not
/// lifted.
#[allow(clippy::too_many_arguments)]
pub fn reprojection_loss_grad(
    target: &ImagePlane,
    sources: [&ImagePlane; 2],
    depth_t: &DepthMap,
    depth_mask: Option<&Mask>,
    poses: [&RigidTransform; 2],
    k: &CameraIntrinsics,
    cfg: &LossConfig,
) -> Result<ReprojectionGrad> {
    let mut d_depth = vec![0.0; k.pixel_count()];
    let mut per_view = [0.0; 2];
    let mut valid_fraction = [0.0; 2];
    let mut d_poses = [Twist::zero(); 2];
    for v in 0..2 {
        let inv = poses[v].inverse();
        let wl = warp_loss_grad(target, sources[v], depth_t, depth_mask, &inv, k, cfg)?;
        per_view[v] = wl.value;
        valid_fraction[v] = wl.valid_fraction;
        for (a, b) in d_depth.iter_mut().zip(&wl.d_depth) {
            *a += b;
        }
        d_poses[v] = inverse_pose_twist(poses[v], &wl.d_rotation, &wl.d_translation);
    }
    Ok(ReprojectionGrad {
        value: per_view[0] + per_view[1],
        per_view,
        valid_fraction,
        d_depth,
        d_poses,
    })
}

fn mean_squared(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// `Σ_k γ₁ (1 − SSIM(I_k, Î_k)) + γ₂ mean((I_k − Î_k)²)` over the views.
pub fn rendering_loss(renders: &[ImagePlane], images: &[ImagePlane], cfg: &LossConfig) -> Result<f64> {
    if renders.len() != images.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} renders for {} images",
            renders.len(),
            images.len()
        )));
    }
    let mut total = 0.0;
    for (r, i) in renders.iter().zip(images) {
        i.ensure_same_shape(r)?;
        if cfg.gamma1 > 0.0 {
            total += cfg.gamma1 * (1.0 - ssim(i, r, cfg)?);
        }
        total += cfg.gamma2 * mean_squared(i, r);
    }
    Ok(total)
}

/// Rendering loss and its gradient with respect to each rendered image.
pub fn rendering_loss_grad(
    renders: &[ImagePlane],
    images: &[ImagePlane],
    cfg: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if renders.len() != images.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} renders for {} images",
            renders.len(),
            images.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(renders.len());
    for (r, i) in renders.iter().zip(images) {
        i.ensure_same_shape(r)?;
        let n = r.data().len() as f64;
        let mut g: Vec<f64> = r
            .data()
            .iter()
            .zip(i.data())
            .map(|(x, y)| cfg.gamma2 * 2.0 * (x - y) / n)
            .collect();
        if cfg.gamma1 > 0.0 {
            let (s, gs) = ssim_grad(i, r, None, cfg)?;
            total += cfg.gamma1 * (1.0 - s);
            for (a, b) in g.iter_mut().zip(gs) {
                *a -= cfg.gamma1 * b;
            }
        }
        total += cfg.gamma2 * mean_squared(i, r);
        grads.push(g);
    }
    Ok((total, grads))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reprojection: f64,
    pub rendering: f64,
}

/// `λ₁ L_proj + λ₂ L_ren`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * parts.reprojection + cfg.lambda2 * parts.rendering
}

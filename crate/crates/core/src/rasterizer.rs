//! Deterministic CPU splatting: EWA projection, globally depth-sorted
//! front-to-back compositing of color, alpha and expected depth, and the exact
//! reverse-mode gradients of all three outputs with respect to every Gaussian
//! attribute and the camera pose.


use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    quat_to_matrix, sh_linear_basis, sh_raw_color, Gaussian, GaussianGradients, GaussianSet, SH_C0,
    SH_C1,
};
use crate::geometry::{left_rotation_gradient, left_twist_gradient, CameraIntrinsics, RigidTransform, Twist};
use crate::threads;

/// Isotropic dilation added to every projected covariance, pixels².
pub const LOW_PASS: f64 = 0.3;
/// Compositing stops once transmittance falls below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Support of a splat in standard deviations.
pub const CUTOFF_SIGMA: f64 = 3.0;
/// The kernel is tapered to zero between this radius and [`CUTOFF_SIGMA`].
pub const TAPER_SIGMA: f64 = 2.5;
/// Floor on accumulated weight when normalizing expected depth.
pub const DEPTH_WEIGHT_FLOOR: f64 = 1e-8;

const Q_MAX: f64 = CUTOFF_SIGMA * CUTOFF_SIGMA;
const Q_TAPER: f64 = TAPER_SIGMA * TAPER_SIGMA;
/// Pixel rows are split into this many bands for the backward pass; the
/// per-band partial sums are added in band order.
const BACKWARD_BANDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Stop compositing a pixel once transmittance is below
    /// [`MIN_TRANSMITTANCE`].
    pub early_stop: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            near: 0.01,
            far: 1000.0,
            background: [0.0; 3],
            early_stop: true,
        }
    }
}

impl RenderOptions {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CullReason {
    BehindNearPlane,
    BeyondFarPlane,
    OffScreen,
}

/// A Gaussian projected into a view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian.
    pub index: usize,
    /// Continuous image coordinate of the projected center.
    pub mean: Vector2<f64>,
    /// Projected covariance including the low-pass dilation, pixels².
    pub cov: Matrix2<f64>,
    /// `cov⁻¹`.
    pub conic: Matrix2<f64>,
    pub view_depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Inclusive pixel ranges `[x0, x1] × [y0, y1]` covering the 3σ support.
    pub bbox: [usize; 4],
}

/// Intermediates of the EWA projection shared by forward and backward.
struct Projection {
    cam: Vector3<f64>,
    jac: nalgebra::Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    cov_world: Matrix3<f64>,
    view_dir: Vector3<f64>,
    view_dist: f64,
    raw_color: [f64; 3],
    mean: Vector2<f64>,
    cov2d: Matrix2<f64>,
}

fn project_raw(g: &Gaussian, k: &CameraIntrinsics, cam: &RigidTransform) -> Projection {
    let r = cam.rotation();
    let p = cam.inverse_transform_point(&g.center);
    let (x, y, z) = (p.x, p.y, p.z);
    let jac = nalgebra::Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let cov_world = g.covariance();
    let cov_cam = r.transpose() * cov_world * r;
    let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * LOW_PASS;
    let offset = g.center - cam.translation();
    let view_dist = offset.norm();
    let view_dir = offset / view_dist;
    Projection {
        cam: p,
        jac,
        cov_cam,
        cov_world,
        view_dir,
        view_dist,
        raw_color: sh_raw_color(&g.sh, &view_dir),
        mean: Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy),
        cov2d,
    }
}

/// Projects one Gaussian into the camera `cam` (camera-to-world).
pub fn project_gaussian(
    g: &Gaussian,
    index: usize,
    k: &CameraIntrinsics,
    cam: &RigidTransform,
    opts: &RenderOptions,
) -> std::result::Result<Splat2D, CullReason> {
    let z = cam.inverse_transform_point(&g.center).z;
    if z <= opts.near {
        return Err(CullReason::BehindNearPlane);
    }
    if z > opts.far {
        return Err(CullReason::BeyondFarPlane);
    }
    let pr = project_raw(g, k, cam);
    let c = pr.cov2d;
    let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
    let conic = Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]) / det;
    let mid = 0.5 * (c[(0, 0)] + c[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = CUTOFF_SIGMA * lambda_max.sqrt();
    // pixel x samples x + 0.5
    let x0 = (pr.mean.x - radius - 0.5).ceil();
    let x1 = (pr.mean.x + radius - 0.5).floor();
    let y0 = (pr.mean.y - radius - 0.5).ceil();
    let y1 = (pr.mean.y + radius - 0.5).floor();
    let w = k.width as f64;
    let h = k.height as f64;
    if !(x1 >= 0.0 && y1 >= 0.0 && x0 <= w - 1.0 && y0 <= h - 1.0 && x0 <= x1 && y0 <= y1) {
        return Err(CullReason::OffScreen);
    }
    let bbox = [
        x0.max(0.0) as usize,
        x1.min(w - 1.0) as usize,
        y0.max(0.0) as usize,
        y1.min(h - 1.0) as usize,
    ];
    Ok(Splat2D {
        index,
        mean: pr.mean,
        cov: c,
        conic,
        view_depth: z,
        color: pr.raw_color.map(|v| v.clamp(0.0, 1.0)),
        opacity: g.opacity,
        bbox,
    })
}

/// Splat footprint `exp(-q/2)` with a C² taper to zero on `[Q_TAPER, Q_MAX]`,
/// and its derivative in `q`.
#[inline]
fn kernel(q: f64) -> (f64, f64) {
    if q >= Q_MAX {
        return (0.0, 0.0);
    }
    let e = (-0.5 * q).exp();
    if q <= Q_TAPER {
        return (e, -0.5 * e);
    }
    let width = Q_MAX - Q_TAPER;
    let u = (q - Q_TAPER) / width;
    let v = 1.0 - u;
    let s = v * v * v * (1.0 + 3.0 * u + 6.0 * u * u);
    let ds = -30.0 * u * u * v * v / width;
    (e * s, -0.5 * e * s + e * ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, background composited.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Alpha-weighted expected view depth.
    pub depth: Vec<f64>,
    /// Gaussians dropped by near/far/off-screen culling.
    pub culled: usize,
}

impl RenderOutput {
    pub fn image(&self) -> crate::plane::ImagePlane {
        crate::plane::ImagePlane::from_vec(self.width, self.height, self.color.clone())
            .expect("render buffer shape")
    }

    pub fn depth_map(&self) -> crate::plane::DepthMap {
        crate::plane::DepthMap::from_vec(self.width, self.height, self.depth.clone())
            .expect("render buffer shape")
    }
}

/// Gradients of a scalar loss with respect to the three render outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderUpstream {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: vec![0.0; width * height * 3],
            alpha: vec![0.0; width * height],
            depth: vec![0.0; width * height],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub gaussians: GaussianGradients,
    /// `∂L/∂t` of the camera-to-world pose.
    pub d_translation: Vector3<f64>,
    /// `∂L/∂R` of the camera-to-world rotation.
    pub d_rotation: Matrix3<f64>,
    /// Gradient for the left perturbation `R ← exp([ω]ₓ) R` with `t` fixed.
    pub d_rotation_tangent: Vector3<f64>,
}

impl RenderGradients {
    /// Gradient for the left twist perturbation `T ← exp(ξ) T` of `cam`.
    pub fn pose_twist(&self, cam: &RigidTransform) -> Twist {
        left_twist_gradient(cam, &self.d_rotation, &self.d_translation)
    }
}

/// Sorted splats and per-pixel candidate lists of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    fingerprint: u64,
    splats: Vec<Splat2D>,
    /// CSR offsets into `entries`, one row per pixel plus a terminator.
    offsets: Vec<u32>,
    /// Positions into `splats`, front to back per pixel.
    entries: Vec<u32>,
}

impl ForwardState {
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }
}

/// Cheap digest tying a [`ForwardState`] to its inputs.
fn fingerprint(set: &GaussianSet, k: &CameraIntrinsics, cam: &RigidTransform, opts: &RenderOptions) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15 ^ set.len() as u64;
    let mut put = |v: f64| {
        h = (h ^ v.to_bits()).wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    };
    for v in [k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64] {
        put(v);
    }
    for v in cam.to_row_major() {
        put(v);
    }
    for v in [opts.near, opts.far, opts.background[0], opts.background[1], opts.background[2]] {
        put(v);
    }
    put(if opts.early_stop { 1.0 } else { 0.0 });
    for g in set.iter() {
        for v in g.center.iter().chain(g.scale.iter()) {
            put(*v);
        }
        put(g.opacity);
        for v in g.orientation {
            put(v);
        }
        for v in g.sh.iter().flatten() {
            put(*v);
        }
    }
    h
}

pub fn render(set: &GaussianSet, k: &CameraIntrinsics, cam: &RigidTransform, background: [f64; 3]) -> RenderOutput {
    render_with(set, k, cam, &RenderOptions::with_background(background))
}

pub fn render_with(set: &GaussianSet, k: &CameraIntrinsics, cam: &RigidTransform, opts: &RenderOptions) -> RenderOutput {
    render_forward(set, k, cam, opts).0
}

fn bin_splats(splats: &[Splat2D], k: &CameraIntrinsics) -> (Vec<u32>, Vec<u32>) {
    let n_pix = k.pixel_count();
    let mut counts = vec![0u32; n_pix + 1];
    for s in splats {
        let [x0, x1, y0, y1] = s.bbox;
        for y in y0..=y1 {
            for c in &mut counts[y * k.width + x0..=y * k.width + x1] {
                *c += 1;
            }
        }
    }
    let mut offsets = vec![0u32; n_pix + 1];
    for i in 0..n_pix {
        offsets[i + 1] = offsets[i] + counts[i];
    }
    let mut cursor = offsets.clone();
    let mut entries = vec![0u32; offsets[n_pix] as usize];
    for (pos, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = y * k.width + x;
                entries[cursor[p] as usize] = pos as u32;
                cursor[p] += 1;
            }
        }
    }
    (offsets, entries)
}

/// Forward pass returning the state needed by [`render_backward_with_state`].
pub fn render_forward(
    set: &GaussianSet,
    k: &CameraIntrinsics,
    cam: &RigidTransform,
    opts: &RenderOptions,
) -> (RenderOutput, ForwardState) {
    let mut splats = Vec::with_capacity(set.len());
    let mut culled = 0;
    for (i, g) in set.iter().enumerate() {
        match project_gaussian(g, i, k, cam, opts) {
            Ok(s) => splats.push(s),
            Err(_) => culled += 1,
        }
    }
    let mut order: Vec<(f64, usize, usize)> = splats.iter().enumerate().map(|(i, s)| (s.view_depth, s.index, i)).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let splats: Vec<Splat2D> = order.iter().map(|o| splats[o.2]).collect();
    let (offsets, entries) = bin_splats(&splats, k);

    let (w, h) = (k.width, k.height);
    let mut color = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    threads::pool().install(|| {
        color
            .par_chunks_mut(w * 3)
            .zip(alpha.par_chunks_mut(w))
            .zip(depth.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, ((crow, arow), drow))| {
                for x in 0..w {
                    let p = y * w + x;
                    let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut acc = [0.0; 3];
                    let mut wsum = 0.0;
                    let mut zsum = 0.0;
                    for &pos in &entries[offsets[p] as usize..offsets[p + 1] as usize] {
                        let s = &splats[pos as usize];
                        let d = px - s.mean;
                        let q = d.dot(&(s.conic * d));
                        let (g, _) = kernel(q);
                        if g == 0.0 {
                            continue;
                        }
                        if opts.early_stop && t < MIN_TRANSMITTANCE {
                            break;
                        }
                        let a = s.opacity * g;
                        let wt = a * t;
                        for c in 0..3 {
                            acc[c] += s.color[c] * wt;
                        }
                        wsum += wt;
                        zsum += s.view_depth * wt;
                        t *= 1.0 - a;
                    }
                    for c in 0..3 {
                        crow[x * 3 + c] = acc[c] + t * opts.background[c];
                    }
                    arow[x] = 1.0 - t;
                    drow[x] = zsum / wsum.max(DEPTH_WEIGHT_FLOOR);
                }
            });
    });
    let out = RenderOutput {
        width: w,
        height: h,
        color,
        alpha,
        depth,
        culled,
    };
    let state = ForwardState {
        fingerprint: fingerprint(set, k, cam, opts),
        splats,
        offsets,
        entries,
    };
    (out, state)
}

/// Image-space gradient accumulated per sorted splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

struct Contributor {
    pos: usize,
    a: f64,
    g: f64,
    dg: f64,
    t: f64,
    d: Vector2<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backward_rows(
    rows: std::ops::Range<usize>,
    state: &ForwardState,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
    upstream: &RenderUpstream,
    acc: &mut [SplatGrad],
) {
    let w = k.width;
    let mut list: Vec<Contributor> = Vec::new();
    for y in rows {
        for x in 0..w {
            let p = y * w + x;
            let gc = [upstream.color[p * 3], upstream.color[p * 3 + 1], upstream.color[p * 3 + 2]];
            let ga = upstream.alpha[p];
            let gd = upstream.depth[p];
            if gc == [0.0; 3] && ga == 0.0 && gd == 0.0 {
                continue;
            }
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            list.clear();
            let mut t = 1.0;
            let mut wsum = 0.0;
            let mut zsum = 0.0;
            for &pos in &state.entries[state.offsets[p] as usize..state.offsets[p + 1] as usize] {
                let s = &state.splats[pos as usize];
                let d = px - s.mean;
                let q = d.dot(&(s.conic * d));
                let (g, dg) = kernel(q);
                if g == 0.0 {
                    continue;
                }
                if opts.early_stop && t < MIN_TRANSMITTANCE {
                    break;
                }
                let a = s.opacity * g;
                list.push(Contributor {
                    pos: pos as usize,
                    a,
                    g,
                    dg,
                    t,
                    d,
                });
                wsum += a * t;
                zsum += s.view_depth * a * t;
                t *= 1.0 - a;
            }
            if list.is_empty() {
                continue;
            }
            let floored = wsum <= DEPTH_WEIGHT_FLOOR;
            let denom = wsum.max(DEPTH_WEIGHT_FLOOR);
            let depth = zsum / denom;
            // back-to-front suffix sums of what lies behind each contributor
            let mut behind_color = [0.0; 3];
            let mut behind_depth = 0.0;
            let mut behind_t = 1.0;
            for c in list.iter().rev() {
                let s = &state.splats[c.pos];
                let mut d_a = 0.0;
                for ch in 0..3 {
                    d_a += gc[ch] * (s.color[ch] - behind_color[ch] - behind_t * opts.background[ch]);
                }
                d_a += ga * behind_t;
                let dz_da = s.view_depth - behind_depth;
                d_a += if floored {
                    gd * dz_da / denom
                } else {
                    gd * (dz_da - depth * behind_t) / denom
                };
                d_a *= c.t;

                let wt = c.a * c.t;
                let sg = &mut acc[c.pos];
                for ch in 0..3 {
                    sg.color[ch] += gc[ch] * wt;
                }
                sg.depth += gd * wt / denom;
                sg.opacity += d_a * c.g;
                let d_q = d_a * s.opacity * c.dg;
                let ad = s.conic * c.d;
                sg.mean -= 2.0 * d_q * ad;
                sg.conic += d_q * c.d * c.d.transpose();

                for ch in 0..3 {
                    behind_color[ch] = s.color[ch] * c.a + (1.0 - c.a) * behind_color[ch];
                }
                behind_depth = s.view_depth * c.a + (1.0 - c.a) * behind_depth;
                behind_t *= 1.0 - c.a;
            }
        }
    }
}

/// Rotation-matrix gradient of the normalized quaternion `q`, chained through
/// the normalization.
fn quat_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gh = [gw, gx, gy, gz];
    let qh = [w, x, y, z];
    let radial: f64 = (0..4).map(|i| gh[i] * qh[i]).sum();
    [0, 1, 2, 3].map(|i| (gh[i] - qh[i] * radial) / n)
}

struct ChainOut {
    center: Vector3<f64>,
    scale: Vector3<f64>,
    orientation: [f64; 4],
    sh: [[f64; 3]; 4],
    d_translation: Vector3<f64>,
    d_rotation: Matrix3<f64>,
}

/// Chains image-space splat gradients back to the 3D attributes and pose.
fn chain_splat(g: &Gaussian, k: &CameraIntrinsics, cam: &RigidTransform, sg: &SplatGrad) -> ChainOut {
    let pr = project_raw(g, k, cam);
    let r_cam = cam.rotation();

    // color through the clamp and the SH basis
    let mut sh = [[0.0; 3]; 4];
    let y1 = sh_linear_basis(&pr.view_dir);
    let mut g_dir = Vector3::zeros();
    for ch in 0..3 {
        let raw = pr.raw_color[ch];
        let gcol = if raw > 0.0 && raw < 1.0 { sg.color[ch] } else { 0.0 };
        sh[0][ch] = SH_C0 * gcol;
        sh[1][ch] = y1.x * gcol;
        sh[2][ch] = y1.y * gcol;
        sh[3][ch] = y1.z * gcol;
        // Y₁ = C1 (d_y, d_z, d_x)
        g_dir += SH_C1 * gcol * Vector3::new(g.sh[3][ch], g.sh[1][ch], g.sh[2][ch]);
    }
    let g_offset = (g_dir - pr.view_dir * pr.view_dir.dot(&g_dir)) / pr.view_dist;

    // conic → 2D covariance → camera covariance and Jacobian
    let conic = pr.cov2d.try_inverse().expect("dilated covariance is SPD");
    let g_cov2d = -conic * sg.conic * conic;
    let g_cov_cam = pr.jac.transpose() * g_cov2d * pr.jac;
    let g_jac = (g_cov2d + g_cov2d.transpose()) * pr.jac * pr.cov_cam;

    let (x, y, z) = (pr.cam.x, pr.cam.y, pr.cam.z);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_cam = Vector3::new(
        sg.mean.x * k.fx / z,
        sg.mean.y * k.fy / z,
        -sg.mean.x * k.fx * x / z2 - sg.mean.y * k.fy * y / z2 + sg.depth,
    );
    g_cam.x += g_jac[(0, 2)] * (-k.fx / z2);
    g_cam.y += g_jac[(1, 2)] * (-k.fy / z2);
    g_cam.z += g_jac[(0, 0)] * (-k.fx / z2)
        + g_jac[(0, 2)] * (2.0 * k.fx * x / z3)
        + g_jac[(1, 1)] * (-k.fy / z2)
        + g_jac[(1, 2)] * (2.0 * k.fy * y / z3);

    // cam = Rᵀ (μ - t),  Σ_cam = Rᵀ Σ R
    let g_view = r_cam * g_cam;
    let center = g_view + g_offset;
    let d_translation = -g_view - g_offset;
    let g_cov_world = r_cam * g_cov_cam * r_cam.transpose();
    let rel = g.center - cam.translation();
    let d_rotation = rel * g_cam.transpose() + 2.0 * pr.cov_world * r_cam * g_cov_cam;

    // Σ = M Mᵀ, M = R(q) diag(s)
    let rq = quat_to_matrix(&g.orientation);
    let m = rq * Matrix3::from_diagonal(&g.scale);
    let g_m = 2.0 * g_cov_world * m;
    let mut scale = Vector3::zeros();
    let mut g_rq = g_m;
    for c in 0..3 {
        scale[c] = (0..3).map(|r| rq[(r, c)] * g_m[(r, c)]).sum();
        for r in 0..3 {
            g_rq[(r, c)] *= g.scale[c];
        }
    }
    ChainOut {
        center,
        scale,
        orientation: quat_matrix_backward(&g.orientation, &g_rq),
        sh,
        d_translation,
        d_rotation,
    }
}

/// Recomputes the forward pass and returns all gradients.
pub fn render_backward(
    set: &GaussianSet,
    k: &CameraIntrinsics,
    cam: &RigidTransform,
    opts: &RenderOptions,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    let (_, state) = render_forward(set, k, cam, opts);
    render_backward_with_state(&state, set, k, cam, opts, upstream)
}

/// Backward pass reusing a forward state; fails with `StateMismatch` if the
/// state was produced from different inputs.
pub fn render_backward_with_state(
    state: &ForwardState,
    set: &GaussianSet,
    k: &CameraIntrinsics,
    cam: &RigidTransform,
    opts: &RenderOptions,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    if state.fingerprint != fingerprint(set, k, cam, opts) {
        return Err(Error::StateMismatch);
    }
    let n_pix = k.pixel_count();
    if upstream.color.len() != n_pix * 3 || upstream.alpha.len() != n_pix || upstream.depth.len() != n_pix {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient buffers do not match a {}x{} render",
            k.width, k.height
        )));
    }
    let n_splats = state.splats.len();
    let band = k.height.div_ceil(BACKWARD_BANDS);
    let partials: Vec<Vec<SplatGrad>> = threads::pool().install(|| {
        (0..BACKWARD_BANDS)
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![SplatGrad::default(); n_splats];
                let rows = (b * band).min(k.height)..((b + 1) * band).min(k.height);
                backward_rows(rows, state, k, opts, upstream, &mut acc);
                acc
            })
            .collect()
    });
    let mut acc = vec![SplatGrad::default(); n_splats];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part) {
            a.mean += p.mean;
            a.conic += p.conic;
            a.opacity += p.opacity;
            for c in 0..3 {
                a.color[c] += p.color[c];
            }
            a.depth += p.depth;
        }
    }

    let chained: Vec<ChainOut> = threads::pool().install(|| {
        state
            .splats
            .par_iter()
            .zip(acc.par_iter())
            .map(|(s, sg)| chain_splat(&set.gaussians[s.index], k, cam, sg))
            .collect()
    });

    let mut grads = GaussianGradients::zeros(set.len());
    let mut d_translation = Vector3::zeros();
    let mut d_rotation = Matrix3::zeros();
    for ((s, sg), out) in state.splats.iter().zip(&acc).zip(&chained) {
        let i = s.index;
        grads.centers[i] = out.center;
        grads.opacities[i] = sg.opacity;
        grads.scales[i] = out.scale;
        grads.orientations[i] = out.orientation;
        grads.sh[i] = out.sh;
        d_translation += out.d_translation;
        d_rotation += out.d_rotation;
    }
    Ok(RenderGradients {
        gaussians: grads,
        d_translation,
        d_rotation_tangent: left_rotation_gradient(cam.rotation(), &d_rotation),
        d_rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn isotropic(center: Vector3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3]) -> Gaussian {
        let mut sh = [[0.0; 3]; 4];
        for c in 0..3 {
            sh[0][c] = (rgb[c] - 0.5) / SH_C0;
        }
        Gaussian {
            center,
            opacity,
            scale: Vector3::new(sigma, sigma, sigma),
            orientation: [1.0, 0.0, 0.0, 0.0],
            sh,
        }
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap()
    }

    #[test]
    fn kernel_taper_is_smooth() {
        let (g0, _) = kernel(Q_TAPER);
        assert_relative_eq!(g0, (-0.5 * Q_TAPER).exp(), epsilon = 1e-15);
        let (g1, d1) = kernel(Q_MAX - 1e-12);
        assert!(g1.abs() < 1e-20 && d1.abs() < 1e-10);
        for q in [0.5, 3.0, 6.3, 7.0, 8.5] {
            let h = 1e-6;
            let fd = (kernel(q + h).0 - kernel(q - h).0) / (2.0 * h);
            assert_relative_eq!(fd, kernel(q).1, epsilon = 1e-8);
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let k = camera();
        let g = isotropic(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.5, [0.5; 3]);
        let s = project_gaussian(&g, 0, &k, &RigidTransform::identity(), &RenderOptions::default()).unwrap();
        assert_eq!(s.mean, Vector2::new(k.cx, k.cy));
        let expected = (20.0 * 0.1 / 3.0f64).powi(2) + LOW_PASS;
        assert_relative_eq!(s.cov, Matrix2::identity() * expected, epsilon = 1e-12);
    }

    #[test]
    fn near_plane_culls() {
        let k = camera();
        let g = isotropic(Vector3::new(0.0, 0.0, 0.005), 0.1, 0.5, [0.5; 3]);
        let opts = RenderOptions::default();
        assert_eq!(
            project_gaussian(&g, 0, &k, &RigidTransform::identity(), &opts),
            Err(CullReason::BehindNearPlane)
        );
        let far = isotropic(Vector3::new(0.0, 0.0, 2000.0), 0.1, 0.5, [0.5; 3]);
        assert_eq!(
            project_gaussian(&far, 0, &k, &RigidTransform::identity(), &opts),
            Err(CullReason::BeyondFarPlane)
        );
        let aside = isotropic(Vector3::new(50.0, 0.0, 3.0), 0.1, 0.5, [0.5; 3]);
        assert_eq!(
            project_gaussian(&aside, 0, &k, &RigidTransform::identity(), &opts),
            Err(CullReason::OffScreen)
        );
    }

    #[test]
    fn empty_set_renders_background() {
        let k = camera();
        let out = render(&GaussianSet::empty(), &k, &RigidTransform::identity(), [0.1, 0.2, 0.3]);
        assert!(out.alpha.iter().all(|a| *a == 0.0));
        for px in out.color.chunks_exact(3) {
            assert_eq!(px, [0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn opaque_gaussian_depth() {
        let k = camera();
        let g = isotropic(Vector3::new(0.0, 0.0, 2.0), 0.5, 0.999_999, [0.5; 3]);
        let out = render(&GaussianSet::new(vec![g]), &k, &RigidTransform::identity(), [0.0; 3]);
        let p = 8 * 16 + 8;
        assert_relative_eq!(out.depth[p], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn two_layer_compositing() {
        // pixel (8, 8) samples (8.5, 8.5); place both centers there
        let k = camera();
        let at = |z: f64| Vector3::new(0.5 * z / 20.0, 0.5 * z / 20.0, z);
        let front = isotropic(at(2.0), 0.05, 0.6, [1.0, 0.0, 0.0]);
        let back = isotropic(at(3.0), 0.05, 1.0 - 1e-12, [0.0, 0.0, 1.0]);
        let bg = [0.0, 1.0, 0.0];
        let out = render(&GaussianSet::new(vec![back, front]), &k, &RigidTransform::identity(), bg);
        let p = (8 * 16 + 8) * 3;
        let t_final = 0.4 * 1e-12;
        assert_relative_eq!(out.color[p], 0.6, epsilon = 1e-9);
        assert_relative_eq!(out.color[p + 1], t_final, epsilon = 1e-9);
        assert_relative_eq!(out.color[p + 2], 0.4, epsilon = 1e-9);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let k = camera();
        let g = isotropic(Vector3::new(0.1, 0.0, 2.0), 0.2, 0.6, [0.3, 0.6, 0.2]);
        let set = GaussianSet::new(vec![g]);
        let opts = RenderOptions::default();
        let grads = render_backward(&set, &k, &RigidTransform::identity(), &opts, &RenderUpstream::zeros(16, 16)).unwrap();
        assert_eq!(grads.gaussians, GaussianGradients::zeros(1));
        assert_eq!(grads.d_translation, Vector3::zeros());
        assert_eq!(grads.d_rotation, Matrix3::zeros());
    }

    #[test]
    fn stale_state_is_rejected() {
        let k = camera();
        let g = isotropic(Vector3::new(0.1, 0.0, 2.0), 0.2, 0.6, [0.3, 0.6, 0.2]);
        let set = GaussianSet::new(vec![g]);
        let opts = RenderOptions::default();
        let (_, state) = render_forward(&set, &k, &RigidTransform::identity(), &opts);
        let mut moved = set.clone();
        moved.gaussians[0].center.x += 1e-9;
        let err = render_backward_with_state(&state, &moved, &k, &RigidTransform::identity(), &opts, &RenderUpstream::zeros(16, 16));
        assert!(matches!(err, Err(Error::StateMismatch)));
    }

    #[test]
    fn culled_gaussians_get_zero_gradient() {
        let k = camera();
        let visible = isotropic(Vector3::new(0.0, 0.0, 2.0), 0.2, 0.6, [0.3, 0.6, 0.2]);
        let behind = isotropic(Vector3::new(0.0, 0.0, -2.0), 0.2, 0.6, [0.3, 0.6, 0.2]);
        let set = GaussianSet::new(vec![visible, behind]);
        let mut up = RenderUpstream::zeros(16, 16);
        up.color.iter_mut().for_each(|v| *v = 1.0);
        let grads = render_backward(&set, &k, &RigidTransform::identity(), &RenderOptions::default(), &up).unwrap();
        assert_ne!(grads.gaussians.opacities[0], 0.0);
        assert_eq!(grads.gaussians.opacities[1], 0.0);
        assert_eq!(grads.gaussians.centers[1], Vector3::zeros());
    }
}

//! Joint optimization of per-view depth, relative poses and Gaussian
//! attributes for one image triplet, driven by the reprojection and rendering
//! losses with analytic gradients throughout.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{pose_error, psnr, PoseError};
use crate::gaussian::{
    build_gaussians, build_gaussians_backward, merge_gaussians, transform_gaussians, transform_gaussians_backward,
    GaussianGradients, GaussianSet, RawAttributeField, RawAttributes, SH_C0,
};
use crate::geometry::{se3_exp, so3_exp, CameraIntrinsics, RigidTransform, Twist};
use crate::photometric::{reprojection_loss_grad, rendering_loss_grad, total_loss, LossConfig, LossParts};
use crate::plane::{DepthMap, ImagePlane, Mask};
use crate::rasterizer::{render_backward_with_state, render_forward, RenderOptions, RenderOutput, RenderUpstream};
use crate::scene_io::{SceneBundle, C1, C2, TARGET};

pub const CONFIG_VERSION: u32 = 1;
/// Lower bound on the final depth `exp(D̃) + ΔD`.
pub const MIN_DEPTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthInit {
    /// Constant median of the ground-truth context depths, or
    /// [`InitSpec::fallback_depth`] without ground truth.
    Median,
    /// Ground-truth context depths.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseInit {
    Identity,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    pub depth: DepthInit,
    /// Standard deviation of the multiplicative per-pixel depth noise.
    pub depth_noise: f64,
    pub fallback_depth: f64,
    pub poses: PoseInit,
    /// Each pose is rotated by exactly this angle about a random axis.
    pub rotation_perturbation_deg: f64,
    /// Each pose is translated by exactly this distance in a random direction.
    pub translation_perturbation: f64,
    /// Initial scale as a multiple of the pixel footprint `depth / f`.
    pub footprint_scale: f64,
    /// Raw (pre-sigmoid) initial opacity.
    pub raw_opacity: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            depth: DepthInit::Median,
            depth_noise: 0.0,
            fallback_depth: 4.0,
            poses: PoseInit::Identity,
            rotation_perturbation_deg: 0.0,
            translation_perturbation: 0.0,
            footprint_scale: 0.5,
            raw_opacity: 0.0,
        }
    }
}

impl InitSpec {
    /// Ground-truth depth and poses without noise.
    pub fn ground_truth() -> Self {
        Self {
            depth: DepthInit::GroundTruth,
            poses: PoseInit::GroundTruth,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub version: u32,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub lr_depth: f64,
    pub lr_pose: f64,
    pub lr_attr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Warmup length as a fraction of `steps`.
    pub warmup_fraction: f64,
    /// Target pixels whose rendered alpha is below this are not reprojected.
    pub alpha_threshold: f64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    pub init: InitSpec,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            steps: 2000,
            seed: 0,
            loss: LossConfig::default(),
            lr_depth: 1e-2,
            lr_pose: 2e-2,
            lr_attr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.5,
            warmup_fraction: 2000.0 / 200_000.0,
            alpha_threshold: 0.5,
            divergence_factor: 10.0,
            divergence_patience: 100,
            init: InitSpec::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::BadInit(format!("optimizer config: {m}")));
        if self.version != CONFIG_VERSION {
            return bad("unsupported config version");
        }
        if [self.lr_depth, self.lr_pose, self.lr_attr].iter().any(|v| !(*v >= 0.0)) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam constants out of range");
        }
        if !(self.clip_norm > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("clip norm must be positive and warmup fraction in [0, 1]");
        }
        if !(self.init.footprint_scale > 0.0) || !(self.init.depth_noise >= 0.0) || !(self.init.fallback_depth > 0.0) {
            return bad("init scales must be positive");
        }
        Ok(())
    }
}

/// Free parameters of one scene; index 0 is `c1`, index 1 is `c2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParameters {
    pub log_depth: [Vec<f64>; 2],
    pub residual_depth: [Vec<f64>; 2],
    /// `T_{c1→t}` and `T_{c2→t}`.
    pub poses: [RigidTransform; 2],
    pub raw: [RawAttributeField; 2],
}

impl SceneParameters {
    /// `exp(D̃) + ΔD` for context `v`.
    pub fn depth(&self, v: usize, k: &CameraIntrinsics) -> DepthMap {
        let d = self.log_depth[v].iter().zip(&self.residual_depth[v]).map(|(l, r)| l.exp() + r).collect();
        DepthMap::from_vec(k.width, k.height, d).expect("depth buffer matches camera")
    }

    /// Pose twists `log(T_{ci→t})`.
    pub fn pose_twists(&self) -> [Twist; 2] {
        self.poses.map(|p| p.log())
    }

    fn clamp_residuals(&mut self) {
        for v in 0..2 {
            for (r, l) in self.residual_depth[v].iter_mut().zip(&self.log_depth[v]) {
                *r = r.max(MIN_DEPTH - l.exp());
            }
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Initial parameters. Colors start from the context pixels and scales from
/// the pixel footprint; opacity, offsets and the SH linear band start at zero.
pub fn init_scene_params(bundle: &SceneBundle, init: &InitSpec, seed: u64) -> Result<SceneParameters> {
    bundle.validate()?;
    let k = &bundle.intrinsics;
    let n = k.pixel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = bundle.ground_truth.as_ref();
    let need_gt = |what: &str| Error::BadInit(format!("{what} initialization needs ground truth"));
    let base_depth: [Vec<f64>; 2] = match init.depth {
        DepthInit::GroundTruth => {
            let gt = gt.ok_or_else(|| need_gt("ground-truth depth"))?;
            [gt.depths[C1].data().to_vec(), gt.depths[C2].data().to_vec()]
        }
        DepthInit::Median => {
            let d = match gt {
                Some(gt) => {
                    let all: Vec<f64> = gt.depths[C1].data().iter().chain(gt.depths[C2].data()).copied().collect();
                    median(&all)
                }
                None => init.fallback_depth,
            };
            [vec![d; n], vec![d; n]]
        }
    };
    let mut log_depth = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for v in 0..2 {
        for (i, d) in base_depth[v].iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            let noisy = d * (1.0 + init.depth_noise * noise.clamp(-3.0, 3.0));
            if !(noisy > 0.0) {
                return Err(Error::BadInit(format!(
                    "non-positive initial depth {noisy} at pixel {i} of context {}",
                    v + 1
                )));
            }
            log_depth[v].push(noisy.ln());
        }
    }
    let mut poses = match init.poses {
        PoseInit::Identity => [RigidTransform::identity(); 2],
        PoseInit::GroundTruth => gt.ok_or_else(|| need_gt("ground-truth pose"))?.poses,
    };
    for pose in &mut poses {
        let r = so3_exp(&(random_unit(&mut rng) * init.rotation_perturbation_deg.to_radians())) * pose.rotation();
        let t = pose.translation() + random_unit(&mut rng) * init.translation_perturbation;
        *pose = RigidTransform::new(r, t)?;
    }
    let raw = [C1, C2].map(|view| {
        let img = &bundle.images[view];
        let v = if view == C1 { 0 } else { 1 };
        let pixels = (0..n)
            .map(|i| {
                let (x, y) = (i % k.width, i / k.width);
                let footprint = log_depth[v][i].exp() / k.fx.min(k.fy) * init.footprint_scale;
                let mut sh = [[0.0; 3]; 4];
                for (c, val) in img.pixel(x, y).iter().enumerate() {
                    sh[0][c] = (val - 0.5) / SH_C0;
                }
                RawAttributes {
                    opacity: init.raw_opacity,
                    scale: [footprint.ln(); 3],
                    sh,
                    ..RawAttributes::default()
                }
            })
            .collect();
        RawAttributeField {
            width: k.width,
            height: k.height,
            pixels,
        }
    });
    Ok(SceneParameters {
        log_depth,
        residual_depth: [vec![0.0; n], vec![0.0; n]],
        poses,
        raw,
    })
}

/// Gradients matching [`SceneParameters`]; pose entries are left twists.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradients {
    pub log_depth: [Vec<f64>; 2],
    pub residual_depth: [Vec<f64>; 2],
    pub poses: [Twist; 2],
    pub raw: [Vec<RawAttributes>; 2],
}

const RAW_LEN: usize = 22;

fn raw_to_flat(r: &RawAttributes, out: &mut Vec<f64>) {
    out.push(r.opacity);
    out.extend_from_slice(&r.scale);
    out.extend_from_slice(&r.orientation);
    out.extend(r.sh.iter().flatten());
    out.extend_from_slice(&r.offset);
}

fn raw_from_flat(f: &[f64]) -> RawAttributes {
    let mut sh = [[0.0; 3]; 4];
    for c in 0..4 {
        sh[c].copy_from_slice(&f[8 + 3 * c..11 + 3 * c]);
    }
    RawAttributes {
        opacity: f[0],
        scale: [f[1], f[2], f[3]],
        orientation: [f[4], f[5], f[6], f[7]],
        sh,
        offset: [f[20], f[21]],
    }
}

/// Parameter groups seen by the optimizer, in a fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Depth,
    Pose,
    Attributes,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Depth, Group::Pose, Group::Attributes];

    pub fn name(self) -> &'static str {
        match self {
            Group::Depth => "depth",
            Group::Pose => "pose",
            Group::Attributes => "attributes",
        }
    }
}

impl SceneGradients {
    fn flat(&self, group: Group) -> Vec<f64> {
        match group {
            Group::Depth => self.log_depth.iter().chain(&self.residual_depth).flatten().copied().collect(),
            Group::Pose => self.poses.iter().flat_map(|t| t.to_array()).collect(),
            Group::Attributes => {
                let mut out = Vec::with_capacity(2 * self.raw[0].len() * RAW_LEN);
                for r in self.raw.iter().flatten() {
                    raw_to_flat(r, &mut out);
                }
                out
            }
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState {
    pub step: usize,
    /// Depth, pose and attribute moments in [`Group::ALL`] order.
    pub moments: [Moments; 3],
}

/// Learning-rate multiplier at `step` (0-based): linear warmup over
/// `warmup_fraction · total` steps, then linear decay to zero at `total`.
pub fn lr_factor(step: usize, total: usize, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = ((total as f64 * warmup_fraction).round() as usize).clamp(1, total);
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        (total - step.min(total)) as f64 / (total - warmup) as f64
    } else {
        1.0
    }
}

/// Scales all groups together so their joint Euclidean norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = groups.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in groups.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// One bias-corrected Adam update; returns the parameter increments.
pub fn adam_update(moments: &mut Moments, grads: &[f64], step: usize, lr: f64, cfg: &OptimizeConfig) -> Vec<f64> {
    if moments.m.len() != grads.len() {
        moments.m = vec![0.0; grads.len()];
        moments.v = vec![0.0; grads.len()];
    }
    let t = (step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    grads
        .iter()
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
        .map(|(g, (m, v))| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            -lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps)
        })
        .collect()
}

/// Clips, runs Adam on each group with the scheduled learning rates and
/// applies the increments. Poses are updated multiplicatively,
/// `T ← exp(Δ) T`.
pub fn step(
    params: &mut SceneParameters,
    grads: &SceneGradients,
    state: &mut OptimizerState,
    lr_scale: f64,
    cfg: &OptimizeConfig,
) -> Result<f64> {
    let mut flat: Vec<Vec<f64>> = Group::ALL.iter().map(|g| grads.flat(*g)).collect();
    for (g, values) in Group::ALL.iter().zip(&flat) {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            log::error!(
                "non-finite {} gradient at step {} (entry {i} = {})",
                g.name(),
                state.step,
                values[i]
            );
            return Err(Error::NonFiniteGradient {
                step: state.step,
                group: g.name().into(),
            });
        }
    }
    let norm = clip_global_norm(&mut flat, cfg.clip_norm);
    let lrs = [cfg.lr_depth, cfg.lr_pose, cfg.lr_attr].map(|lr| lr * lr_scale);

    let d_depth = adam_update(&mut state.moments[0], &flat[0], state.step, lrs[0], cfg);
    let n = params.log_depth[0].len();
    for v in 0..2 {
        for i in 0..n {
            params.log_depth[v][i] += d_depth[v * n + i];
            params.residual_depth[v][i] += d_depth[(2 + v) * n + i];
        }
    }
    params.clamp_residuals();

    let d_pose = adam_update(&mut state.moments[1], &flat[1], state.step, lrs[1], cfg);
    for v in 0..2 {
        let xi: [f64; 6] = d_pose[6 * v..6 * v + 6].try_into().expect("six entries");
        params.poses[v] = se3_exp(&Twist::from_array(&xi)).compose(&params.poses[v]);
    }

    let d_attr = adam_update(&mut state.moments[2], &flat[2], state.step, lrs[2], cfg);
    let mut chunks = d_attr.chunks_exact(RAW_LEN);
    for field in &mut params.raw {
        for px in &mut field.pixels {
            let mut f = Vec::with_capacity(RAW_LEN);
            raw_to_flat(px, &mut f);
            for (a, d) in f.iter_mut().zip(chunks.next().expect("attribute increments")) {
                *a += d;
            }
            *px = raw_from_flat(&f);
        }
    }
    state.step += 1;
    Ok(norm)
}

/// Forward products of one evaluation, kept for reporting.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub parts: LossParts,
    pub total: f64,
    pub merged: GaussianSet,
    /// Renders of `c1`, `t` and `c2`.
    pub renders: [RenderOutput; 3],
    pub valid_fraction: [f64; 2],
}

/// Debug-build check that the reprojection loss consumes the depth rendered for the target
/// view and nothing else.
fn audit_target_depth(depth: &DepthMap, target: &RenderOutput) {
    debug_assert_eq!(depth.dims(), (target.width, target.height));
    debug_assert!(
        depth.data().iter().zip(&target.depth).all(|(a, b)| a.to_bits() == b.to_bits()),
        "reprojection depth must be the rendered target depth"
    );
}

/// Loss and gradients of all parameters.
pub fn evaluate(
    params: &SceneParameters,
    bundle: &SceneBundle,
    cfg: &OptimizeConfig,
) -> Result<(Evaluation, SceneGradients)> {
    let k = &bundle.intrinsics;
    let n = k.pixel_count();
    let opts = RenderOptions::with_background(bundle.background);
    let lc = &cfg.loss;

    let depths = [params.depth(0, k), params.depth(1, k)];
    let local = [
        build_gaussians(&params.raw[0], &depths[0], k)?,
        build_gaussians(&params.raw[1], &depths[1], k)?,
    ];
    let world = [
        transform_gaussians(&local[0], &params.poses[0]),
        transform_gaussians(&local[1], &params.poses[1]),
    ];
    let merged = merge_gaussians(&world[0], &world[1]);
    assert_eq!(merged.len(), 2 * n, "Gaussians come from the two context views only");

    let cams = [params.poses[0], RigidTransform::identity(), params.poses[1]];
    let mut renders = Vec::with_capacity(3);
    let mut states = Vec::with_capacity(3);
    for cam in &cams {
        let (out, state) = render_forward(&merged, k, cam, &opts);
        renders.push(out);
        states.push(state);
    }
    let images: Vec<ImagePlane> = renders.iter().map(RenderOutput::image).collect();
    let (rendering, ren_grads) = if lc.lambda2 > 0.0 {
        rendering_loss_grad(&images, &bundle.images, lc)?
    } else {
        (0.0, vec![vec![0.0; 3 * n]; 3])
    };

    let target = &renders[TARGET];
    let depth_t = target.depth_map();
    audit_target_depth(&depth_t, target);
    let mask = Mask::from_vec(k.width, k.height, target.alpha.iter().map(|a| *a > cfg.alpha_threshold).collect())?;
    let reproj = reprojection_loss_grad(
        bundle.target(),
        bundle.contexts(),
        &depth_t,
        Some(&mask),
        [&params.poses[0], &params.poses[1]],
        k,
        lc,
    )?;
    let parts = LossParts {
        reprojection: reproj.value,
        rendering,
    };
    let total = total_loss(&parts, lc);

    let mut g_world = GaussianGradients::zeros(2 * n);
    let mut cam_twists = [Twist::zero(); 3];
    for v in 0..3 {
        let mut up = RenderUpstream::zeros(k.width, k.height);
        for (u, g) in up.color.iter_mut().zip(&ren_grads[v]) {
            *u = lc.lambda2 * g;
        }
        if v == TARGET {
            for (u, g) in up.depth.iter_mut().zip(&reproj.d_depth) {
                *u = lc.lambda1 * g;
            }
        }
        let g = render_backward_with_state(&states[v], &merged, k, &cams[v], &opts, &up)?;
        cam_twists[v] = g.pose_twist(&cams[v]);
        g_world.add_assign(&g.gaussians);
    }
    let g_world2 = g_world.split_off(n);
    let mut pose_grads = [Twist::zero(); 2];
    let mut raw_grads: [Vec<RawAttributes>; 2] = [Vec::new(), Vec::new()];
    let mut log_depth_grads: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut residual_grads: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (v, gw) in [g_world, g_world2].iter().enumerate() {
        let (g_local, g_pose) = transform_gaussians_backward(&params.poses[v], &world[v], gw);
        let view = if v == 0 { C1 } else { C2 };
        let reproj_twist = reproj.d_poses[v].to_array();
        let mut total_twist = g_pose.to_array();
        for (i, t) in total_twist.iter_mut().enumerate() {
            *t += cam_twists[view].to_array()[i] + lc.lambda1 * reproj_twist[i];
        }
        pose_grads[v] = Twist::from_array(&total_twist);
        let (g_raw, g_depth) = build_gaussians_backward(&params.raw[v], &depths[v], k, &g_local);
        raw_grads[v] = g_raw;
        log_depth_grads[v] = g_depth.iter().zip(&params.log_depth[v]).map(|(g, l)| g * l.exp()).collect();
        residual_grads[v] = g_depth;
    }

    let renders: [RenderOutput; 3] = renders.try_into().expect("three renders");
    Ok((
        Evaluation {
            parts,
            total,
            merged,
            renders,
            valid_fraction: reproj.valid_fraction,
        },
        SceneGradients {
            log_depth: log_depth_grads,
            residual_depth: residual_grads,
            poses: pose_grads,
            raw: raw_grads,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub reprojection: f64,
    pub rendering: f64,
    pub lr_scale: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub trace: Vec<StepRecord>,
    pub steps_run: usize,
    pub final_loss: Option<LossParts>,
    /// Errors of `T_{c1→t}` and `T_{c2→t}` against ground truth.
    pub pose_errors: Option<[PoseError; 2]>,
    pub initial_pose_errors: Option<[PoseError; 2]>,
    /// PSNR of the final renders of `c1`, `t` and `c2`.
    pub psnr: Option<[f64; 3]>,
    pub final_poses: [[f64; 16]; 2],
    pub final_twists: [[f64; 6]; 2],
    pub config: OptimizeConfig,
    /// Excluded from serialized reports so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl OptimizationReport {
    pub fn max_rotation_error(&self) -> Option<f64> {
        self.pose_errors.map(|e| e[0].rotation_deg.max(e[1].rotation_deg))
    }

    pub fn max_translation_error(&self) -> Option<f64> {
        self.pose_errors.map(|e| e[0].translation_deg.max(e[1].translation_deg))
    }
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    /// Final merged Gaussians in the target frame.
    pub gaussians: GaussianSet,
    pub poses: [RigidTransform; 2],
    pub params: SceneParameters,
    pub report: OptimizationReport,
}

fn pose_errors(poses: &[RigidTransform; 2], bundle: &SceneBundle) -> Option<[PoseError; 2]> {
    bundle
        .ground_truth
        .as_ref()
        .map(|gt| [pose_error(&poses[0], &gt.poses[0]), pose_error(&poses[1], &gt.poses[1])])
}

/// Optimizes from [`init_scene_params`] for `cfg.steps` steps.
pub fn optimize_scene(bundle: &SceneBundle, cfg: &OptimizeConfig) -> Result<OptimizationResult> {
    cfg.validate()?;
    let params = init_scene_params(bundle, &cfg.init, cfg.seed)?;
    optimize_from(bundle, params, cfg)
}

/// Optimizes from the given parameters.
pub fn optimize_from(bundle: &SceneBundle, mut params: SceneParameters, cfg: &OptimizeConfig) -> Result<OptimizationResult> {
    cfg.validate()?;
    let start = Instant::now();
    let initial_pose_errors = pose_errors(&params.poses, bundle);
    let mut state = OptimizerState::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut initial_loss = None;
    let mut above = 0;
    for s in 0..cfg.steps {
        let (ev, grads) = evaluate(&params, bundle, cfg)?;
        let l0 = *initial_loss.get_or_insert(ev.total);
        if ev.total > cfg.divergence_factor * l0 {
            above += 1;
            if above >= cfg.divergence_patience {
                return Err(Error::Diverged {
                    step: s,
                    loss: ev.total,
                    initial: l0,
                });
            }
        } else {
            above = 0;
        }
        let lr_scale = lr_factor(s, cfg.steps, cfg.warmup_fraction);
        let grad_norm = step(&mut params, &grads, &mut state, lr_scale, cfg)?;
        trace.push(StepRecord {
            step: s,
            total: ev.total,
            reprojection: ev.parts.reprojection,
            rendering: ev.parts.rendering,
            lr_scale,
            grad_norm,
        });
        if s % 100 == 0 {
            let pose_note = match pose_errors(&params.poses, bundle) {
                Some([a, b]) => format!(
                    ", rotation error {:.3}/{:.3} deg, translation error {:.3}/{:.3} deg",
                    a.rotation_deg, b.rotation_deg, a.translation_deg, b.translation_deg
                ),
                None => String::new(),
            };
            log::info!(
                "step {s}: total {:.6} (proj {:.6}, ren {:.6}){pose_note}",
                ev.total,
                ev.parts.reprojection,
                ev.parts.rendering
            );
        }
    }
    let (final_eval, _) = evaluate(&params, bundle, cfg)?;
    let psnr_values = [0, 1, 2].map(|v| psnr(&final_eval.renders[v].image(), &bundle.images[v]));
    let psnr = match psnr_values {
        [Ok(a), Ok(b), Ok(c)] => Some([a, b, c]),
        _ => None,
    };
    let report = OptimizationReport {
        steps_run: trace.len(),
        trace,
        final_loss: Some(final_eval.parts),
        pose_errors: pose_errors(&params.poses, bundle),
        initial_pose_errors,
        psnr,
        final_poses: params.poses.map(|p| p.to_row_major()),
        final_twists: params.pose_twists().map(|t| t.to_array()),
        config: cfg.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    log::info!("optimization finished in {:.1} s", report.wall_time_s);
    Ok(OptimizationResult {
        gaussians: final_eval.merged,
        poses: params.poses,
        params,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_params(p: f64) -> SceneParameters {
        let raw = RawAttributeField::uniform(1, 1, RawAttributes::default());
        SceneParameters {
            log_depth: [vec![p], vec![0.0]],
            residual_depth: [vec![0.0], vec![0.0]],
            poses: [RigidTransform::identity(); 2],
            raw: [raw.clone(), raw],
        }
    }

    fn zero_grads() -> SceneGradients {
        SceneGradients {
            log_depth: [vec![0.0], vec![0.0]],
            residual_depth: [vec![0.0], vec![0.0]],
            poses: [Twist::zero(); 2],
            raw: [vec![RawAttributes::default().zeroed()], vec![RawAttributes::default().zeroed()]],
        }
    }

    trait Zeroed {
        fn zeroed(self) -> Self;
    }

    impl Zeroed for RawAttributes {
        fn zeroed(self) -> Self {
            RawAttributes {
                orientation: [0.0; 4],
                ..self
            }
        }
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let cfg = OptimizeConfig::default();
        let mut p = scalar_params(1.0);
        let before = p.clone();
        let mut state = OptimizerState::default();
        step(&mut p, &zero_grads(), &mut state, 1.0, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn global_norm_clipping() {
        let mut groups = vec![vec![3.0], vec![4.0, 0.0]];
        let norm = clip_global_norm(&mut groups, 0.5);
        assert_eq!(norm, 5.0);
        let clipped = groups.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        assert_relative_eq!(clipped, 0.5, epsilon = 1e-15);
        assert_relative_eq!(groups[0][0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn first_adam_step_closed_form() {
        let cfg = OptimizeConfig::default();
        let lr = 0.01;
        let mut m = Moments::default();
        let d = adam_update(&mut m, &[1.0], 0, lr, &cfg);
        let m1 = (1.0 - cfg.beta1) * 1.0;
        let v1 = (1.0 - cfg.beta2) * 1.0;
        let expected = -lr * (m1 / (1.0 - cfg.beta1)) / ((v1 / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        assert_relative_eq!(d[0], expected, epsilon = 1e-15);
        assert_relative_eq!(d[0], -lr / (1.0 + cfg.eps), epsilon = 1e-15);
    }

    #[test]
    fn step_clips_before_moments() {
        let cfg = OptimizeConfig::default();
        let mut p = scalar_params(0.0);
        let mut g = zero_grads();
        g.log_depth[0][0] = 5.0;
        let mut state = OptimizerState::default();
        let norm = step(&mut p, &g, &mut state, 1.0, &cfg).unwrap();
        assert_eq!(norm, 5.0);
        assert_relative_eq!(state.moments[0].m[0], (1.0 - cfg.beta1) * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let cfg = OptimizeConfig::default();
        let mut p = scalar_params(0.0);
        let mut g = zero_grads();
        g.poses[1] = Twist::from_array(&[0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0]);
        let err = step(&mut p, &g, &mut OptimizerState::default(), 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 0, ref group } if group == "pose"));
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        assert_relative_eq!(lr_factor(0, 200_000, 0.01), 1.0 / 2000.0);
        assert_eq!(lr_factor(1999, 200_000, 0.01), 1.0);
        assert_eq!(lr_factor(2000, 200_000, 0.01), 1.0);
        assert!(lr_factor(199_999, 200_000, 0.01) < 1e-5);
        assert_eq!(lr_factor(0, 100, 0.01), 1.0);
        assert_relative_eq!(lr_factor(50, 100, 0.01), 50.0 / 99.0);
    }

    #[test]
    fn residual_depth_is_clamped() {
        let mut p = scalar_params(0.0);
        p.residual_depth[0][0] = -5.0;
        p.clamp_residuals();
        let k = CameraIntrinsics::centered(1.0, 1, 1).unwrap();
        assert_relative_eq!(p.depth(0, &k).data()[0], MIN_DEPTH, epsilon = 1e-15);
    }
}

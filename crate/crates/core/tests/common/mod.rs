//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgeo::gaussian::{Gaussian, GaussianSet, SH_C0};
use splatgeo::geometry::{so3_exp, CameraIntrinsics, RigidTransform};
use splatgeo::rasterizer::{render_with, RenderOptions, RenderUpstream};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = unit_vector(rng);
    so3_exp(&(axis * rng.random_range(0.0..max_angle)))
}

pub fn random_transform(rng: &mut impl Rng, max_angle: f64, max_translation: f64) -> RigidTransform {
    let r = random_rotation(rng, max_angle);
    let t = unit_vector(rng) * rng.random_range(0.0..max_translation);
    RigidTransform::new(r, t).unwrap()
}

pub fn random_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.2 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Gaussians in front of a camera at the origin looking down +z, with colors
/// kept inside `(0, 1)` so the color clamp is inactive.
pub fn random_scene(rng: &mut impl Rng, n: usize, k: &CameraIntrinsics) -> GaussianSet {
    (0..n)
        .map(|_| {
            let z = rng.random_range(2.5..4.5);
            let u = rng.random_range(0.15..0.85) * k.width as f64;
            let v = rng.random_range(0.15..0.85) * k.height as f64;
            let center = k.ray(u, v) * z;
            let scale = Vector3::new(
                rng.random_range(0.04..0.2),
                rng.random_range(0.04..0.2),
                rng.random_range(0.04..0.2),
            );
            let mut sh = [[0.0; 3]; 4];
            for c in 0..3 {
                sh[0][c] = (rng.random_range(0.3..0.7) - 0.5) / SH_C0;
                for coef in sh.iter_mut().skip(1) {
                    coef[c] = rng.random_range(-0.2..0.2);
                }
            }
            Gaussian {
                center,
                opacity: rng.random_range(0.2..0.8),
                scale,
                orientation: random_quaternion(rng),
                sh,
            }
        })
        .collect()
}

/// Random linear functional over all render outputs.
pub fn random_upstream(rng: &mut impl Rng, k: &CameraIntrinsics) -> RenderUpstream {
    let n = k.pixel_count();
    RenderUpstream {
        color: (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        alpha: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        depth: (0..n).map(|_| rng.random_range(-0.2..0.2)).collect(),
    }
}

pub fn functional(
    set: &GaussianSet,
    k: &CameraIntrinsics,
    cam: &RigidTransform,
    opts: &RenderOptions,
    up: &RenderUpstream,
) -> f64 {
    let out = render_with(set, k, cam, opts);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.color, &up.color) + dot(&out.alpha, &up.alpha) + dot(&out.depth, &up.depth)
}

/// Relative error with an absolute floor: `|a − b| / max(|a|, |b|)`, or 0
/// when `|a − b|` is within `floor`.
pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff <= floor {
        0.0
    } else {
        diff / analytic.abs().max(fd.abs())
    }
}

pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Richardson extrapolation of central differences at `h` and `h/2`, which
/// cancels the `h²` truncation term.
pub fn richardson_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let coarse = central_difference(h, &mut f);
    let fine = central_difference(0.5 * h, &mut f);
    (4.0 * fine - coarse) / 3.0
}

/// One compared scalar: a human-readable label, analytic and FD values.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Every rasterizer parameter for a scene: per-Gaussian center, scale,
/// orientation, opacity and SH, plus the camera translation and rotation
/// tangent.
pub fn rasterizer_grad_checks(
    set: &GaussianSet,
    k: &CameraIntrinsics,
    cam: &RigidTransform,
    opts: &RenderOptions,
    up: &RenderUpstream,
    h: f64,
) -> Vec<GradCheck> {
    use splatgeo::rasterizer::render_backward;
    let grads = render_backward(set, k, cam, opts, up).unwrap();
    let mut checks = Vec::new();
    let eval_set = |s: &GaussianSet| functional(s, k, cam, opts, up);
    for (j, _) in set.iter().enumerate() {
        let mut push = |label: String, analytic: f64, edit: &dyn Fn(&mut Gaussian, f64)| {
            let numeric = richardson_difference(h, |d| {
                let mut s = set.clone();
                edit(&mut s.gaussians[j], d);
                eval_set(&s)
            });
            checks.push(GradCheck {
                label,
                analytic,
                numeric,
            });
        };
        let g = &grads.gaussians;
        for i in 0..3 {
            push(format!("g{j}.center[{i}]"), g.centers[j][i], &|x, d| x.center[i] += d);
            push(format!("g{j}.scale[{i}]"), g.scales[j][i], &|x, d| x.scale[i] += d);
        }
        for i in 0..4 {
            push(format!("g{j}.orientation[{i}]"), g.orientations[j][i], &|x, d| x.orientation[i] += d);
        }
        push(format!("g{j}.opacity"), g.opacities[j], &|x, d| x.opacity += d);
        for c in 0..4 {
            for ch in 0..3 {
                push(format!("g{j}.sh[{c}][{ch}]"), g.sh[j][c][ch], &|x, d| x.sh[c][ch] += d);
            }
        }
    }
    for i in 0..3 {
        let numeric = richardson_difference(h, |d| {
            let mut t = *cam.translation();
            t[i] += d;
            functional(set, k, &RigidTransform::new(*cam.rotation(), t).unwrap(), opts, up)
        });
        checks.push(GradCheck {
            label: format!("camera.translation[{i}]"),
            analytic: grads.d_translation[i],
            numeric,
        });
    }
    for i in 0..3 {
        let numeric = richardson_difference(h, |d| {
            let mut w = Vector3::zeros();
            w[i] = d;
            let r = so3_exp(&w) * cam.rotation();
            functional(set, k, &RigidTransform::new(r, *cam.translation()).unwrap(), opts, up)
        });
        checks.push(GradCheck {
            label: format!("camera.rotation_tangent[{i}]"),
            analytic: grads.d_rotation_tangent[i],
            numeric,
        });
    }
    checks
}

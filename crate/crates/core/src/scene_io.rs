//! Scene bundles on disk, the synthetic ground-truth scene generator, and the
//! PNG, PLY, CSV and JSON writers used by the command line tool.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{logit, sigmoid, Gaussian, GaussianSet, SH_C0};
use crate::geometry::{epipolar_line, so3_exp, CameraIntrinsics, RigidTransform};
use crate::plane::{DepthMap, ImagePlane};
use crate::rasterizer::{render, RenderOutput};

pub const MANIFEST_NAME: &str = "scene.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const IMAGE_NAMES: [&str; 3] = ["c1.png", "t.png", "c2.png"];
pub const DEPTH_NAMES: [&str; 3] = ["depth_c1.png", "depth_t.png", "depth_c2.png"];
pub const GAUSSIANS_NAME: &str = "gaussians.ply";

/// Index of each view inside [`SceneBundle::images`].
pub const C1: usize = 0;
pub const TARGET: usize = 1;
pub const C2: usize = 2;

/// Ground truth recorded by the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `T_{c1→t}` and `T_{c2→t}`.
    pub poses: [RigidTransform; 2],
    /// Rendered depth of the `c1`, `t` and `c2` views.
    pub depths: [DepthMap; 3],
    /// Gaussians in the target frame.
    pub gaussians: GaussianSet,
}

/// Three images in `(c1, t, c2)` order with shared intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub images: [ImagePlane; 3],
    pub intrinsics: CameraIntrinsics,
    pub background: [f64; 3],
    pub ground_truth: Option<GroundTruth>,
    pub seed: u64,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let dims = (self.intrinsics.width, self.intrinsics.height);
        for img in &self.images {
            if img.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "image {:?} does not match the {}x{} camera",
                    img.dims(),
                    dims.0,
                    dims.1
                )));
            }
        }
        Ok(())
    }

    pub fn target(&self) -> &ImagePlane {
        &self.images[TARGET]
    }

    pub fn contexts(&self) -> [&ImagePlane; 2] {
        [&self.images[C1], &self.images[C2]]
    }
}

/// Synthetic scene: a textured relief surface tiled by flat Gaussians on a
/// jittered grid, seen by a target camera and two context cameras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub gaussian_count: usize,
    /// Mean depth of the surface in the target frame.
    pub surface_depth: f64,
    /// Depth change per unit of lateral x across the base plane.
    pub slant: f64,
    /// Number of Gaussian bumps on the surface and their largest height.
    pub bumps: usize,
    pub relief: f64,
    /// Side of the tiled square relative to the target frustum at
    /// `surface_depth`.
    pub extent: f64,
    pub opacity_range: [f64; 2],
    /// In-plane scale as a fraction of the grid pitch.
    pub scale_range: [f64; 2],
    /// Scale along the surface normal.
    pub thickness: f64,
    /// Multiplier on the spatial frequency of the solid texture.
    pub texture_frequency: f64,
    /// Bound on the texture's deviation from mid-gray, below 0.5.
    pub texture_amplitude: f64,
    /// Bound on the linear SH coefficients; 0 gives a Lambertian scene.
    pub view_dependence: f64,
    /// Distance between the two context cameras.
    pub baseline: f64,
    /// Yaw of each context camera toward the scene, degrees.
    pub rotation_deg: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 56.0,
            gaussian_count: 196,
            surface_depth: 5.0,
            slant: 0.15,
            bumps: 4,
            relief: 0.8,
            extent: 1.35,
            opacity_range: [0.9, 0.98],
            scale_range: [0.55, 0.65],
            thickness: 0.01,
            texture_frequency: 1.0,
            texture_amplitude: 0.48,
            view_dependence: 0.0,
            baseline: 0.5,
            rotation_deg: 0.0,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ShapeMismatch(format!("synthetic spec: {m}")));
        if self.gaussian_count == 0 || self.width == 0 || self.height == 0 {
            return bad("counts must be positive");
        }
        if !(self.focal > 0.0) || !(self.surface_depth > 0.0) || !(self.extent > 0.0) {
            return bad("focal length, surface depth and extent must be positive");
        }
        if !(self.baseline >= 0.0) || !(self.rotation_deg >= 0.0) || !(self.relief >= 0.0) {
            return bad("baseline, rotation and relief must be non-negative");
        }
        if self.relief + self.slant.abs() * self.extent * self.surface_depth >= 0.9 * self.surface_depth {
            return bad("relief and slant would bring the surface too close to the camera");
        }
        if !(self.opacity_range[0] > 0.0 && self.opacity_range[1] < 1.0 && self.opacity_range[0] <= self.opacity_range[1]) {
            return bad("opacity range must lie inside (0, 1)");
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[1] >= self.scale_range[0]) || !(self.thickness > 0.0) {
            return bad("scale range must be positive and ordered");
        }
        if !(0.0..0.5).contains(&self.texture_amplitude) {
            return bad("texture amplitude must lie in [0, 0.5)");
        }
        if !(self.texture_frequency >= 0.0) || !(self.view_dependence >= 0.0) {
            return bad("texture frequency and view dependence must be non-negative");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    /// Context poses on an arc around a focus point on the optical axis,
    /// each turned toward it: `(T_{c1→t}, T_{c2→t})`.
    pub fn camera_poses(&self) -> [RigidTransform; 2] {
        let half = 0.5 * self.baseline;
        let rot = self.rotation_deg.to_radians();
        [-1.0, 1.0].map(|side: f64| {
            let yaw = -side * rot;
            let position = if rot > 1e-12 {
                let radius = half / rot.sin();
                Vector3::new(side * half, 0.0, radius * (1.0 - rot.cos()))
            } else {
                Vector3::new(side * half, 0.0, 0.0)
            };
            RigidTransform::from_axis_angle(Vector3::y(), yaw, position)
        })
    }
}

/// Samples Gaussians and context poses, renders all three views and records
/// the ground truth. Images keep full precision until they are written. A
/// scene whose views cover less than half the image with `alpha > 0.1` is
/// resampled, up to ten attempts.
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<SceneBundle> {
    const ATTEMPTS: usize = 10;
    const MIN_COVERAGE: f64 = 0.5;
    spec.validate()?;
    let k = spec.intrinsics()?;
    let poses = spec.camera_poses();
    let cams = [poses[0], RigidTransform::identity(), poses[1]];
    let mut coverage = 0.0;
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt as u64);
        let gaussians = sample_gaussians(spec, &k, &mut rng);
        let renders: Vec<RenderOutput> = cams.iter().map(|c| render(&gaussians, &k, c, spec.background)).collect();
        coverage = renders
            .iter()
            .map(|r| r.alpha.iter().filter(|a| **a > 0.1).count() as f64 / k.pixel_count() as f64)
            .fold(f64::INFINITY, f64::min);
        if coverage < MIN_COVERAGE {
            log::debug!("synthetic attempt {attempt} rejected with coverage {coverage:.3}");
            continue;
        }
        let images = [0, 1, 2].map(|v| renders[v].image());
        let depths = [0, 1, 2].map(|v| renders[v].depth_map());
        return Ok(SceneBundle {
            images,
            intrinsics: k,
            background: spec.background,
            ground_truth: Some(GroundTruth {
                poses,
                depths,
                gaussians,
            }),
            seed: spec.seed,
        });
    }
    Err(Error::EmptyRender {
        attempts: ATTEMPTS,
        coverage,
    })
}

/// Smooth random field over 3D points, three sinusoids per channel.
struct SolidTexture {
    waves: [[(Vector3<f64>, f64, f64); 3]; 3],
}

impl SolidTexture {
    fn sample(rng: &mut ChaCha8Rng, frequency: f64, amplitude: f64) -> Self {
        let waves = std::array::from_fn(|_| {
            std::array::from_fn(|_| {
                let dir = random_unit(rng);
                let f = rng.random_range(1.2..2.4) * frequency;
                (dir * f, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.85..=1.0) * amplitude / 3.0)
            })
        });
        Self { waves }
    }

    fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        self.waves.map(|ws| 0.5 + ws.iter().map(|(k, phase, amp)| amp * (k.dot(p) + phase).sin()).sum::<f64>())
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotation taking `+z` onto the unit vector `n`.
fn align_z(n: &Vector3<f64>) -> Matrix3<f64> {
    let axis = Vector3::z().cross(n);
    let s = axis.norm();
    if s < 1e-12 {
        return Matrix3::identity();
    }
    so3_exp(&(axis / s * s.atan2(n.z)))
}

fn sample_gaussians(spec: &SynthSpec, k: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> GaussianSet {
    let z0 = spec.surface_depth;
    let half_x = 0.5 * spec.width as f64 / k.fx * z0 * spec.extent;
    let half_y = 0.5 * spec.height as f64 / k.fy * z0 * spec.extent;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..spec.bumps)
        .map(|_| {
            (
                rng.random_range(-0.8..0.8) * half_x,
                rng.random_range(-0.8..0.8) * half_y,
                rng.random_range(-1.0..1.0) * spec.relief,
                rng.random_range(0.15..0.3) * (half_x + half_y),
            )
        })
        .collect();
    let height = |x: f64, y: f64| {
        z0 + spec.slant * x
            + bumps
                .iter()
                .map(|(bx, by, a, s)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp())
                .sum::<f64>()
    };
    let texture = SolidTexture::sample(rng, spec.texture_frequency, spec.texture_amplitude);
    let cols = (spec.gaussian_count as f64).sqrt().ceil() as usize;
    let rows = spec.gaussian_count.div_ceil(cols);
    let (pitch_x, pitch_y) = (2.0 * half_x / cols as f64, 2.0 * half_y / rows as f64);
    let pitch = pitch_x.min(pitch_y);
    let mut out = Vec::with_capacity(spec.gaussian_count);
    for i in 0..spec.gaussian_count {
        let (col, row) = (i % cols, i / cols);
        let x = -half_x + (col as f64 + 0.5 + rng.random_range(-0.2..0.2)) * pitch_x;
        let y = -half_y + (row as f64 + 0.5 + rng.random_range(-0.2..0.2)) * pitch_y;
        let center = Vector3::new(x, y, height(x, y));
        let e = 1e-4 * pitch;
        let normal = Vector3::new(
            -(height(x + e, y) - height(x - e, y)) / (2.0 * e),
            -(height(x, y + e) - height(x, y - e)) / (2.0 * e),
            1.0,
        )
        .normalize();
        let spin = so3_exp(&(normal * rng.random_range(0.0..std::f64::consts::PI)));
        let rgb = texture.color(&center);
        let mut sh = [[0.0; 3]; 4];
        for c in 0..3 {
            sh[0][c] = (rgb[c] - 0.5) / SH_C0;
            for coef in sh.iter_mut().skip(1) {
                coef[c] = if spec.view_dependence > 0.0 {
                    rng.random_range(-spec.view_dependence..spec.view_dependence)
                } else {
                    0.0
                };
            }
        }
        out.push(Gaussian {
            center,
            opacity: rng.random_range(spec.opacity_range[0]..=spec.opacity_range[1]),
            scale: Vector3::new(
                rng.random_range(spec.scale_range[0]..=spec.scale_range[1]) * pitch,
                rng.random_range(spec.scale_range[0]..=spec.scale_range[1]) * pitch,
                spec.thickness,
            ),
            orientation: crate::gaussian::matrix_to_quat(&(spin * align_z(&normal))),
            sh,
        });
    }
    GaussianSet::new(out)
}

/// On-disk `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Image files in `(c1, t, c2)` order.
    pub images: [String; 3],
    #[serde(default)]
    pub background: [f64; 3],
    /// Row-major `T_{c1→t}` and `T_{c2→t}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_poses: Option<[[f64; 16]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depths: Option<[String; 3]>,
    /// Depth values mapped to 0 and 65535 in the depth PNGs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_gaussians: Option<String>,
    pub seed: u64,
}

/// Writes `scene.json`, the three images and any ground truth into `dir`.
pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (img, name) in bundle.images.iter().zip(IMAGE_NAMES) {
        write_rgb8(img, &dir.join(name))?;
    }
    let k = &bundle.intrinsics;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
        images: IMAGE_NAMES.map(String::from),
        background: bundle.background,
        gt_poses: None,
        gt_depths: None,
        depth_range: None,
        gt_gaussians: None,
        seed: bundle.seed,
    };
    if let Some(gt) = &bundle.ground_truth {
        manifest.gt_poses = Some(gt.poses.map(|p| p.to_row_major()));
        let (lo, hi) = gt
            .depths
            .iter()
            .map(DepthMap::min_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| (a.min(c), b.max(d)));
        let range = [lo, hi];
        for (d, name) in gt.depths.iter().zip(DEPTH_NAMES) {
            write_depth16(d, range, &dir.join(name))?;
        }
        manifest.depth_range = Some(range);
        manifest.gt_depths = Some(DEPTH_NAMES.map(String::from));
        export_ply(&gt.gaussians, &dir.join(GAUSSIANS_NAME))?;
        manifest.gt_gaussians = Some(GAUSSIANS_NAME.into());
    }
    write_json(&manifest, &dir.join(MANIFEST_NAME))
}

/// Reads a bundle written by [`save_scene`].
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let path = dir.join(MANIFEST_NAME);
    if !path.is_file() {
        return Err(Error::ManifestMissing(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::malformed(&path, format!("unsupported manifest version {}", m.version)));
    }
    let k = CameraIntrinsics::new(m.fx, m.fy, m.cx, m.cy, m.width, m.height)?;
    let dims = (m.width, m.height);
    let mut images = Vec::with_capacity(3);
    for name in &m.images {
        images.push(read_rgb8(&dir.join(name), dims)?);
    }
    let images: [ImagePlane; 3] = images.try_into().expect("three images");
    let ground_truth = match (&m.gt_poses, &m.gt_depths, &m.depth_range, &m.gt_gaussians) {
        (None, None, None, None) => None,
        (Some(poses), Some(depths), Some(range), Some(gaussians)) => {
            let poses = [RigidTransform::from_row_major(&poses[0])?, RigidTransform::from_row_major(&poses[1])?];
            let mut maps = Vec::with_capacity(3);
            for name in depths {
                maps.push(read_depth16(&dir.join(name), *range, dims)?);
            }
            Some(GroundTruth {
                poses,
                depths: maps.try_into().expect("three depth maps"),
                gaussians: import_ply(&dir.join(gaussians))?,
            })
        }
        _ => {
            return Err(Error::malformed(
                &path,
                "gt_poses, gt_depths, depth_range and gt_gaussians must be present together",
            ))
        }
    };
    Ok(SceneBundle {
        images,
        intrinsics: k,
        background: m.background,
        ground_truth,
        seed: m.seed,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn encode_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = create(path)?;
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.set_compression(png::Compression::Balanced);
    enc.set_filter(png::Filter::Adaptive);
    let png_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::malformed(path, other.to_string()),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn decode_png(path: &Path) -> Result<(usize, usize, png::ColorType, png::BitDepth, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |e: png::DecodingError| Error::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(corrupt)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::CorruptImage {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, info.bit_depth, buf))
}

fn check_dims(path: &Path, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn write_rgb8(img: &ImagePlane, path: &Path) -> Result<()> {
    let data: Vec<u8> = img.data().iter().map(|v| to_u8(*v)).collect();
    encode_png(path, img.width(), img.height(), png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

/// 8-bit grayscale PNG.
pub fn write_gray8(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let data: Vec<u8> = values.iter().map(|v| to_u8(*v)).collect();
    encode_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &data)
}

/// Reads an 8-bit RGB, RGBA or grayscale PNG as an RGB image in `[0, 1]`.
pub fn read_rgb8(path: &Path, expected: (usize, usize)) -> Result<ImagePlane> {
    let (w, h, color, depth, buf) = decode_png(path)?;
    check_dims(path, expected, (w, h))?;
    if depth != png::BitDepth::Eight {
        return Err(Error::CorruptImage {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit samples, found {depth:?}"),
        });
    }
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => {
            return Err(Error::CorruptImage {
                path: path.to_path_buf(),
                reason: "indexed color is not supported".into(),
            })
        }
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf.chunks_exact(channels) {
        for c in 0..3 {
            let v = if channels >= 3 { px[c] } else { px[0] };
            data.push(v as f64 / 255.0);
        }
    }
    ImagePlane::from_vec(w, h, data)
}

/// 16-bit fixed-point depth mapping `range[0]..range[1]` onto `0..65535`.
pub fn write_depth16(depth: &DepthMap, range: [f64; 2], path: &Path) -> Result<()> {
    let span = range[1] - range[0];
    let mut data = Vec::with_capacity(depth.data().len() * 2);
    for d in depth.data() {
        let v = if span > 0.0 { ((d - range[0]) / span * 65535.0).round().clamp(0.0, 65535.0) as u16 } else { 0 };
        data.extend_from_slice(&v.to_be_bytes());
    }
    encode_png(path, depth.width(), depth.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

pub fn read_depth16(path: &Path, range: [f64; 2], expected: (usize, usize)) -> Result<DepthMap> {
    let (w, h, color, depth, buf) = decode_png(path)?;
    check_dims(path, expected, (w, h))?;
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(Error::CorruptImage {
            path: path.to_path_buf(),
            reason: format!("expected 16-bit grayscale depth, found {color:?} {depth:?}"),
        });
    }
    let span = range[1] - range[0];
    let data = buf
        .chunks_exact(2)
        .map(|b| range[0] + span * u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
        .collect();
    DepthMap::from_vec(w, h, data)
}

/// Color, alpha and depth of a render; depth is stored in millimeters.
pub fn write_render(out: &RenderOutput, dir: &Path, stem: &str) -> Result<()> {
    write_rgb8(&out.image(), &dir.join(format!("{stem}_color.png")))?;
    write_gray8(&out.alpha, out.width, out.height, &dir.join(format!("{stem}_alpha.png")))?;
    let mut data = Vec::with_capacity(out.depth.len() * 2);
    for d in &out.depth {
        let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
        data.extend_from_slice(&mm.to_be_bytes());
    }
    encode_png(
        &dir.join(format!("{stem}_depth.png")),
        out.width,
        out.height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
    )
}

const PLY_PROPERTIES: [&str; 26] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "f_rest_1", "f_rest_2", "f_rest_3",
    "f_rest_4", "f_rest_5", "f_rest_6", "f_rest_7", "f_rest_8", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

/// Signs mapping this crate's linear SH coefficients (basis `y, z, x`) onto the
/// splatting-viewer convention, which negates the `y` and `x` terms.
const SH_REST_SIGN: [f64; 3] = [-1.0, 1.0, -1.0];

fn ply_record(g: &Gaussian) -> [f32; 26] {
    let mut r = [0.0f32; 26];
    for a in 0..3 {
        r[a] = g.center[a] as f32;
        r[6 + a] = g.sh[0][a] as f32;
        r[19 + a] = g.scale[a].ln() as f32;
    }
    for ch in 0..3 {
        for j in 0..3 {
            r[9 + ch * 3 + j] = (SH_REST_SIGN[j] * g.sh[j + 1][ch]) as f32;
        }
    }
    r[18] = logit(g.opacity) as f32;
    for a in 0..4 {
        r[22 + a] = g.orientation[a] as f32;
    }
    r
}

/// Binary little-endian PLY in the common splat layout.
pub fn export_ply(set: &GaussianSet, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", set.len());
    for p in PLY_PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for g in set.iter() {
        for v in ply_record(g) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a PLY written by [`export_ply`].
pub fn import_ply(path: &Path) -> Result<GaussianSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::malformed(path, "unexpected end of PLY header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" || next_line(&mut r)? != "format binary_little_endian 1.0" {
        return Err(Error::malformed(path, "not a binary little-endian PLY"));
    }
    let count: usize = next_line(&mut r)?
        .strip_prefix("element vertex ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::malformed(path, "missing vertex count"))?;
    for p in PLY_PROPERTIES {
        if next_line(&mut r)? != format!("property float {p}") {
            return Err(Error::malformed(path, format!("expected property {p}")));
        }
    }
    if next_line(&mut r)? != "end_header" {
        return Err(Error::malformed(path, "missing end_header"));
    }
    let mut buf = vec![0u8; count * 26 * 4];
    r.read_exact(&mut buf).map_err(|e| Error::malformed(path, e.to_string()))?;
    let gaussians = buf
        .chunks_exact(26 * 4)
        .map(|rec| {
            let f: Vec<f64> = rec.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            let mut sh = [[0.0; 3]; 4];
            for ch in 0..3 {
                sh[0][ch] = f[6 + ch];
                for j in 0..3 {
                    sh[j + 1][ch] = SH_REST_SIGN[j] * f[9 + ch * 3 + j];
                }
            }
            Gaussian {
                center: Vector3::new(f[0], f[1], f[2]),
                opacity: sigmoid(f[18]),
                scale: Vector3::new(f[19].exp(), f[20].exp(), f[21].exp()),
                orientation: [f[22], f[23], f[24], f[25]],
                sh,
            }
        })
        .collect();
    Ok(gaussians)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::malformed(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let w = create(path)?;
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row).map_err(|e| Error::malformed(path, e.to_string()))?;
    }
    csv.flush().map_err(|e| Error::io(path, e))
}

/// Paints the part of the line `a x + b y + c = 0` (continuous pixel
/// coordinates) that falls inside `img`.
pub fn draw_line(img: &mut ImagePlane, line: &Vector3<f64>, rgb: [f64; 3]) {
    let (w, h) = img.dims();
    let (a, b, c) = (line.x, line.y, line.z);
    let mut paint = |x: f64, y: f64| {
        if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
            let (xi, yi) = (x as usize, y as usize);
            for (ch, v) in rgb.iter().enumerate() {
                img.set(xi, yi, ch, *v);
            }
        }
    };
    if b.abs() >= a.abs() {
        for xi in 0..w {
            let x = xi as f64 + 0.5;
            paint(x, -(a * x + c) / b);
        }
    } else {
        for yi in 0..h {
            let y = yi as f64 + 0.5;
            paint(-(b * y + c) / a, y);
        }
    }
}

/// Paints a small cross centered at continuous coordinates `(u, v)`.
pub fn draw_marker(img: &mut ImagePlane, u: f64, v: f64, rgb: [f64; 3]) {
    let (w, h) = img.dims();
    let (x, y) = (u.floor() as i64, v.floor() as i64);
    for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let (px, py) = (x + dx, y + dy);
        if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
            for (ch, val) in rgb.iter().enumerate() {
                img.set(px as usize, py as usize, ch, *val);
            }
        }
    }
}

/// Directory entries of `dir` that contain a scene manifest, sorted by name.
pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(MANIFEST_NAME).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).is_file())
        .collect();
    out.sort();
    Ok(out)
}

/// `poses.json`: row-major `T_{c1→t}` and `T_{c2→t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub c1_to_t: [f64; 16],
    pub c2_to_t: [f64; 16],
}

impl PoseFile {
    pub fn new(poses: &[RigidTransform; 2]) -> Self {
        Self {
            c1_to_t: poses[0].to_row_major(),
            c2_to_t: poses[1].to_row_major(),
        }
    }

    pub fn poses(&self) -> Result<[RigidTransform; 2]> {
        Ok([RigidTransform::from_row_major(&self.c1_to_t)?, RigidTransform::from_row_major(&self.c2_to_t)?])
    }
}

/// A ground-truth point seen by the target and one context view, with the
/// epipolar line of its target pixel under the tested pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpipolarSample {
    /// 0 for `c1`, 1 for `c2`.
    pub view: usize,
    pub target_pixel: Vector2<f64>,
    pub context_pixel: Vector2<f64>,
    /// Unit-normal line in the context image.
    pub line: Vector3<f64>,
    /// Signed pixel distance from `context_pixel` to `line`.
    pub distance: f64,
}

/// Draws, on both context images, the epipolar lines induced by `poses` for
/// up to `count` ground-truth Gaussian centers per view, and marks where
/// those centers really project. Returns `[c1 | c2]` side by side.
pub fn epipolar_overlay(
    bundle: &SceneBundle,
    poses: &[RigidTransform; 2],
    count: usize,
    seed: u64,
) -> Result<(ImagePlane, Vec<EpipolarSample>)> {
    let gt = bundle
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::BadInit("epipolar overlay needs ground-truth Gaussians and poses".into()))?;
    let k = &bundle.intrinsics;
    let inside = |p: &Vector2<f64>| p.x >= 0.0 && p.y >= 0.0 && p.x < k.width as f64 && p.y < k.height as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut panels = Vec::with_capacity(2);
    for v in 0..2 {
        let to_context = poses[v].inverse();
        let gt_to_context = gt.poses[v].inverse();
        let visible: Vec<(Vector2<f64>, Vector2<f64>)> = gt
            .gaussians
            .iter()
            .filter_map(|g| {
                let pc = gt_to_context.transform_point(&g.center);
                if g.center.z <= 1e-6 || pc.z <= 1e-6 {
                    return None;
                }
                let (pt, pcx) = (k.project(&g.center), k.project(&pc));
                (inside(&pt) && inside(&pcx)).then_some((pt, pcx))
            })
            .collect();
        let picked = rand::seq::index::sample(&mut rng, visible.len(), count.min(visible.len()));
        let mut img = bundle.images[[C1, C2][v]].clone();
        for (j, i) in picked.into_iter().enumerate() {
            let (pt, pc) = visible[i];
            let line = epipolar_line(k, &to_context, &pt)?;
            let hue = PALETTE[j % PALETTE.len()];
            draw_line(&mut img, &line, hue);
            draw_marker(&mut img, pc.x, pc.y, [1.0; 3]);
            samples.push(EpipolarSample {
                view: v,
                target_pixel: pt,
                context_pixel: pc,
                line,
                distance: line.dot(&Vector3::new(pc.x, pc.y, 1.0)),
            });
        }
        panels.push(img);
    }
    Ok((hconcat(&panels[0], &panels[1]), samples))
}

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
];

fn hconcat(a: &ImagePlane, b: &ImagePlane) -> ImagePlane {
    let (w, h) = a.dims();
    let mut out = ImagePlane::new(w + b.width(), h);
    for y in 0..h {
        for x in 0..out.width() {
            let px = if x < w { a.pixel(x, y) } else { b.pixel(x - w, y) };
            for (c, v) in px.iter().enumerate() {
                out.set(x, y, c, *v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::pose_error;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            width: 32,
            height: 24,
            focal: 28.0,
            gaussian_count: 64,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn synthetic_scene_is_deterministic() {
        let a = generate_synthetic_scene(&small_spec(3)).unwrap();
        let b = generate_synthetic_scene(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&small_spec(4)).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn zero_baseline_gives_identical_images() {
        let spec = SynthSpec {
            baseline: 0.0,
            rotation_deg: 0.0,
            ..small_spec(1)
        };
        let b = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(b.images[0], b.images[1]);
        assert_eq!(b.images[2], b.images[1]);
    }

    #[test]
    fn camera_arc_faces_the_scene() {
        let spec = SynthSpec {
            rotation_deg: 3.0,
            ..SynthSpec::default()
        };
        let [p1, p2] = spec.camera_poses();
        assert!((p1.translation() - p2.translation()).norm() - spec.baseline < 1e-12);
        let e = pose_error(&p1, &p2);
        assert!((e.rotation_deg - 2.0 * spec.rotation_deg).abs() < 1e-9);
        // Both optical axes pass through the same point on the target axis.
        let hit = |p: &RigidTransform| {
            let dir = p.rotation() * Vector3::z();
            let s = -p.translation().x / dir.x;
            p.translation() + s * dir
        };
        assert!((hit(&p1) - hit(&p2)).norm() < 1e-9);
    }

    #[test]
    fn isolated_opaque_gaussian_depth_matches_projection() {
        let k = CameraIntrinsics::centered(40.0, 32, 32).unwrap();
        let center = Vector3::new(0.3, -0.2, 4.0);
        let g = Gaussian {
            center,
            opacity: 0.99,
            scale: Vector3::new(0.3, 0.3, 0.3),
            orientation: [1.0, 0.0, 0.0, 0.0],
            sh: [[0.0; 3]; 4],
        };
        let out = render(&GaussianSet::new(vec![g]), &k, &RigidTransform::identity(), [0.0; 3]);
        let uv = k.project(&center);
        let (x, y) = (uv.x.floor() as usize, uv.y.floor() as usize);
        assert!((out.depth[y * 32 + x] - center.z).abs() < 1e-2);
    }

    #[test]
    fn coverage_failure_is_reported() {
        let spec = SynthSpec {
            gaussian_count: 1,
            scale_range: [0.01, 0.01],
            ..small_spec(0)
        };
        assert!(matches!(generate_synthetic_scene(&spec), Err(Error::EmptyRender { attempts: 10, .. })));
    }
}

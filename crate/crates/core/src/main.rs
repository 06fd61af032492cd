use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use splatgeo::eval::{ate, psnr, summarize, Summary, Trajectory};
use splatgeo::optimize::{optimize_scene, DepthInit, OptimizationResult, OptimizeConfig, PoseInit};
use splatgeo::photometric::total_loss;
use splatgeo::rasterizer::render;
use splatgeo::scene_io::{
    epipolar_overlay, export_ply, generate_synthetic_scene, import_ply, load_scene, read_json, save_scene, scene_dirs,
    write_csv, write_json, write_render, write_rgb8, PoseFile, SceneBundle, SynthSpec,
};
use splatgeo::{GaussianSet, RigidTransform};

#[derive(Parser)]
#[command(name = "splatgeo", version, about = "Gaussian-splatting depth and pose recovery from image triplets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene bundles with ground truth.
    Synth(SynthArgs),
    /// Render Gaussians into the three views of a scene.
    Render(RenderArgs),
    /// Recover depth and poses for one scene.
    Optimize(OptimizeArgs),
    /// Optimize every scene under a directory and report pose and image metrics.
    Eval(EvalArgs),
    /// Overlay epipolar lines of a pose file on the context images.
    Epipolar(EpipolarArgs),
    /// Write a scene's Gaussians as a PLY file.
    ExportPly(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes; more than one writes `scene_000`, `scene_001`, ... under `--out`.
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// JSON file overriding generator settings.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_parser = parse_rgb)]
    bg: Option<[f64; 3]>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    scene: PathBuf,
    /// Gaussians to render; defaults to the scene's ground truth.
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Context poses; defaults to the scene's ground truth.
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long, value_parser = parse_rgb)]
    bg: Option<[f64; 3]>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthStart {
    Median,
    Gt,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoseStart {
    Identity,
    Gt,
}

#[derive(Args)]
struct OptimizerFlags {
    /// Versioned JSON run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    lr_depth: Option<f64>,
    #[arg(long)]
    lr_pose: Option<f64>,
    #[arg(long)]
    lr_attr: Option<f64>,
    #[arg(long, value_enum)]
    depth_init: Option<DepthStart>,
    #[arg(long, value_enum)]
    pose_init: Option<PoseStart>,
    /// Multiplicative depth noise applied at initialization.
    #[arg(long)]
    depth_noise: Option<f64>,
    /// Rotation applied to each initial pose, degrees.
    #[arg(long)]
    rotation_perturbation: Option<f64>,
    /// Background color used for every render.
    #[arg(long, value_parser = parse_rgb)]
    bg: Option<[f64; 3]>,
}

#[derive(Args)]
struct OptimizeArgs {
    scene: PathBuf,
    #[command(flatten)]
    flags: OptimizerFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// A scene directory or a directory of scene directories.
    scenes: PathBuf,
    #[command(flatten)]
    flags: OptimizerFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EpipolarArgs {
    scene: PathBuf,
    /// Pose file as written by `optimize`.
    #[arg(long)]
    pose: PathBuf,
    /// Points drawn per context view.
    #[arg(long, default_value_t = 8)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [v] if (0.0..=1.0).contains(&v) => Ok([v; 3]),
        [r, g, b] if [r, g, b].iter().all(|c| (0.0..=1.0).contains(c)) => Ok([r, g, b]),
        _ => Err("expected one value or three comma-separated values in [0, 1]".into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Render(a) => render_cmd(a),
        Command::Optimize(a) => optimize_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Epipolar(a) => epipolar_cmd(a),
        Command::ExportPly(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn synth(a: SynthArgs) -> splatgeo::Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(bg) = a.bg {
        spec.background = bg;
    }
    for i in 0..a.scenes {
        let spec = SynthSpec {
            seed: a.seed + i as u64,
            ..spec.clone()
        };
        let bundle = generate_synthetic_scene(&spec)?;
        let dir = if a.scenes == 1 { a.out.clone() } else { a.out.join(format!("scene_{i:03}")) };
        save_scene(&bundle, &dir)?;
        log::info!("wrote {}", dir.display());
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> splatgeo::Result<()> {
    let bundle = load_scene(&a.scene)?;
    let gaussians = match (&a.ply, &bundle.ground_truth) {
        (Some(p), _) => import_ply(p)?,
        (None, Some(gt)) => gt.gaussians.clone(),
        (None, None) => return Err(splatgeo::Error::BadInit("scene has no ground-truth Gaussians; pass --ply".into())),
    };
    let poses = match (&a.pose, &bundle.ground_truth) {
        (Some(p), _) => read_json::<PoseFile>(p)?.poses()?,
        (None, Some(gt)) => gt.poses,
        (None, None) => return Err(splatgeo::Error::BadInit("scene has no ground-truth poses; pass --pose".into())),
    };
    let bg = a.bg.unwrap_or(bundle.background);
    write_views(&gaussians, &bundle, &poses, bg, &a.out, "render")
}

fn write_views(
    set: &GaussianSet,
    bundle: &SceneBundle,
    poses: &[RigidTransform; 2],
    bg: [f64; 3],
    dir: &Path,
    prefix: &str,
) -> splatgeo::Result<()> {
    let cams = [poses[0], RigidTransform::identity(), poses[1]];
    for (cam, name) in cams.iter().zip(["c1", "t", "c2"]) {
        let out = render(set, &bundle.intrinsics, cam, bg);
        write_render(&out, dir, &format!("{prefix}_{name}"))?;
    }
    Ok(())
}

fn build_config(flags: &OptimizerFlags) -> splatgeo::Result<OptimizeConfig> {
    let mut cfg: OptimizeConfig = match &flags.config {
        Some(p) => read_json(p)?,
        None => OptimizeConfig::default(),
    };
    let set = |dst: &mut f64, src: Option<f64>| {
        if let Some(v) = src {
            *dst = v;
        }
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    set(&mut cfg.loss.omega, flags.omega);
    set(&mut cfg.loss.lambda1, flags.lambda1);
    set(&mut cfg.loss.lambda2, flags.lambda2);
    set(&mut cfg.loss.gamma1, flags.gamma1);
    set(&mut cfg.loss.gamma2, flags.gamma2);
    set(&mut cfg.lr_depth, flags.lr_depth);
    set(&mut cfg.lr_pose, flags.lr_pose);
    set(&mut cfg.lr_attr, flags.lr_attr);
    set(&mut cfg.init.depth_noise, flags.depth_noise);
    set(&mut cfg.init.rotation_perturbation_deg, flags.rotation_perturbation);
    match flags.depth_init {
        Some(DepthStart::Median) => cfg.init.depth = DepthInit::Median,
        Some(DepthStart::Gt) => cfg.init.depth = DepthInit::GroundTruth,
        None => {}
    }
    match flags.pose_init {
        Some(PoseStart::Identity) => cfg.init.poses = PoseInit::Identity,
        Some(PoseStart::Gt) => cfg.init.poses = PoseInit::GroundTruth,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_background(mut bundle: SceneBundle, bg: Option<[f64; 3]>) -> SceneBundle {
    if let Some(bg) = bg {
        bundle.background = bg;
    }
    bundle
}

/// Writes the loss trace, summary, config, poses, merged Gaussians and final renders.
fn write_result(result: &OptimizationResult, bundle: &SceneBundle, dir: &Path) -> splatgeo::Result<()> {
    let report = &result.report;
    write_csv(&report.trace, &dir.join("trace.csv"))?;
    write_json(report, &dir.join("summary.json"))?;
    write_json(&report.config, &dir.join("config.json"))?;
    write_json(&PoseFile::new(&result.poses), &dir.join("poses.json"))?;
    export_ply(&result.gaussians, &dir.join("gaussians.ply"))?;
    write_views(&result.gaussians, bundle, &result.poses, bundle.background, dir, "final")
}

fn optimize_cmd(a: OptimizeArgs) -> splatgeo::Result<()> {
    let bundle = with_background(load_scene(&a.scene)?, a.flags.bg);
    let cfg = build_config(&a.flags)?;
    let result = optimize_scene(&bundle, &cfg)?;
    write_result(&result, &bundle, &a.out)?;
    if let (Some(r), Some(t)) = (result.report.max_rotation_error(), result.report.max_translation_error()) {
        log::info!("max rotation error {r:.4} deg, max translation error {t:.4} deg");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    scene: String,
    seed: u64,
    rotation_c1_deg: f64,
    rotation_c2_deg: f64,
    translation_c1_deg: f64,
    translation_c2_deg: f64,
    ate: f64,
    psnr_c1: f64,
    psnr_t: f64,
    psnr_c2: f64,
    final_loss: f64,
}

#[derive(Serialize)]
struct EvalAggregate {
    scenes: usize,
    rotation_deg: Summary,
    translation_deg: Summary,
    ate: Summary,
    psnr_t: Summary,
    psnr_context: Summary,
}

fn eval_cmd(a: EvalArgs) -> splatgeo::Result<()> {
    let dirs = scene_dirs(&a.scenes)?;
    if dirs.is_empty() {
        return Err(splatgeo::Error::ManifestMissing(a.scenes.join(splatgeo::scene_io::MANIFEST_NAME)));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let bundle = with_background(load_scene(dir)?, a.flags.bg);
        let gt = bundle.ground_truth.clone().ok_or_else(|| {
            splatgeo::Error::BadInit(format!("{} has no ground truth to evaluate against", dir.display()))
        })?;
        let cfg = build_config(&a.flags)?;
        let result = optimize_scene(&bundle, &cfg)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        write_result(&result, &bundle, &a.out.join(&name))?;
        let report = &result.report;
        let errs = report.pose_errors.expect("ground truth is present");
        let identity = RigidTransform::identity();
        let est = Trajectory::from_poses([&result.poses[0], &identity, &result.poses[1]]);
        let truth = Trajectory::from_poses([&gt.poses[0], &identity, &gt.poses[1]]);
        let renders = [result.poses[0], identity, result.poses[1]]
            .map(|cam| render(&result.gaussians, &bundle.intrinsics, &cam, bundle.background).image());
        let p = |v: usize| psnr(&renders[v], &bundle.images[v]);
        rows.push(EvalRow {
            scene: name,
            seed: bundle.seed,
            rotation_c1_deg: errs[0].rotation_deg,
            rotation_c2_deg: errs[1].rotation_deg,
            translation_c1_deg: errs[0].translation_deg,
            translation_c2_deg: errs[1].translation_deg,
            ate: ate(&est, &truth)?,
            psnr_c1: p(0)?,
            psnr_t: p(1)?,
            psnr_c2: p(2)?,
            final_loss: report.final_loss.map_or(f64::NAN, |l| total_loss(&l, &cfg.loss)),
        });
    }
    let collect = |f: &dyn Fn(&EvalRow) -> Vec<f64>| summarize(&rows.iter().flat_map(f).collect::<Vec<_>>());
    let aggregate = EvalAggregate {
        scenes: rows.len(),
        rotation_deg: collect(&|r| vec![r.rotation_c1_deg, r.rotation_c2_deg]),
        translation_deg: collect(&|r| vec![r.translation_c1_deg, r.translation_c2_deg]),
        ate: collect(&|r| vec![r.ate]),
        psnr_t: collect(&|r| vec![r.psnr_t]),
        psnr_context: collect(&|r| vec![r.psnr_c1, r.psnr_c2]),
    };
    write_csv(&rows, &a.out.join("eval.csv"))?;
    write_json(&aggregate, &a.out.join("eval.json"))
}

fn epipolar_cmd(a: EpipolarArgs) -> splatgeo::Result<()> {
    let bundle = load_scene(&a.scene)?;
    let poses = read_json::<PoseFile>(&a.pose)?.poses()?;
    let (img, samples) = epipolar_overlay(&bundle, &poses, a.points, a.seed)?;
    write_rgb8(&img, &a.out)?;
    let worst = samples.iter().map(|s| s.distance.abs()).fold(0.0, f64::max);
    log::info!("{} correspondences, largest point-to-line distance {worst:.3} px", samples.len());
    Ok(())
}

fn export_cmd(a: ExportArgs) -> splatgeo::Result<()> {
    let bundle = load_scene(&a.scene)?;
    let gt = bundle
        .ground_truth
        .ok_or_else(|| splatgeo::Error::BadInit("scene has no ground-truth Gaussians".into()))?;
    export_ply(&gt.gaussians, &a.out)
}

use std::path::Path;
use std::process::{Command, Output};

use splatgeo::optimize::OptimizationReport;
use splatgeo::scene_io::{load_scene, read_json, PoseFile};

fn splatgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatgeo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_optimize_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, run) = (tmp.path().join("s"), tmp.path().join("r"));
    let out = splatgeo(&["synth", "--seed", "7", "--out", arg(&scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = splatgeo(&["optimize", arg(&scene), "--steps", "100", "--out", arg(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,total,reprojection,rendering,lr_scale,grad_norm\n"));
    assert_eq!(trace.lines().count(), 101);
    let report: OptimizationReport = read_json(&run.join("summary.json")).unwrap();
    assert_eq!(report.steps_run, 100);
    assert_eq!(report.config.steps, 100);
    assert!(report.pose_errors.is_some());
    read_json::<PoseFile>(&run.join("poses.json")).unwrap().poses().unwrap();
    for name in ["gaussians.ply", "config.json", "final_t_color.png", "final_c1_depth.png", "final_c2_alpha.png"] {
        assert!(run.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, run) = (tmp.path().join("s"), tmp.path().join("r"));
    assert!(splatgeo(&["synth", "--seed", "1", "--out", arg(&scene), "--bg", "0.2"]).status.success());
    let out = splatgeo(&[
        "optimize", arg(&scene), "--steps", "2", "--omega", "0.5", "--lambda1", "2", "--lambda2", "0.5", "--gamma1",
        "0.1", "--gamma2", "0.9", "--lr-depth", "0.003", "--lr-pose", "0.004", "--lr-attr", "0.005", "--seed", "4",
        "--bg", "0.1,0.2,0.3", "--out", arg(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: OptimizationReport = read_json(&run.join("summary.json")).unwrap();
    let c = &report.config;
    assert_eq!((c.steps, c.seed), (2, 4));
    assert_eq!([c.loss.omega, c.loss.lambda1, c.loss.lambda2, c.loss.gamma1, c.loss.gamma2], [0.5, 2.0, 0.5, 0.1, 0.9]);
    assert_eq!([c.lr_depth, c.lr_pose, c.lr_attr], [0.003, 0.004, 0.005]);
    assert_eq!(load_scene(&scene).unwrap().background, [0.2; 3]);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = splatgeo(&["optimize", "somewhere", "--out", "x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(splatgeo(&["teleport"]).status.code(), Some(2));
    assert_eq!(splatgeo(&["synth", "--out", "x", "--bg", "2"]).status.code(), Some(2));
    assert_eq!(splatgeo(&["--help"]).status.code(), Some(0));
}

#[test]
fn domain_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = splatgeo(&["optimize", arg(&tmp.path().join("missing")), "--out", arg(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest missing"));
}

#[test]
fn render_epipolar_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("s");
    assert!(splatgeo(&["synth", "--seed", "3", "--out", arg(&scene)]).status.success());
    let bundle = load_scene(&scene).unwrap();
    let gt = bundle.ground_truth.as_ref().unwrap();
    let poses = tmp.path().join("poses.json");
    splatgeo::scene_io::write_json(&PoseFile::new(&gt.poses), &poses).unwrap();

    let renders = tmp.path().join("renders");
    assert!(splatgeo(&["render", arg(&scene), "--pose", arg(&poses), "--out", arg(&renders)]).status.success());
    let rendered = splatgeo::scene_io::read_rgb8(&renders.join("render_t_color.png"), (64, 64)).unwrap();
    assert_eq!(rendered, bundle.images[1]);

    let epi = tmp.path().join("epi.png");
    let out = splatgeo(&["epipolar", arg(&scene), "--pose", arg(&poses), "--out", arg(&epi)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(splatgeo::scene_io::read_rgb8(&epi, (128, 64)).unwrap().dims(), (128, 64));

    let ply = tmp.path().join("g.ply");
    assert!(splatgeo(&["export-ply", arg(&scene), "--out", arg(&ply)]).status.success());
    assert_eq!(splatgeo::scene_io::import_ply(&ply).unwrap().len(), gt.gaussians.len());
}

#[test]
fn eval_writes_rows_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let (scenes, out_dir) = (tmp.path().join("scenes"), tmp.path().join("eval"));
    let out = splatgeo(&["synth", "--seed", "5", "--scenes", "2", "--out", arg(&scenes)]);
    assert!(out.status.success());
    let out = splatgeo(&["eval", arg(&scenes), "--steps", "3", "--out", arg(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("scene_000,5,"));
    let agg: serde_json::Value = read_json(&out_dir.join("eval.json")).unwrap();
    assert_eq!(agg["scenes"], 2);
    assert_eq!(agg["translation_deg"]["count"], 4);
    assert!(out_dir.join("scene_001").join("poses.json").is_file());
}

mod common;

use common::*;
use nalgebra::Vector3;
use splatgeo::gaussian::{Gaussian, GaussianSet};
use splatgeo::geometry::CameraIntrinsics;
use splatgeo::plane::ImagePlane;
use splatgeo::scene_io::{
    export_ply, generate_synthetic_scene, import_ply, load_scene, save_scene, write_rgb8, SynthSpec, IMAGE_NAMES,
};
use splatgeo::Error;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        width: 32,
        height: 32,
        focal: 28.0,
        gaussian_count: 64,
        seed,
        ..SynthSpec::default()
    }
}

fn quantized(img: &ImagePlane) -> ImagePlane {
    let mut q = img.clone();
    q.quantize_u8();
    q
}

#[test]
fn scene_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic_scene(&small_spec(3)).unwrap();
    save_scene(&bundle, dir.path()).unwrap();
    let loaded = load_scene(dir.path()).unwrap();

    assert_eq!(loaded.intrinsics, bundle.intrinsics);
    assert_eq!(loaded.seed, bundle.seed);
    assert_eq!(loaded.background, bundle.background);
    for (a, b) in loaded.images.iter().zip(&bundle.images) {
        assert_eq!(a, &quantized(b));
    }
    let (gt, gt0) = (loaded.ground_truth.unwrap(), bundle.ground_truth.unwrap());
    assert_eq!(gt.poses, gt0.poses);
    let (lo, hi) = gt0
        .depths
        .iter()
        .map(|d| d.min_max())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| (a.min(c), b.max(d)));
    let step = (hi - lo) / 65535.0;
    for (a, b) in gt.depths.iter().zip(&gt0.depths) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 0.5 * step + 1e-12);
        }
    }
    assert_eq!(gt.gaussians.len(), gt0.gaussians.len());
}

#[test]
fn missing_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_scene(dir.path()), Err(Error::ManifestMissing(_))));
}

#[test]
fn image_size_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic_scene(&small_spec(4)).unwrap();
    save_scene(&bundle, dir.path()).unwrap();
    write_rgb8(&ImagePlane::new(10, 10), &dir.path().join(IMAGE_NAMES[2])).unwrap();
    match load_scene(dir.path()) {
        Err(Error::DimensionMismatch { expected, found, .. }) => {
            assert_eq!(expected, (32, 32));
            assert_eq!(found, (10, 10));
        }
        other => panic!("expected DimensionMismatch, got {other:?}"),
    }
}

#[test]
fn corrupt_image_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic_scene(&small_spec(5)).unwrap();
    save_scene(&bundle, dir.path()).unwrap();
    std::fs::write(dir.path().join(IMAGE_NAMES[0]), b"not a png").unwrap();
    assert!(matches!(load_scene(dir.path()), Err(Error::CorruptImage { .. })));
}

#[test]
fn empty_ply_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ply");
    export_ply(&GaussianSet::empty(), &path).unwrap();
    let text = std::fs::read(&path).unwrap();
    let header = String::from_utf8_lossy(&text);
    assert!(header.contains("element vertex 0\n"));
    assert!(text.ends_with(b"end_header\n"));
    assert!(import_ply(&path).unwrap().is_empty());
}

#[test]
fn half_opacity_is_stored_as_zero_logit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.ply");
    let g = Gaussian {
        center: Vector3::new(1.0, 2.0, 3.0),
        opacity: 0.5,
        scale: Vector3::new(1.0, 0.5, 2.0),
        orientation: [1.0, 0.0, 0.0, 0.0],
        sh: [[0.1, 0.2, 0.3], [0.0; 3], [0.0; 3], [0.0; 3]],
    };
    export_ply(&GaussianSet::new(vec![g]), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let body = &bytes[bytes.len() - 26 * 4..];
    let field = |i: usize| f32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().unwrap());
    assert_eq!(field(18), 0.0);
    assert_eq!([field(0), field(1), field(2)], [1.0, 2.0, 3.0]);
    assert_eq!([field(3), field(4), field(5)], [0.0; 3]);
    assert_eq!(field(19), 0.0);
    assert_eq!(field(20), 0.5f32.ln());
}

#[test]
fn ply_round_trip_within_f32() {
    let k = CameraIntrinsics::centered(30.0, 32, 32).unwrap();
    let set = random_scene(&mut rng(11), 20, &k);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.ply");
    export_ply(&set, &path).unwrap();
    let back = import_ply(&path).unwrap();
    assert_eq!(back.len(), set.len());
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(1.0);
    for (a, b) in back.iter().zip(set.iter()) {
        for i in 0..3 {
            assert!(close(a.center[i], b.center[i]));
            assert!(close(a.scale[i], b.scale[i]));
        }
        assert!(close(a.opacity, b.opacity));
        for i in 0..4 {
            assert!(close(a.orientation[i], b.orientation[i]));
        }
        for c in 0..4 {
            for ch in 0..3 {
                assert!(close(a.sh[c][ch], b.sh[c][ch]));
            }
        }
    }
}

mod common;

use std::path::PathBuf;

use morphkit_core::error::Error;
use morphkit_core::splat::{self, GaussianCloud};
use nalgebra::Vector3;
use proptest::prelude::*;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn expected() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixture("three_expected.json")).unwrap()).unwrap()
}

fn vec_of(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn max_field_error(a: &GaussianCloud, b: &GaussianCloud) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (p, q) in a.primitives.iter().zip(&b.primitives) {
        worst = worst
            .max((p.center - q.center).amax())
            .max((p.opacity - q.opacity).abs())
            .max((p.scale - q.scale).amax())
            .max((p.color - q.color).amax());
        let (x, y) = (p.rotation_wxyz(), q.rotation_wxyz());
        for k in 0..4 {
            worst = worst.max((x[k] - y[k]).abs());
        }
    }
    worst
}

#[test]
fn fixture_matches_independent_decode() {
    let cloud = splat::load_ply(fixture("three.ply")).unwrap();
    let exp = expected();
    let prims = exp["primitives"].as_array().unwrap();
    assert_eq!(cloud.len(), 3);
    for (p, e) in cloud.primitives.iter().zip(prims) {
        let center = vec_of(&e["center"]);
        let scale = vec_of(&e["scale"]);
        let rotation = vec_of(&e["rotation"]);
        let color = vec_of(&e["color"]);
        for k in 0..3 {
            assert!((p.center[k] - center[k]).abs() < 1e-12);
            assert!((p.scale[k] - scale[k]).abs() < 1e-9 * scale[k].max(1.0));
            assert!((p.color[k] - color[k]).abs() < 1e-12);
        }
        assert!((p.opacity - e["opacity"].as_f64().unwrap()).abs() < 1e-12);
        let q = p.rotation_wxyz();
        for k in 0..4 {
            assert!((q[k] - rotation[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn fixture_centers_in_order() {
    let cloud = splat::load_ply(fixture("three.ply")).unwrap();
    let exp = expected();
    let centers = splat::centers(&cloud);
    for (c, e) in centers.iter().zip(exp["primitives"].as_array().unwrap()) {
        assert_eq!(c.as_slice(), vec_of(&e["center"]).as_slice());
    }
}

#[test]
fn fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = splat::load_ply(fixture("three.ply")).unwrap();
    let out = dir.path().join("again.ply");
    splat::save_ply(&cloud, &out).unwrap();
    let again = splat::load_ply(&out).unwrap();
    assert!(max_field_error(&cloud, &again) < 1e-6);

    // Extra properties (normals, higher-order SH) survive byte for byte.
    let names: Vec<&str> = again.extra.as_ref().unwrap().names().collect();
    assert_eq!(names, ["nx", "ny", "nz", "f_rest_0", "f_rest_1", "f_rest_2"]);
    assert_eq!(cloud.extra, again.extra);
}

#[test]
fn json_round_trip() {
    let cloud = splat::load_ply(fixture("three.ply")).unwrap();
    let text = splat::cloud_to_json(&cloud).unwrap();
    let back = splat::cloud_from_json(&text).unwrap();
    assert!(max_field_error(&cloud, &back) < 1e-12);
}

#[test]
fn unwritable_path_is_io_error() {
    let cloud = splat::load_ply(fixture("three.ply")).unwrap();
    let err = splat::save_ply(&cloud, "/nonexistent-dir/x.ply").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(splat::load_ply("/nonexistent.ply"), Err(Error::Io { .. })));
}

#[test]
fn single_primitive_centers() {
    let cloud = GaussianCloud::new(vec![common::splat(Vector3::zeros(), 0.5, 0.1, Vector3::zeros())]);
    assert_eq!(splat::centers(&cloud), vec![Vector3::zeros()]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_clouds_round_trip(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = common::rng(seed);
        let cloud = common::random_cloud(&mut rng, n, 5.0);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.ply");
        splat::save_ply(&cloud, &out).unwrap();
        let back = splat::load_ply(&out).unwrap();
        prop_assert!(max_field_error(&cloud, &back) < 1e-6);
    }
}

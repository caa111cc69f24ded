use std::fs;

use nalgebra::Vector3;
use proptest::prelude::*;
use splatpose::geometry::{rotation_angle_between, CameraIntrinsics, CameraPose, EulerAngles};
use splatpose::image::ImageBuffer;
use splatpose::io::{
    export_cloud_ply, import_cloud_ply, load_dataset, read_trajectory, write_intrinsics, write_trajectory, SplitRatio,
};
use splatpose::render::{GaussianCloud, GaussianPrimitive};
use splatpose::Error;

fn cloud(n: usize) -> GaussianCloud {
    GaussianCloud::new(
        (0..n)
            .map(|i| {
                let f = i as f64;
                GaussianPrimitive {
                    position: Vector3::new(0.1 * f - 1.0, (f * 0.37).sin(), 2.0 + (f * 0.11).cos()),
                    log_scale: Vector3::new(-3.0 + 0.01 * f, -2.5, -2.0 - 0.02 * f),
                    rotation: [0.9, 0.1 * (f * 0.3).sin(), -0.2, 0.05 * f],
                    opacity_logit: 1.3 - 0.07 * f,
                    color: Vector3::new((0.13 * f).fract(), 0.5, 1.0 - (0.07 * f).fract()),
                }
            })
            .collect(),
    )
}

#[test]
fn ply_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
    let original = cloud(25);
    export_cloud_ply(&original, &a).unwrap();
    let imported = import_cloud_ply(&a).unwrap();
    assert_eq!(imported.len(), 25);
    for (x, y) in original.gaussians.iter().zip(&imported.gaussians) {
        assert!((x.position - y.position).amax() < 1e-6);
        assert!((x.log_scale - y.log_scale).amax() < 1e-6);
        assert!((x.opacity_logit - y.opacity_logit).abs() < 1e-6);
        assert!((x.color - y.color).amax() < 1e-6);
        for (p, q) in x.rotation.iter().zip(&y.rotation) {
            assert!((p - q).abs() < 1e-6);
        }
    }
    export_cloud_ply(&imported, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn single_and_empty_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.ply");
    export_cloud_ply(&cloud(1), &one).unwrap();
    let text = fs::read_to_string(&one).unwrap();
    let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
    assert_eq!(body.len(), 1);
    assert_eq!(body[0].split_whitespace().count(), 14);

    let empty = dir.path().join("empty.ply");
    export_cloud_ply(&GaussianCloud::default(), &empty).unwrap();
    assert!(fs::read_to_string(&empty).unwrap().contains("element vertex 0\n"));
    assert!(import_cloud_ply(&empty).unwrap().is_empty());
}

#[test]
fn truncated_ply_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ply");
    export_cloud_ply(&cloud(3), &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() - 20]).unwrap();
    assert!(matches!(import_cloud_ply(&path), Err(Error::Parse { .. })));
}

fn arb_pose() -> impl Strategy<Value = CameraPose> {
    let a = -3.1f64..3.1;
    let t = -50.0f64..50.0;
    (a.clone(), -1.5f64..1.5, a, t.clone(), t.clone(), t)
        .prop_map(|(al, be, ga, x, y, z)| CameraPose::new(EulerAngles::new(al, be, ga), Vector3::new(x, y, z)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_round_trip(poses in prop::collection::vec(arb_pose(), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let entries: Vec<(usize, CameraPose)> = poses.into_iter().enumerate().map(|(i, p)| (3 * i + 1, p)).collect();
        write_trajectory(&entries, &path).unwrap();
        let back = read_trajectory(&path).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for ((i, p), (j, q)) in entries.iter().zip(&back) {
            prop_assert_eq!(i, j);
            prop_assert!(rotation_angle_between(&p.rotation_matrix(), &q.rotation_matrix()) < 1e-9);
            prop_assert!((p.translation - q.translation).amax() < 1e-9);
        }
    }
}

fn write_dataset(root: &std::path::Path, n: usize) {
    let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
    write_intrinsics(&k, &root.join("intrinsics.txt")).unwrap();
    for i in 0..n {
        let img = ImageBuffer::from_fn(8, 8, |u, v| [u as f64 / 8.0, v as f64 / 8.0, i as f64 / n as f64]);
        img.save(root.join(format!("img_{i:02}.png"))).unwrap();
    }
}

#[test]
fn sixteen_images_split_fourteen_two() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 16);
    let d = load_dataset(dir.path(), SplitRatio::default()).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (14, 2));
    assert_eq!(d.image_names[0], "img_00.png");
    assert!(d.images[15].data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn two_images_are_all_training() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2);
    let d = load_dataset(dir.path(), SplitRatio::default()).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (2, 0));
}

#[test]
fn corrupted_image_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 4);
    fs::write(dir.path().join("img_02.png"), b"not a png").unwrap();
    let err = load_dataset(dir.path(), SplitRatio::default()).unwrap_err();
    assert!(err.to_string().contains("img_02.png"), "{err}");
}

#[test]
fn missing_intrinsics_and_too_few_images() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 3);
    fs::remove_file(dir.path().join("intrinsics.txt")).unwrap();
    assert!(load_dataset(dir.path(), SplitRatio::default()).is_err());

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 1);
    assert!(load_dataset(dir.path(), SplitRatio::default()).is_err());
}

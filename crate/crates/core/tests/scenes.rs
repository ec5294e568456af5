use preprune::scenes::*;

#[test]
fn clips_round_trip_through_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, n, h, w) in [(0u64, 1usize, 2usize, 2usize), (7, 3, 8, 8), (99, 2, 4, 6)] {
        let clip = generate_clip(seed, n, h, w).unwrap();
        let sub = dir.path().join(format!("clip{seed}"));
        let manifest = clip.save_dir(&sub).unwrap();
        assert_eq!(manifest.format, CLIP_FORMAT);
        assert_eq!(ClipSample::load_dir(&sub).unwrap(), clip);
    }
}

#[test]
fn generation_is_seeded() {
    assert_eq!(generate_clip(5, 3, 8, 8).unwrap(), generate_clip(5, 3, 8, 8).unwrap());
    assert_ne!(generate_clip(5, 3, 8, 8).unwrap(), generate_clip(6, 3, 8, 8).unwrap());
}

#[test]
fn every_point_is_its_pixel_unprojected() {
    for seed in 0..10 {
        let clip = generate_clip(seed, 3, 5, 7).unwrap();
        for f in &clip.frames {
            for r in 0..5 {
                for c in 0..7 {
                    let z = f.depth.at(&[r, c]);
                    assert!(z > 0.0);
                    let want = unproject(r, c, z, 5, 7, &f.camera);
                    for k in 0..3 {
                        assert!((f.points.at(&[r, c, k]) - want[k]).abs() < 1e-9);
                    }
                }
            }
            let q = f.camera.quaternion();
            assert!((q.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn missing_or_foreign_directories_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ClipSample::load_dir(&dir.path().join("nothing")).is_err());
    std::fs::write(dir.path().join("manifest.json"), r#"{"format":"other"}"#).unwrap();
    assert!(ClipSample::load_dir(dir.path()).is_err());
}

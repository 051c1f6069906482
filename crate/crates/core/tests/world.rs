//! End-to-end checks of the sprite world: the motion estimator must recover
//! every sampled label, and the dataset format must round-trip exactly.

use spinlam_core::world::{
    builtin_style, estimate_sprite_motion, generate_triplets, write_dataset, Dataset,
    FrameTriplet, WorldConfig,
};

#[test]
fn labels_are_recoverable_from_pixels() {
    let cfg = WorldConfig::default();
    let triplets: Vec<FrameTriplet<f64>> = generate_triplets(&cfg, 2024, 1000).unwrap();
    let k = cfg.interval_k as f64;
    let mut worst_px = 0.0f64;
    let mut worst_rad = 0.0f64;
    for (i, t) in triplets.iter().enumerate() {
        let style = builtin_style(t.style_id).unwrap();
        for step in 0..2 {
            let est = estimate_sprite_motion(
                &t.frames[step].view(),
                style,
                &t.frames[step + 1].view(),
                style,
            )
            .unwrap();
            let want_dx = k * t.actions[step].delta_position[0] * cfg.width as f64;
            let want_dy = k * t.actions[step].delta_position[1] * cfg.height as f64;
            let err_px = ((est.delta_px[0] - want_dx).powi(2)
                + (est.delta_px[1] - want_dy).powi(2))
            .sqrt();
            let err_rad = (est.delta_heading - k * t.actions[step].delta_heading).abs();
            worst_px = worst_px.max(err_px);
            worst_rad = worst_rad.max(err_rad);
            assert!(
                err_px <= 1.0,
                "triplet {} step {} ({:?}): position error {:.3}px",
                i,
                step,
                t.actions[step].class_label,
                err_px
            );
            assert!(
                err_rad <= 0.1,
                "triplet {} step {} ({:?}): heading error {:.4}rad",
                i,
                step,
                t.actions[step].class_label,
                err_rad
            );
        }
    }
    println!(
        "label consistency over 1000 triplets: worst {:.3}px / {:.4}rad",
        worst_px, worst_rad
    );
}

#[test]
fn hundred_triplet_roundtrip_is_lossless() {
    let cfg = WorldConfig::default();
    let triplets: Vec<FrameTriplet<f32>> = generate_triplets(&cfg, 7, 100).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&triplets, dir.path()).unwrap();
    let ds: Dataset<f32> = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.len(), 100);
    for (i, orig) in triplets.iter().enumerate() {
        let back = ds.get(i).unwrap();
        for f in 0..3 {
            assert_eq!(orig.frames[f], back.frames[f], "triplet {} frame {}", i, f);
        }
        assert_eq!(orig.actions, back.actions);
        assert_eq!(orig.style_id, back.style_id);
    }
}

#[test]
fn dataset_reads_are_thread_safe() {
    let cfg = WorldConfig::default();
    let triplets: Vec<FrameTriplet<f32>> = generate_triplets(&cfg, 13, 20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&triplets, dir.path()).unwrap();
    let ds: Dataset<f32> = Dataset::open(dir.path()).unwrap();
    std::thread::scope(|scope| {
        for worker in 0..4 {
            let ds = &ds;
            scope.spawn(move || {
                for i in 0..ds.len() {
                    let t = ds.get((i + worker * 5) % ds.len()).unwrap();
                    assert_eq!(t.frames[0].dim(), (32, 32, 3));
                }
            });
        }
    });
}

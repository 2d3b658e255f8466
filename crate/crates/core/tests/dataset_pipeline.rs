use std::time::Instant;

use fluiddiff::dataset::{
    denormalize, generate_dataset, load_dataset, normalize, read_manifest, scale_for, verify_dataset,
    velocity_grids, velocity_tensor, NormStats, Split, MANIFEST_FILE,
};
use fluiddiff::fluid::{Grid, SimParams};
use fluiddiff::rng::GaussianRng;
use fluiddiff::IoError;
use proptest::prelude::*;

fn small(total_time: f64) -> SimParams {
    SimParams {
        height: 16,
        width: 16,
        total_time,
        ..SimParams::default()
    }
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn single_scene_has_forty_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(40.0), 1, 3, (4, 1), dir.path()).unwrap();
    assert_eq!(m.snapshots_per_scene, 40);
    assert_eq!(m.split.train, vec![0]);
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.scenes.len(), 1);
    assert_eq!(ds.scenes[0].snapshots.len(), 40);
    let taus: Vec<f64> = ds.scenes[0].snapshots.iter().map(|s| s.tau).collect();
    assert_eq!(taus.first(), Some(&1.0));
    assert_eq!(taus.last(), Some(&40.0));
    assert_eq!(dir_bytes(dir.path()).len(), 2);
}

#[test]
fn sixteen_scenes_fast_deterministic_and_verified() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let m = generate_dataset(&small(40.0), 16, 77, (4, 1), a.path()).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "generation took {elapsed:?}");
    generate_dataset(&small(40.0), 16, 77, (4, 1), b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    assert_eq!((m.split.train.len(), m.split.test.len()), (12, 4));
    assert!(m.split.is_partition_of(16));
    assert_eq!(verify_dataset(a.path()).unwrap(), m);

    // stats come from training scenes only
    let ds = load_dataset(a.path()).unwrap();
    assert_eq!(ds.max_abs(Split::Train), m.normalization.max_abs);
    let all = ds.scenes.iter().fold([0.0f64; 2], |acc, s| {
        let x = s.max_abs();
        [acc[0].max(x[0]), acc[1].max(x[1])]
    });
    assert!(all[0] >= m.normalization.max_abs[0] && all[1] >= m.normalization.max_abs[1]);

    let pairs = ds.pairs(Split::Train).unwrap();
    assert_eq!(pairs.len(), 12 * 40);
    for p in &pairs {
        assert_eq!(p.x0.shape(), &[2, 16, 16]);
        assert!(p.x0.max_abs() <= 1.0);
        assert_eq!(p.y.channels().shape(), &[2, 16, 16]);
        assert_eq!(p.y.tau(), p.tau);
    }
}

#[test]
fn tampering_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small(4.0), 3, 5, (2, 1), dir.path()).unwrap();
    let scene = dir.path().join(&m.scenes[1].file);
    let mut bytes = std::fs::read(&scene).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&scene, bytes).unwrap();
    assert!(matches!(verify_dataset(dir.path()), Err(IoError::HashMismatch { .. })));

    std::fs::remove_file(&scene).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(IoError::Io { .. })));
}

#[test]
fn manifest_rejects_unknown_fields_and_bad_split() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(2.0), 2, 1, (1, 1), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap();

    std::fs::write(&path, text.replacen('{', "{\n  \"surprise\": 1,", 1)).unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(IoError::Json(_))));

    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["split"]["test"] = serde_json::json!([0, 1]);
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(IoError::Manifest(_))));
}

#[test]
fn invalid_params_are_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SimParams {
        nu: 10.0,
        ..small(2.0)
    };
    assert!(generate_dataset(&bad, 2, 0, (1, 1), dir.path()).is_err());
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}

proptest! {
    #[test]
    fn normalization_roundtrip_is_exact(
        vals in prop::collection::vec(-1e3f64..1e3, 16),
        extra in 0.0f64..10.0,
    ) {
        let g = Grid::from_vec(4, 4, vals).unwrap();
        let scale = scale_for(g.max_abs() + extra).unwrap_or(1.0);
        let back = denormalize(&normalize(&g, scale), scale);
        for (a, b) in g.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_roundtrip_within_one_ulp(seed in any::<u64>()) {
        let mut rng = GaussianRng::new(seed);
        let ux = Grid::from_fn(4, 4, |_, _| rng.normal() * 0.7);
        let uy = Grid::from_fn(4, 4, |_, _| rng.normal() * 0.02);
        let stats = NormStats::from_max_abs([ux.max_abs(), uy.max_abs()]);
        let t32 = velocity_tensor(&ux, &uy, &stats).cast::<f32>();
        let (bx, by) = velocity_grids(&t32, &stats).unwrap();
        for (orig, back) in [(&ux, &bx), (&uy, &by)] {
            for (a, b) in orig.data().iter().zip(back.data()) {
                let a32 = *a as f32;
                let b32 = *b as f32;
                let ulps = (a32.to_bits() as i64 - b32.to_bits() as i64).abs();
                prop_assert!(ulps <= 1, "{} vs {}", a, b);
            }
        }
    }
}

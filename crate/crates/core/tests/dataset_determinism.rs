use std::fs;

use textrestore::degrade::{
    build_dataset, DatasetManifest, DatasetOptions, DegradationKind, DegradationMix, MANIFEST_FILE,
};

fn opts() -> DatasetOptions {
    DatasetOptions { size: 24, ..Default::default() }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mix = DegradationMix::equal_thirds();
    let ma = build_dataset(a.path(), 9, &mix, 42, &opts()).unwrap();
    let mb = build_dataset(b.path(), 9, &mix, 42, &opts()).unwrap();
    assert_eq!(ma.entries, mb.entries);
    for e in &ma.entries {
        for p in [&e.lq_path, &e.hq_path] {
            assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap(), "{p}");
        }
    }
    let reloaded = DatasetManifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(reloaded.entries, ma.entries);
    assert_eq!(reloaded.load_samples().unwrap().len(), 9);
}

#[test]
fn different_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mix = DegradationMix::single(DegradationKind::Rain);
    let ma = build_dataset(a.path(), 3, &mix, 1, &opts()).unwrap();
    let mb = build_dataset(b.path(), 3, &mix, 2, &opts()).unwrap();
    assert_ne!(ma.entries, mb.entries);
}

#[test]
fn noise_only_mix_yields_only_noise_specs() {
    let dir = tempfile::tempdir().unwrap();
    let mix: DegradationMix = "noise=1".parse().unwrap();
    let m = build_dataset(dir.path(), 12, &mix, 0, &opts()).unwrap();
    assert_eq!(m.entries.len(), 12);
    assert!(m.entries.iter().all(|e| e.spec.kind() == DegradationKind::Noise));
}

use std::collections::BTreeSet;
use std::fs;

use mpgen_io::manifest::read_manifest;
use mpgen_io::Raster;
use mpgen_synth::sweep::generate_snapshots;
use mpgen_synth::{
    build_scene, sweep_trajectory, ScenarioKind, SweepOptions, Trajectory, CROSSROAD_ALTITUDES_M,
    DEFAULT_FREQUENCIES_HZ,
};

fn small_opts() -> SweepOptions {
    SweepOptions { image_size: (16, 16), map_size: (8, 8), ..Default::default() }
}

#[test]
fn twenty_one_snapshots_per_condition() {
    let scene = build_scene(0, ScenarioKind::Crossroad);
    let t = Trajectory { start: (0.0, 0.0), end: (0.0, -10.0), velocity: (0.0, -0.5) };
    let snaps = generate_snapshots(&scene, &t, &[50.0], &[28e9], &small_opts()).unwrap();
    assert_eq!(snaps.len(), 21);
    assert_eq!(snaps[20].pose.y, -10.0);
}

#[test]
fn condition_matrix_and_determinism() {
    let scene = build_scene(3, ScenarioKind::Crossroad);
    let t = Trajectory { start: (-5.0, 5.0), end: (-5.0, 3.0), velocity: (0.0, -1.0) };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = small_opts();
    let m1 = sweep_trajectory(&scene, &t, &CROSSROAD_ALTITUDES_M, &DEFAULT_FREQUENCIES_HZ, a.path(), &opts)
        .unwrap();
    let m2 = sweep_trajectory(&scene, &t, &CROSSROAD_ALTITUDES_M, &DEFAULT_FREQUENCIES_HZ, b.path(), &opts)
        .unwrap();
    assert_eq!(m1.snapshots.len(), 3 * 4 * 3);

    let groups = m1.condition_groups();
    assert_eq!(groups.len(), 12);
    for entries in groups.values() {
        assert_eq!(entries.len(), 3);
    }
    let alts: BTreeSet<u64> = m1.snapshots.iter().map(|s| s.altitude_m as u64).collect();
    let freqs: BTreeSet<u64> = m1.snapshots.iter().map(|s| s.frequency_hz as u64).collect();
    assert_eq!(alts.len() * freqs.len(), groups.len());

    let read = read_manifest(&a.path().join("manifest.json")).unwrap();
    assert_eq!(read, m1);
    let bytes = |d: &std::path::Path, rel: &str| fs::read(d.join(rel)).unwrap();
    assert_eq!(bytes(a.path(), "manifest.json"), bytes(b.path(), "manifest.json"));
    for (e1, e2) in m1.snapshots.iter().zip(&m2.snapshots) {
        assert_eq!(bytes(a.path(), &e1.image_path), bytes(b.path(), &e2.image_path));
        assert_eq!(bytes(a.path(), &e1.mask_path), bytes(b.path(), &e2.mask_path));
        for (p, rel) in &e1.map_paths {
            assert_eq!(bytes(a.path(), rel), bytes(b.path(), &e2.map_paths[p]));
        }
        let img = Raster::read(&a.path().join(&e1.image_path)).unwrap();
        assert_eq!(img.dims(), (16, 16, 3));
    }
}

#[test]
fn rejects_zero_velocity_and_outside_endpoints() {
    let scene = build_scene(0, ScenarioKind::Crossroad);
    let d = tempfile::tempdir().unwrap();
    let opts = small_opts();
    let t = Trajectory { start: (0.0, 0.0), end: (0.0, -1.0), velocity: (0.0, 0.0) };
    assert!(sweep_trajectory(&scene, &t, &[50.0], &[1e9], d.path(), &opts).is_err());
    let t = Trajectory { start: (0.0, 0.0), end: (0.0, -900.0), velocity: (0.0, -1.0) };
    assert!(sweep_trajectory(&scene, &t, &[50.0], &[1e9], d.path(), &opts).is_err());
}

#[test]
fn unwritable_out_dir_is_io_error() {
    let scene = build_scene(0, ScenarioKind::Crossroad);
    let d = tempfile::tempdir().unwrap();
    let blocker = d.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let t = Trajectory { start: (0.0, 0.0), end: (0.0, -1.0), velocity: (0.0, -1.0) };
    let err = sweep_trajectory(&scene, &t, &[50.0], &[1e9], &blocker, &small_opts()).unwrap_err();
    assert!(matches!(err, mpgen_synth::SynthError::Io { .. }), "{err}");
}

//! Trajectory sweeps: one snapshot per (step, altitude, frequency).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mpgen_io::{DatasetManifest, Raster, SnapshotEntry, MULTIPATH_PARAMS};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::maps::{rasterize_maps, MultipathMapSet, Normalization};
use crate::render::render_topdown;
use crate::scene::{SceneSpec, UavPose, DEFAULT_FOV_DEG};
use crate::trace::{records_for, trace_geometry, RxGrid};

/// Straight-line flight at constant velocity (meters per snapshot).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub velocity: (f64, f64),
}

impl Trajectory {
    /// `floor(distance / |velocity|) + 1`.
    pub fn steps(&self) -> Result<usize> {
        let speed = self.velocity.0.hypot(self.velocity.1);
        if !(speed.is_finite() && speed > 0.0) {
            return Err(SynthError::InvalidInput("velocity must be nonzero".into()));
        }
        let dist = (self.end.0 - self.start.0).hypot(self.end.1 - self.start.1);
        // Guard against 20.000000000000004-style float noise in the ratio.
        Ok(((dist / speed) + 1e-9).floor() as usize + 1)
    }

    pub fn position(&self, step: usize) -> (f64, f64) {
        (
            self.start.0 + step as f64 * self.velocity.0,
            self.start.1 + step as f64 * self.velocity.1,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub image_size: (usize, usize),
    pub map_size: (usize, usize),
    pub max_paths: usize,
    /// Path indices emitted as map sets (1 = strongest).
    pub path_indices: Vec<usize>,
    pub params: Vec<String>,
    pub fov_deg: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            map_size: (32, 32),
            max_paths: 6,
            path_indices: vec![1],
            params: MULTIPATH_PARAMS.iter().map(|s| s.to_string()).collect(),
            fov_deg: DEFAULT_FOV_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotTags {
    pub scenario: String,
    pub altitude_m: f64,
    pub frequency_hz: f64,
    pub step: usize,
}

/// One aligned sample: image, pose, frequency and per-path-index map sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub id: String,
    pub image: Raster,
    pub pose: UavPose,
    pub frequency_hz: f64,
    pub map_sets: Vec<MultipathMapSet>,
    pub tags: SnapshotTags,
}

pub fn snapshot_id(scenario: &str, seed: u64, altitude_m: f64, frequency_hz: f64, step: usize) -> String {
    format!(
        "{scenario}_s{seed}_a{}_f{}GHz_t{step:04}",
        altitude_m,
        frequency_hz / 1e9
    )
}

/// Builds the snapshots of one pose for every frequency, sharing the
/// (frequency-independent) traced geometry.
pub fn snapshots_at(
    scene: &SceneSpec,
    pose: &UavPose,
    frequencies: &[f64],
    step: usize,
    opts: &SweepOptions,
) -> Result<Vec<Snapshot>> {
    let image = render_topdown(scene, pose, opts.image_size.0, opts.image_size.1)?;
    let (rows, cols) = opts.map_size;
    let grid = RxGrid::for_pose(pose, rows, cols);
    let geo = trace_geometry(scene, pose, &grid)?;
    let norm = Normalization::for_pose(pose);
    let params: Vec<&str> = opts.params.iter().map(String::as_str).collect();
    let mut out = Vec::with_capacity(frequencies.len());
    for &f in frequencies {
        if !(f.is_finite() && f > 0.0) {
            return Err(SynthError::InvalidInput(format!("frequency {f} must be > 0")));
        }
        let records = records_for(&geo, f, scene.material_loss_db, opts.max_paths);
        let map_sets = opts
            .path_indices
            .iter()
            .map(|&k| rasterize_maps(&records, rows, cols, k, &params, f, &norm))
            .collect::<Result<Vec<_>>>()?;
        let scenario = scene.scenario_kind.as_str().to_string();
        out.push(Snapshot {
            id: snapshot_id(&scenario, scene.seed, pose.altitude, f, step),
            image: image.clone(),
            pose: *pose,
            frequency_hz: f,
            map_sets,
            tags: SnapshotTags {
                scenario,
                altitude_m: pose.altitude,
                frequency_hz: f,
                step,
            },
        });
    }
    Ok(out)
}

/// In-memory sweep. Ordered by altitude, then step, then frequency.
pub fn generate_snapshots(
    scene: &SceneSpec,
    trajectory: &Trajectory,
    altitudes: &[f64],
    frequencies: &[f64],
    opts: &SweepOptions,
) -> Result<Vec<Snapshot>> {
    let steps = trajectory.steps()?;
    for p in [trajectory.start, trajectory.end] {
        if !scene.bounds.contains(p.0, p.1) {
            return Err(SynthError::InvalidInput(format!("trajectory endpoint {p:?} outside scene")));
        }
    }
    let mut out = Vec::new();
    for &alt in altitudes {
        for step in 0..steps {
            let (x, y) = trajectory.position(step);
            let pose = UavPose { x, y, altitude: alt, fov_deg: opts.fov_deg };
            out.extend(snapshots_at(scene, &pose, frequencies, step, opts)?);
        }
    }
    Ok(out)
}

/// Writes a sweep to `out_dir` (`images/`, `maps/`, `manifest.json`) and returns the manifest.
pub fn sweep_trajectory(
    scene: &SceneSpec,
    trajectory: &Trajectory,
    altitudes: &[f64],
    frequencies: &[f64],
    out_dir: &Path,
    opts: &SweepOptions,
) -> Result<DatasetManifest> {
    let snaps = generate_snapshots(scene, trajectory, altitudes, frequencies, opts)?;
    write_snapshots(&snaps, scene.seed, out_dir)
}

pub fn write_snapshots(snaps: &[Snapshot], seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    for sub in ["images", "maps"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| SynthError::Io { path: d.clone(), source: e })?;
    }
    let mut entries = Vec::new();
    for s in snaps {
        let image_path = format!("images/{}.f32r", s.id);
        s.image.write(&out_dir.join(&image_path))?;
        for set in &s.map_sets {
            let prefix = format!("maps/{}_p{}", s.id, set.path_index);
            let mut map_paths = BTreeMap::new();
            for param in set.maps.keys() {
                let rel = format!("{prefix}_{param}.f32r");
                set.raster(param)?.write(&out_dir.join(&rel))?;
                map_paths.insert(param.clone(), rel);
            }
            let mask_path = format!("{prefix}_mask.f32r");
            set.mask_raster().write(&out_dir.join(&mask_path))?;
            entries.push(SnapshotEntry {
                id: s.id.clone(),
                scenario: s.tags.scenario.clone(),
                altitude_m: s.tags.altitude_m,
                frequency_hz: s.frequency_hz,
                image_path: image_path.clone(),
                map_paths,
                mask_path,
                path_index: set.path_index as u32,
                embedding_path: None,
            });
        }
    }
    let manifest = DatasetManifest::new(seed, entries);
    manifest.write(&out_dir.join(mpgen_io::manifest::MANIFEST_FILE))?;
    Ok(manifest)
}

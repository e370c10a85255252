//! Deterministic synthetic sensing/channel data for UAV-to-ground links.
//!
//! A [`SceneSpec`] holds box buildings, road rectangles and vehicles. From a
//! [`UavPose`] we render a semantic top-down image of the camera footprint and
//! trace line-of-sight plus first-order specular (image-method) reflections
//! to a dense ground receiver grid covering exactly the same footprint. The
//! per-receiver paths are rasterized into normalized multipath maps.

pub mod error;
pub mod maps;
pub mod render;
pub mod scene;
pub mod sweep;
pub mod trace;

pub use error::{Result, SynthError};
pub use maps::{rasterize_maps, MultipathMapSet, Normalization};
pub use render::render_topdown;
pub use scene::{build_scene, Building, Rect, ScenarioKind, SceneSpec, UavPose, Vehicle, VehicleClass};
pub use sweep::{sweep_trajectory, Snapshot, SnapshotTags, SweepOptions, Trajectory};
pub use trace::{fspl_db, trace_links, PathKind, PathRecord, RxGrid, SPEED_OF_LIGHT};

/// Default frequency set in Hz.
pub const DEFAULT_FREQUENCIES_HZ: [f64; 4] = [1.6e9, 5.9e9, 15e9, 28e9];
/// Default crossroad altitudes in meters.
pub const CROSSROAD_ALTITUDES_M: [f64; 3] = [50.0, 70.0, 80.0];
/// Default wide-lane altitudes in meters.
pub const WIDE_LANE_ALTITUDES_M: [f64; 3] = [200.0, 250.0, 300.0];

//! Semantic orthographic top-down rendering of the camera footprint.

use mpgen_io::Raster;

use crate::error::{Result, SynthError};
use crate::scene::{SceneSpec, UavPose, VehicleClass};

pub const GROUND_COLOR: [f32; 3] = [0.34, 0.52, 0.30];
pub const ROAD_COLOR: [f32; 3] = [0.50, 0.50, 0.50];
pub const CAR_COLOR: [f32; 3] = [0.15, 0.25, 0.85];
pub const TRUCK_COLOR: [f32; 3] = [0.90, 0.80, 0.15];
/// Building heights map onto the color ramp over `[0, BUILDING_HEIGHT_SCALE]` meters.
pub const BUILDING_HEIGHT_SCALE: f64 = 80.0;
pub const DEFAULT_PATCH: usize = 8;

pub fn building_color(height: f64) -> [f32; 3] {
    let t = (height / BUILDING_HEIGHT_SCALE).clamp(0.0, 1.0) as f32;
    [0.85 - 0.45 * t, 0.35 + 0.30 * t, 0.25 + 0.60 * t]
}

pub fn vehicle_color(class: VehicleClass) -> [f32; 3] {
    match class {
        VehicleClass::Car => CAR_COLOR,
        VehicleClass::Truck => TRUCK_COLOR,
    }
}

/// Ground coordinates of the center of cell `(row, col)` of a `rows x cols`
/// grid laid over the pose footprint. Row 0 is the northern (max y) edge.
pub fn cell_center(pose: &UavPose, rows: usize, cols: usize, row: usize, col: usize) -> (f64, f64) {
    let fp = pose.footprint();
    let x = fp.x0 + (col as f64 + 0.5) * fp.width() / cols as f64;
    let y = fp.y1 - (row as f64 + 0.5) * fp.height() / rows as f64;
    (x, y)
}

/// Color of the topmost occupant at a ground point.
pub fn color_at(scene: &SceneSpec, x: f64, y: f64) -> [f32; 3] {
    let mut top = 0.0f64;
    let mut color = GROUND_COLOR;
    if scene.roads.iter().any(|r| r.contains(x, y)) {
        color = ROAD_COLOR;
    }
    for b in &scene.buildings {
        if b.height > top && b.footprint().contains(x, y) {
            top = b.height;
            color = building_color(b.height);
        }
    }
    for v in &scene.vehicles {
        if v.height > top && v.contains(x, y) {
            top = v.height;
            color = vehicle_color(v.class);
        }
    }
    color
}

/// Renders an `height x width x 3` image of the pose footprint with values in `[0, 1]`.
///
/// Both dimensions must be multiples of [`DEFAULT_PATCH`] so the image can be
/// patch-tokenized.
pub fn render_topdown(scene: &SceneSpec, pose: &UavPose, height: usize, width: usize) -> Result<Raster> {
    render_topdown_with_patch(scene, pose, height, width, DEFAULT_PATCH)
}

pub fn render_topdown_with_patch(
    scene: &SceneSpec,
    pose: &UavPose,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Raster> {
    if patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
        return Err(SynthError::InvalidInput(format!(
            "image {height}x{width} is not a positive multiple of patch size {patch}"
        )));
    }
    pose.validate(scene)?;
    let fp = pose.footprint();
    // Occupants that can touch the footprint at all.
    let mut local = scene.clone();
    local.buildings.retain(|b| b.footprint().overlaps(&fp));
    local.vehicles.retain(|v| v.bounds().overlaps(&fp));
    local.roads.retain(|r| r.overlaps(&fp));

    let mut img = Raster::zeros(height, width, 3);
    for r in 0..height {
        for c in 0..width {
            let (x, y) = cell_center(pose, height, width, r, c);
            let col = color_at(&local, x, y);
            for (ch, v) in col.iter().enumerate() {
                img.set(r, c, ch, *v);
            }
        }
    }
    Ok(img)
}

//! Line-of-sight and first-order specular reflection tracing.
//!
//! Reflections use the image method on the vertical facades of box
//! buildings: the transmitter is mirrored across the facade plane and the
//! straight segment from the image to the receiver gives the bounce point.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::render::cell_center;
use crate::scene::{Building, Rect, SceneSpec, UavPose, Vehicle};

pub type Vec3 = Vector3<f64>;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Links closer than this to vertical get azimuth 0.
pub const VERTICAL_TOLERANCE_DEG: f64 = 0.01;
const SEGMENT_EPS: f64 = 1e-9;

/// Free-space path loss in dB: `20 log10(d) + 20 log10(f) + 20 log10(4 pi / c)`.
pub fn fspl_db(distance_m: f64, frequency_hz: f64) -> f64 {
    20.0 * distance_m.log10()
        + 20.0 * frequency_hz.log10()
        + 20.0 * (4.0 * std::f64::consts::PI / SPEED_OF_LIGHT).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Los,
    Reflection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub kind: PathKind,
    /// Received power relative to a 0 dB transmitter.
    pub power_db: f64,
    pub delay_s: f64,
    pub aod_az_deg: f64,
    pub aod_el_deg: f64,
    pub aoa_az_deg: f64,
    pub aoa_el_deg: f64,
    pub bounce_point: Option<[f64; 3]>,
}

impl PathRecord {
    pub fn bounces(&self) -> u32 {
        match self.kind {
            PathKind::Los => 0,
            PathKind::Reflection => 1,
        }
    }

    pub fn length_m(&self) -> f64 {
        self.delay_s * SPEED_OF_LIGHT
    }
}

/// Frequency-independent part of a traced path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricPath {
    pub kind: PathKind,
    pub length_m: f64,
    /// Unit direction leaving the transmitter.
    pub departure: Vec3,
    /// Unit direction from the receiver back along the arriving segment.
    pub arrival: Vec3,
    pub bounce_point: Option<Vec3>,
}

impl GeometricPath {
    fn bounces(&self) -> u32 {
        match self.kind {
            PathKind::Los => 0,
            PathKind::Reflection => 1,
        }
    }

    /// Loss excluding the frequency term, used for frequency-independent ordering.
    fn ordering_loss(&self, material_loss_db: f64) -> f64 {
        20.0 * self.length_m.log10() + self.bounces() as f64 * material_loss_db
    }

    pub fn to_record(&self, frequency_hz: f64, material_loss_db: f64) -> PathRecord {
        let (aod_az_deg, aod_el_deg) = direction_angles(&self.departure);
        let (aoa_az_deg, aoa_el_deg) = direction_angles(&self.arrival);
        PathRecord {
            kind: self.kind,
            power_db: -fspl_db(self.length_m, frequency_hz) - self.bounces() as f64 * material_loss_db,
            delay_s: self.length_m / SPEED_OF_LIGHT,
            aod_az_deg,
            aod_el_deg,
            aoa_az_deg,
            aoa_el_deg,
            bounce_point: self.bounce_point.map(|p| [p.x, p.y, p.z]),
        }
    }
}

/// Azimuth in `[-180, 180)` and elevation in `[-90, 90]` (positive upward) of a direction.
pub fn direction_angles(d: &Vec3) -> (f64, f64) {
    let horiz = d.x.hypot(d.y);
    let el = d.z.atan2(horiz).to_degrees();
    let from_vertical = horiz.atan2(d.z.abs()).to_degrees();
    let az = if from_vertical < VERTICAL_TOLERANCE_DEG {
        0.0
    } else {
        let a = d.y.atan2(d.x).to_degrees();
        if a >= 180.0 {
            a - 360.0
        } else {
            a
        }
    };
    (az, el)
}

/// Receiver grid covering the pose footprint; one receiver at each cell center, z = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RxGrid {
    pub rows: usize,
    pub cols: usize,
    pub footprint: Rect,
}

impl RxGrid {
    pub fn for_pose(pose: &UavPose, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            footprint: pose.footprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, pose: &UavPose, row: usize, col: usize) -> Vec3 {
        let (x, y) = cell_center(pose, self.rows, self.cols, row, col);
        Vec3::new(x, y, 0.0)
    }

    pub fn points(&self, pose: &UavPose) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.point(pose, r, c));
            }
        }
        out
    }
}

/// Solid obstacle used for occlusion tests.
#[derive(Debug, Clone, Copy)]
enum Obstacle {
    Building(Building),
    Vehicle(Vehicle),
}

impl Obstacle {
    /// True if the open segment `a -> b` passes through the obstacle with nonzero length.
    fn blocks(&self, a: &Vec3, b: &Vec3) -> bool {
        match self {
            Obstacle::Building(bd) => {
                let fp = bd.footprint();
                segment_hits_box(a, b, [fp.x0, fp.y0, 0.0], [fp.x1, fp.y1, bd.height])
            }
            Obstacle::Vehicle(v) => {
                let (ax, ay) = v.to_local(a.x, a.y);
                let (bx, by) = v.to_local(b.x, b.y);
                segment_hits_box(
                    &Vec3::new(ax, ay, a.z),
                    &Vec3::new(bx, by, b.z),
                    [-v.length / 2.0, -v.width / 2.0, 0.0],
                    [v.length / 2.0, v.width / 2.0, v.height],
                )
            }
        }
    }
}

/// Slab test restricted to the parameter range `(eps, 1 - eps)`; grazing or
/// endpoint-only contact does not count.
fn segment_hits_box(a: &Vec3, b: &Vec3, lo: [f64; 3], hi: [f64; 3]) -> bool {
    let d = b - a;
    let mut t0 = SEGMENT_EPS;
    let mut t1 = 1.0 - SEGMENT_EPS;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if a[k] < lo[k] || a[k] > hi[k] {
                return false;
            }
        } else {
            let inv = 1.0 / d[k];
            let (mut ta, mut tb) = ((lo[k] - a[k]) * inv, (hi[k] - a[k]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t1 - t0 <= SEGMENT_EPS {
                return false;
            }
        }
    }
    t1 - t0 > SEGMENT_EPS
}

/// Vertical facade of a building: plane `axis = offset`, outward normal sign, extent.
#[derive(Debug, Clone, Copy)]
struct Facade {
    /// 0 for a plane of constant x, 1 for constant y.
    axis: usize,
    offset: f64,
    /// +1 or -1: outward normal along `axis`.
    sign: f64,
    lo: f64,
    hi: f64,
    height: f64,
}

impl Facade {
    fn of(b: &Building) -> [Facade; 4] {
        let fp = b.footprint();
        let h = b.height;
        [
            Facade { axis: 0, offset: fp.x1, sign: 1.0, lo: fp.y0, hi: fp.y1, height: h },
            Facade { axis: 0, offset: fp.x0, sign: -1.0, lo: fp.y0, hi: fp.y1, height: h },
            Facade { axis: 1, offset: fp.y1, sign: 1.0, lo: fp.x0, hi: fp.x1, height: h },
            Facade { axis: 1, offset: fp.y0, sign: -1.0, lo: fp.x0, hi: fp.x1, height: h },
        ]
    }

    fn signed_distance(&self, p: &Vec3) -> f64 {
        (p[self.axis] - self.offset) * self.sign
    }

    /// Mirror image of `p` across the facade plane.
    fn mirror(&self, p: &Vec3) -> Vec3 {
        let mut m = *p;
        m[self.axis] = 2.0 * self.offset - p[self.axis];
        m
    }

    /// Specular point for `tx -> rx`, if both are in front of the facade and the
    /// point lies within the facade extent.
    fn specular_point(&self, tx: &Vec3, rx: &Vec3) -> Option<Vec3> {
        let dt = self.signed_distance(tx);
        let dr = self.signed_distance(rx);
        if dt <= 0.0 || dr <= 0.0 {
            return None;
        }
        let image = self.mirror(tx);
        let t = dt / (dt + dr);
        let mut p = image + (rx - image) * t;
        p[self.axis] = self.offset;
        let along = p[1 - self.axis];
        if along < self.lo || along > self.hi || p.z < 0.0 || p.z > self.height {
            return None;
        }
        Some(p)
    }
}

/// Mirror of `p` across the facade plane through `point` with unit normal `normal`.
pub fn mirror_point(p: &Vec3, point: &Vec3, normal: &Vec3) -> Vec3 {
    p - normal * (2.0 * (p - point).dot(normal))
}

struct Tracer {
    tx: Vec3,
    obstacles: Vec<Obstacle>,
    facades: Vec<Facade>,
}

impl Tracer {
    fn new(scene: &SceneSpec, pose: &UavPose) -> Self {
        let fp = pose.footprint();
        let region = Rect::new(fp.x0 - 1.0, fp.y0 - 1.0, fp.x1 + 1.0, fp.y1 + 1.0);
        let mut obstacles = Vec::new();
        let mut facades = Vec::new();
        for b in scene.buildings_in(&region) {
            obstacles.push(Obstacle::Building(*b));
            // Only facades whose plane crosses the footprint can see both ends.
            for f in Facade::of(b) {
                let (lo, hi) = if f.axis == 0 { (fp.x0, fp.x1) } else { (fp.y0, fp.y1) };
                if f.offset > lo && f.offset < hi {
                    facades.push(f);
                }
            }
        }
        for v in &scene.vehicles {
            if v.bounds().overlaps(&region) {
                obstacles.push(Obstacle::Vehicle(*v));
            }
        }
        Self {
            tx: Vec3::new(pose.x, pose.y, pose.altitude),
            obstacles,
            facades,
        }
    }

    fn clear(&self, a: &Vec3, b: &Vec3) -> bool {
        !self.obstacles.iter().any(|o| o.blocks(a, b))
    }

    fn trace(&self, rx: &Vec3, material_loss_db: f64) -> Result<Vec<GeometricPath>> {
        let tx = self.tx;
        if (tx - rx).norm() < 1e-9 {
            return Err(SynthError::DegenerateLink([rx.x, rx.y, rx.z]));
        }
        let mut paths = Vec::new();
        if self.clear(&tx, rx) {
            let d = rx - tx;
            paths.push(GeometricPath {
                kind: PathKind::Los,
                length_m: d.norm(),
                departure: d.normalize(),
                arrival: (-d).normalize(),
                bounce_point: None,
            });
        }
        for f in &self.facades {
            let Some(p) = f.specular_point(&tx, rx) else { continue };
            if !(self.clear(&tx, &p) && self.clear(&p, rx)) {
                continue;
            }
            let first = p - tx;
            let last = rx - p;
            paths.push(GeometricPath {
                kind: PathKind::Reflection,
                length_m: (f.mirror(&tx) - rx).norm(),
                departure: first.normalize(),
                arrival: (-last).normalize(),
                bounce_point: Some(p),
            });
        }
        // Stable sort keeps LoS ahead of reflections and facade order on ties.
        paths.sort_by(|a, b| {
            a.ordering_loss(material_loss_db)
                .total_cmp(&b.ordering_loss(material_loss_db))
        });
        Ok(paths)
    }
}

/// Traces every receiver of `grid`, returning frequency-independent paths in
/// descending power order (not truncated).
pub fn trace_geometry(scene: &SceneSpec, pose: &UavPose, grid: &RxGrid) -> Result<Vec<Vec<GeometricPath>>> {
    let tracer = Tracer::new(scene, pose);
    grid.points(pose)
        .iter()
        .map(|rx| tracer.trace(rx, scene.material_loss_db))
        .collect()
}

/// Traces one explicit receiver position.
pub fn trace_point(scene: &SceneSpec, pose: &UavPose, rx: &Vec3) -> Result<Vec<GeometricPath>> {
    Tracer::new(scene, pose).trace(rx, scene.material_loss_db)
}

/// Per-cell path lists (row-major), sorted by descending `power_db` and truncated to `max_paths`.
pub fn trace_links(
    scene: &SceneSpec,
    pose: &UavPose,
    grid: &RxGrid,
    frequency_hz: f64,
    max_paths: usize,
) -> Result<Vec<Vec<PathRecord>>> {
    if !(frequency_hz.is_finite() && frequency_hz > 0.0) {
        return Err(SynthError::InvalidInput(format!("frequency_hz {frequency_hz} must be > 0")));
    }
    if max_paths < 1 {
        return Err(SynthError::InvalidInput("max_paths must be >= 1".into()));
    }
    let geo = trace_geometry(scene, pose, grid)?;
    Ok(records_for(&geo, frequency_hz, scene.material_loss_db, max_paths))
}

pub fn records_for(
    geo: &[Vec<GeometricPath>],
    frequency_hz: f64,
    material_loss_db: f64,
    max_paths: usize,
) -> Vec<Vec<PathRecord>> {
    geo.iter()
        .map(|cell| {
            cell.iter()
                .take(max_paths)
                .map(|g| g.to_record(frequency_hz, material_loss_db))
                .collect()
        })
        .collect()
}

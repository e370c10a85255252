//! Scene geometry and the procedural scene generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Crossroad,
    WideLane,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Crossroad => "crossroad",
            ScenarioKind::WideLane => "wide_lane",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossroad" => Ok(ScenarioKind::Crossroad),
            "wide_lane" | "wide-lane" => Ok(ScenarioKind::WideLane),
            other => Err(SynthError::InvalidInput(format!("unknown scenario {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned ground rectangle `[x0, x1] x [y0, y1]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn centered(cx: f64, cy: f64, w: f64, l: f64) -> Self {
        Self::new(cx - w / 2.0, cy - l / 2.0, cx + w / 2.0, cy + l / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Overlap with positive area.
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x0 >= self.x0 && o.x1 <= self.x1 && o.y0 >= self.y0 && o.y1 <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// Box building: footprint centered at `(cx, cy)` with extents `w` (x) and `l` (y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub height: f64,
}

impl Building {
    pub fn footprint(&self) -> Rect {
        Rect::centered(self.cx, self.cy, self.w, self.l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Car,
    Truck,
}

/// Oriented rectangle vehicle; `heading_deg` rotates the length axis from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub class: VehicleClass,
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub heading_deg: f64,
    pub height: f64,
}

impl Vehicle {
    /// Maps a world ground point into the vehicle frame (length along +x).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.heading_deg.to_radians().sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.to_local(x, y);
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }

    /// Axis-aligned bounding rectangle of the rotated footprint.
    pub fn bounds(&self) -> Rect {
        let (s, c) = self.heading_deg.to_radians().sin_cos();
        let hx = (c * self.length).abs() / 2.0 + (s * self.width).abs() / 2.0;
        let hy = (s * self.length).abs() / 2.0 + (c * self.width).abs() / 2.0;
        Rect::new(self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub scenario_kind: ScenarioKind,
    /// Scene ground extent.
    pub bounds: Rect,
    pub buildings: Vec<Building>,
    pub roads: Vec<Rect>,
    pub vehicles: Vec<Vehicle>,
    /// Reflection loss per bounce (dB).
    pub material_loss_db: f64,
}

pub const DEFAULT_MATERIAL_LOSS_DB: f64 = 6.0;

impl SceneSpec {
    /// An empty scene with the given half extent; useful for controlled geometry.
    pub fn empty(half_extent: f64) -> Self {
        Self {
            seed: 0,
            scenario_kind: ScenarioKind::Crossroad,
            bounds: Rect::new(-half_extent, -half_extent, half_extent, half_extent),
            buildings: Vec::new(),
            roads: Vec::new(),
            vehicles: Vec::new(),
            material_loss_db: DEFAULT_MATERIAL_LOSS_DB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidInput(m));
        for (i, b) in self.buildings.iter().enumerate() {
            if ![b.cx, b.cy, b.w, b.l, b.height].iter().all(|v| v.is_finite()) {
                return bad(format!("building {i} has non-finite geometry"));
            }
            if !(b.w > 0.0 && b.l > 0.0 && b.height > 0.0) {
                return bad(format!("building {i} is degenerate"));
            }
            let fp = b.footprint();
            if let Some(r) = self.roads.iter().position(|r| r.overlaps(&fp)) {
                return bad(format!("building {i} overlaps road {r}"));
            }
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if ![v.cx, v.cy, v.length, v.width, v.heading_deg, v.height]
                .iter()
                .all(|x| x.is_finite())
            {
                return bad(format!("vehicle {i} has non-finite geometry"));
            }
        }
        if !self.material_loss_db.is_finite() || self.material_loss_db < 0.0 {
            return bad("material_loss_db must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Buildings whose footprint intersects `r`.
    pub fn buildings_in(&self, r: &Rect) -> impl Iterator<Item = &Building> + '_ {
        let r = *r;
        self.buildings.iter().filter(move |b| b.footprint().overlaps(&r))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serialization is infallible")
    }
}

/// Camera/transmitter pose. The camera looks straight down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavPose {
    pub x: f64,
    pub y: f64,
    pub altitude: f64,
    pub fov_deg: f64,
}

pub const DEFAULT_FOV_DEG: f64 = 60.0;

impl UavPose {
    pub fn new(x: f64, y: f64, altitude: f64) -> Self {
        Self {
            x,
            y,
            altitude,
            fov_deg: DEFAULT_FOV_DEG,
        }
    }

    /// Side of the square ground footprint: `2 * altitude * tan(fov / 2)`.
    pub fn footprint_side(&self) -> f64 {
        2.0 * self.altitude * (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn footprint(&self) -> Rect {
        let s = self.footprint_side();
        Rect::centered(self.x, self.y, s, s)
    }

    /// Checks the pose against a scene: finite values, `0 < fov < 180`, the
    /// footprint inside the scene and the altitude above every building in it.
    pub fn validate(&self, scene: &SceneSpec) -> Result<()> {
        if ![self.x, self.y, self.altitude, self.fov_deg].iter().all(|v| v.is_finite()) {
            return Err(SynthError::InvalidPose("non-finite pose".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(SynthError::InvalidPose(format!("fov_deg {} not in (0, 180)", self.fov_deg)));
        }
        if self.altitude <= 0.0 {
            return Err(SynthError::InvalidPose("altitude must be > 0".into()));
        }
        let fp = self.footprint();
        if !scene.bounds.contains_rect(&fp) {
            return Err(SynthError::FootprintOutOfScene {
                x0: fp.x0,
                x1: fp.x1,
                y0: fp.y0,
                y1: fp.y1,
            });
        }
        if let Some(b) = scene.buildings_in(&fp).find(|b| b.height >= self.altitude) {
            return Err(SynthError::InvalidPose(format!(
                "altitude {} not above building of height {}",
                self.altitude, b.height
            )));
        }
        Ok(())
    }
}

struct Layout {
    half_extent: f64,
    pitch: f64,
    occupancy: f64,
    size: (f64, f64),
    height: (f64, f64),
    setback: f64,
}

const CROSSROAD: Layout = Layout {
    half_extent: 250.0,
    pitch: 36.0,
    occupancy: 0.75,
    size: (14.0, 30.0),
    height: (8.0, 40.0),
    setback: 4.0,
};

const WIDE_LANE: Layout = Layout {
    half_extent: 500.0,
    pitch: 22.0,
    occupancy: 0.95,
    size: (10.0, 18.0),
    height: (15.0, 70.0),
    setback: 3.0,
};

/// Builds a procedural scene. Pure function of `(seed, kind)`.
///
/// * `Crossroad`: two orthogonal roads crossing at the origin, buildings on a
///   loose grid in the four quadrants, light traffic.
/// * `WideLane`: one wide east-west arterial flanked by dense building rows,
///   heavy traffic.
pub fn build_scene(seed: u64, kind: ScenarioKind) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((kind as u64 + 1) << 56));
    let (layout, roads, lanes) = match kind {
        ScenarioKind::Crossroad => {
            let e = CROSSROAD.half_extent;
            let wr = rng.random_range(14.0..20.0);
            let roads = vec![
                Rect::new(-e, -wr / 2.0, e, wr / 2.0),
                Rect::new(-wr / 2.0, -e, wr / 2.0, e),
            ];
            (&CROSSROAD, roads, 8usize)
        }
        ScenarioKind::WideLane => {
            let e = WIDE_LANE.half_extent;
            let wr = rng.random_range(48.0..60.0);
            (&WIDE_LANE, vec![Rect::new(-e, -wr / 2.0, e, wr / 2.0)], 70usize)
        }
    };
    let e = layout.half_extent;
    let bounds = Rect::new(-e, -e, e, e);

    let mut buildings = Vec::new();
    let n = (2.0 * e / layout.pitch).floor() as i64;
    for iy in 0..n {
        for ix in 0..n {
            let cell = Rect::new(
                -e + ix as f64 * layout.pitch,
                -e + iy as f64 * layout.pitch,
                -e + (ix + 1) as f64 * layout.pitch,
                -e + (iy + 1) as f64 * layout.pitch,
            );
            // Draw every random value so the layout of one cell never depends
            // on whether an earlier cell was rejected.
            let occupied = rng.random_bool(layout.occupancy);
            let w = rng.random_range(layout.size.0..layout.size.1);
            let l = rng.random_range(layout.size.0..layout.size.1);
            let h = rng.random_range(layout.height.0..layout.height.1);
            let jx = rng.random_range(0.0..1.0);
            let jy = rng.random_range(0.0..1.0);
            if !occupied {
                continue;
            }
            let w = w.min(layout.pitch - 2.0);
            let l = l.min(layout.pitch - 2.0);
            let cx = cell.x0 + 1.0 + w / 2.0 + jx * (layout.pitch - 2.0 - w);
            let cy = cell.y0 + 1.0 + l / 2.0 + jy * (layout.pitch - 2.0 - l);
            let b = Building { cx, cy, w, l, height: h };
            let fp = b.footprint();
            let setback = Rect::new(
                fp.x0 - layout.setback,
                fp.y0 - layout.setback,
                fp.x1 + layout.setback,
                fp.y1 + layout.setback,
            );
            if !bounds.contains_rect(&fp) || roads.iter().any(|r| r.overlaps(&setback)) {
                continue;
            }
            buildings.push(b);
        }
    }

    let mut vehicles = Vec::with_capacity(lanes);
    for i in 0..lanes {
        let road = roads[i % roads.len()];
        let truck = rng.random_bool(0.2);
        let (length, width, height) = if truck { (10.0, 2.5, 3.5) } else { (4.5, 1.8, 1.5) };
        let along = rng.random_range(-e * 0.9..e * 0.9);
        let across = rng.random_range(0.15..0.85);
        let horizontal = road.width() > road.height();
        let (cx, cy, heading_deg) = if horizontal {
            (along, road.y0 + across * road.height(), 0.0)
        } else {
            (road.x0 + across * road.width(), along, 90.0)
        };
        vehicles.push(Vehicle {
            class: if truck { VehicleClass::Truck } else { VehicleClass::Car },
            cx,
            cy,
            length,
            width,
            heading_deg,
            height,
        });
    }

    SceneSpec {
        seed,
        scenario_kind: kind,
        bounds,
        buildings,
        roads,
        vehicles,
        material_loss_db: DEFAULT_MATERIAL_LOSS_DB,
    }
}

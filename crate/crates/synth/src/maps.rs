//! Rasterization of per-cell path lists into normalized multipath maps.

use std::collections::BTreeMap;

use mpgen_io::{Raster, MULTIPATH_PARAMS};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};
use crate::scene::UavPose;
use crate::trace::{PathRecord, SPEED_OF_LIGHT};

pub const POWER_MIN_DB: f64 = -160.0;
pub const POWER_MAX_DB: f64 = -60.0;

/// Per-parameter `(min, max)`; a value `x` normalizes to `(x - min) / (max - min)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl Normalization {
    /// Power is clipped to `[-160, -60]` dB; delay is scaled by the longest
    /// first-order path the footprint admits, `(diagonal + 2 * altitude) / c`;
    /// azimuths span `[-180, 180]`, elevations `[-90, 90]`.
    pub fn for_pose(pose: &UavPose) -> Self {
        let diag = pose.footprint_side() * std::f64::consts::SQRT_2;
        let max_delay = (diag + 2.0 * pose.altitude) / SPEED_OF_LIGHT;
        let ranges = [
            ("power", (POWER_MIN_DB, POWER_MAX_DB)),
            ("delay", (0.0, max_delay)),
            ("aod_az", (-180.0, 180.0)),
            ("aod_el", (-90.0, 90.0)),
            ("aoa_az", (-180.0, 180.0)),
            ("aoa_el", (-90.0, 90.0)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self { ranges }
    }

    pub fn range(&self, param: &str) -> Result<(f64, f64)> {
        self.ranges
            .get(param)
            .copied()
            .ok_or_else(|| SynthError::UnknownParam(param.to_string()))
    }

    pub fn normalize(&self, param: &str, x: f64) -> Result<f64> {
        let (lo, hi) = self.range(param)?;
        Ok(((x - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    pub fn denormalize(&self, param: &str, v: f64) -> Result<f64> {
        let (lo, hi) = self.range(param)?;
        Ok(lo + v * (hi - lo))
    }
}

pub fn param_value(rec: &PathRecord, param: &str) -> Result<f64> {
    Ok(match param {
        "power" => rec.power_db,
        "delay" => rec.delay_s,
        "aod_az" => rec.aod_az_deg,
        "aod_el" => rec.aod_el_deg,
        "aoa_az" => rec.aoa_az_deg,
        "aoa_el" => rec.aoa_el_deg,
        other => return Err(SynthError::UnknownParam(other.to_string())),
    })
}

/// Normalized `rows x cols` maps for one path index.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipathMapSet {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values in `[0, 1]`; invalid cells hold exactly 0.
    pub maps: BTreeMap<String, Vec<f64>>,
    pub valid_mask: Vec<bool>,
    /// 1 = strongest path.
    pub path_index: usize,
    pub frequency_hz: f64,
    pub normalization: Normalization,
}

impl MultipathMapSet {
    pub fn raster(&self, param: &str) -> Result<Raster> {
        let m = self
            .maps
            .get(param)
            .ok_or_else(|| SynthError::UnknownParam(param.to_string()))?;
        Ok(Raster::new(self.rows, self.cols, 1, m.iter().map(|&v| v as f32).collect())?)
    }

    pub fn mask_raster(&self) -> Raster {
        Raster {
            height: self.rows,
            width: self.cols,
            channels: 1,
            data: self.valid_mask.iter().map(|&v| v as u8 as f32).collect(),
        }
    }

    /// Physical value of `param` at cell `i`, or `None` for invalid cells.
    pub fn denormalized(&self, param: &str, i: usize) -> Result<Option<f64>> {
        if !self.valid_mask[i] {
            return Ok(None);
        }
        let v = self
            .maps
            .get(param)
            .ok_or_else(|| SynthError::UnknownParam(param.to_string()))?[i];
        self.normalization.denormalize(param, v).map(Some)
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Builds normalized maps from per-cell path lists (row-major, `rows * cols` cells).
///
/// Each cell takes its `path_index`-th strongest record; cells without one are
/// invalid and hold 0.
pub fn rasterize_maps(
    paths: &[Vec<PathRecord>],
    rows: usize,
    cols: usize,
    path_index: usize,
    params: &[&str],
    frequency_hz: f64,
    normalization: &Normalization,
) -> Result<MultipathMapSet> {
    if path_index < 1 {
        return Err(SynthError::InvalidInput("path_index must be >= 1".into()));
    }
    if paths.len() != rows * cols {
        return Err(SynthError::InvalidInput(format!(
            "{} cells given for a {rows}x{cols} grid",
            paths.len()
        )));
    }
    for p in params {
        if !MULTIPATH_PARAMS.contains(p) {
            return Err(SynthError::UnknownParam(p.to_string()));
        }
    }
    let valid_mask: Vec<bool> = paths.iter().map(|c| c.len() >= path_index).collect();
    let mut maps = BTreeMap::new();
    for &p in params {
        let mut m = vec![0.0f64; rows * cols];
        for (i, cell) in paths.iter().enumerate() {
            if let Some(rec) = cell.get(path_index - 1) {
                m[i] = normalization.normalize(p, param_value(rec, p)?)?;
            }
        }
        maps.insert(p.to_string(), m);
    }
    Ok(MultipathMapSet {
        rows,
        cols,
        maps,
        valid_mask,
        path_index,
        frequency_hz,
        normalization: normalization.clone(),
    })
}

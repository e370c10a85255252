//! `manifest.json`: the index of a generated dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{FormatError, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Multipath parameter names, in canonical order.
pub const MULTIPATH_PARAMS: [&str; 6] = ["power", "delay", "aod_az", "aod_el", "aoa_az", "aoa_el"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub snapshots: Vec<SnapshotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotEntry {
    pub id: String,
    pub scenario: String,
    pub altitude_m: f64,
    pub frequency_hz: f64,
    pub image_path: String,
    pub map_paths: BTreeMap<String, String>,
    pub mask_path: String,
    pub path_index: u32,
    /// Precomputed semantic embedding (`n_c x d_c x 1` raster), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_path: Option<String>,
}

impl DatasetManifest {
    pub fn new(seed: u64, snapshots: Vec<SnapshotEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            seed,
            snapshots,
        }
    }

    /// Parses and validates manifest JSON.
    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(FormatError::UnsupportedVersion(self.version));
        }
        let known: BTreeSet<&str> = MULTIPATH_PARAMS.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for (i, s) in self.snapshots.iter().enumerate() {
            let ctx = |msg: &str| FormatError::schema(format!("snapshots[{i}] ({}): {msg}", s.id));
            if s.id.is_empty() {
                return Err(ctx("empty id"));
            }
            if !seen.insert((s.id.as_str(), s.path_index)) {
                return Err(ctx("duplicate (id, path_index)"));
            }
            if s.scenario.is_empty() {
                return Err(ctx("empty scenario"));
            }
            if !(s.altitude_m.is_finite() && s.altitude_m > 0.0) {
                return Err(ctx("altitude_m must be finite and > 0"));
            }
            if !(s.frequency_hz.is_finite() && s.frequency_hz > 0.0) {
                return Err(ctx("frequency_hz must be finite and > 0"));
            }
            if s.path_index < 1 {
                return Err(ctx("path_index must be >= 1"));
            }
            if s.image_path.is_empty() || s.mask_path.is_empty() {
                return Err(ctx("empty image_path or mask_path"));
            }
            if s.map_paths.is_empty() {
                return Err(ctx("map_paths is empty"));
            }
            for (param, path) in &s.map_paths {
                if !known.contains(param.as_str()) {
                    return Err(ctx(&format!("unknown-param {param:?}")));
                }
                if path.is_empty() {
                    return Err(ctx(&format!("empty path for {param}")));
                }
            }
            if matches!(s.embedding_path.as_deref(), Some("")) {
                return Err(ctx("empty embedding_path"));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Snapshot groups keyed by `(scenario, altitude, frequency)`, in sorted order.
    pub fn condition_groups(&self) -> BTreeMap<(String, u64, u64), Vec<&SnapshotEntry>> {
        let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for s in &self.snapshots {
            let key = (
                s.scenario.clone(),
                s.altitude_m.to_bits(),
                s.frequency_hz.to_bits(),
            );
            groups.entry(key).or_default().push(s);
        }
        groups
    }
}

/// Resolves a manifest-relative path against the directory holding the manifest.
pub fn resolve(manifest_dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

/// Reads and validates the manifest at `path`.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(path)
}

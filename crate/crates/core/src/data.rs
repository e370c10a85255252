//! Stage-2 datasets: precomputed image codes, semantic embeddings and target maps.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use mpgen_io::manifest::resolve;
use mpgen_io::{DatasetManifest, Raster, SnapshotEntry};
use mpgen_synth::Snapshot;

use crate::error::{CoreError, Result};
use crate::fusion::SemanticProvider;
use crate::model::Stage2Input;
use crate::nn::fnv1a;
use crate::tokenizer::{stack_rasters, Tokenizer};

/// One training/evaluation example before encoding.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Condition tag `{scenario}_a{alt}_f{GHz}GHz`.
    pub tag: String,
    pub image: Raster,
    pub frequency_hz: f64,
    pub path_index: u32,
    pub maps: BTreeMap<String, Raster>,
    pub embedding: Option<Raster>,
}

pub fn condition_tag(scenario: &str, altitude_m: f64, frequency_hz: f64) -> String {
    format!("{scenario}_a{altitude_m}_f{}GHz", frequency_hz / 1e9)
}

/// One sample per (snapshot, path index) with the requested maps.
pub fn samples_from_snapshots(snaps: &[Snapshot]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in snaps {
        for set in &s.map_sets {
            let mut maps = BTreeMap::new();
            for p in set.maps.keys() {
                maps.insert(p.clone(), set.raster(p)?);
            }
            out.push(Sample {
                id: s.id.clone(),
                tag: condition_tag(&s.tags.scenario, s.tags.altitude_m, s.frequency_hz),
                image: s.image.clone(),
                frequency_hz: s.frequency_hz,
                path_index: set.path_index as u32,
                maps,
                embedding: None,
            });
        }
    }
    Ok(out)
}

pub fn sample_from_entry(dir: &Path, e: &SnapshotEntry) -> Result<Sample> {
    let mut maps = BTreeMap::new();
    for (p, rel) in &e.map_paths {
        maps.insert(p.clone(), Raster::read(&resolve(dir, rel))?);
    }
    let embedding = match &e.embedding_path {
        Some(rel) => Some(Raster::read(&resolve(dir, rel))?),
        None => None,
    };
    Ok(Sample {
        id: e.id.clone(),
        tag: condition_tag(&e.scenario, e.altitude_m, e.frequency_hz),
        image: Raster::read(&resolve(dir, &e.image_path))?,
        frequency_hz: e.frequency_hz,
        path_index: e.path_index,
        maps,
        embedding,
    })
}

/// All samples of a manifest, with paths resolved against `dir`.
pub fn samples_from_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest.snapshots.iter().map(|e| sample_from_entry(dir, e)).collect()
}

/// Encoded, tensor-backed stage-2 examples.
#[derive(Debug, Clone)]
pub struct Stage2Data {
    pub ids: Vec<String>,
    pub tags: Vec<String>,
    /// `(N, T, n_z)` image codes.
    pub codes: Tensor,
    /// `(N, n_c, d_c)` semantic embeddings.
    pub semantic: Tensor,
    pub frequencies_hz: Vec<f64>,
    pub path_index: Vec<u32>,
    /// `(N, H, W, 1)` target maps per task.
    pub targets: BTreeMap<String, Tensor>,
    /// Feed path indices to the model.
    pub use_path_index: bool,
}

const ENCODE_CHUNK: usize = 32;

impl Stage2Data {
    /// Encodes images with the frozen image tokenizer and embeds them with
    /// `provider` unless an embedding is attached.
    pub fn build(samples: &[Sample], tasks: &[String], image_tok: &Tokenizer, provider: &dyn SemanticProvider) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::EmptyDataset("no samples".into()));
        }
        let dev = Device::Cpu;
        let mut codes = Vec::new();
        let mut semantic = Vec::new();
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let imgs: Vec<&Raster> = chunk.iter().map(|s| &s.image).collect();
            let x = stack_rasters(&imgs, DType::F32, &dev)?;
            let grid = image_tok.encode(&x)?;
            codes.push(image_tok.quantize(&grid)?.codes.detach());
            if chunk.iter().all(|s| s.embedding.is_some()) {
                let e = chunk
                    .iter()
                    .map(|s| crate::fusion::embedding_from_raster(s.embedding.as_ref().expect("checked"), DType::F32, &dev))
                    .collect::<Result<Vec<_>>>()?;
                semantic.push(Tensor::stack(&e, 0)?);
            } else {
                semantic.push(provider.embed(&x)?);
            }
        }
        let mut targets = BTreeMap::new();
        for task in tasks {
            let mut rasters = Vec::with_capacity(samples.len());
            for s in samples {
                let r = s.maps.get(task).ok_or_else(|| CoreError::IncompleteSnapshot { id: s.id.clone(), task: task.clone() })?;
                rasters.push(r);
            }
            targets.insert(task.clone(), stack_rasters(&rasters, DType::F32, &dev)?);
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            tags: samples.iter().map(|s| s.tag.clone()).collect(),
            codes: Tensor::cat(&codes, 0)?,
            semantic: Tensor::cat(&semantic, 0)?,
            frequencies_hz: samples.iter().map(|s| s.frequency_hz).collect(),
            path_index: samples.iter().map(|s| s.path_index).collect(),
            targets,
            use_path_index: false,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn tasks(&self) -> Vec<String> {
        self.targets.keys().cloned().collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(CoreError::EmptyDataset("empty subset".into()));
        }
        let t = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), self.codes.device())?;
        let pick = |v: &Tensor| v.index_select(&t, 0);
        let mut targets = BTreeMap::new();
        for (k, v) in &self.targets {
            targets.insert(k.clone(), pick(v)?);
        }
        Ok(Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            tags: idx.iter().map(|&i| self.tags[i].clone()).collect(),
            codes: pick(&self.codes)?,
            semantic: pick(&self.semantic)?,
            frequencies_hz: idx.iter().map(|&i| self.frequencies_hz[i]).collect(),
            path_index: idx.iter().map(|&i| self.path_index[i]).collect(),
            targets,
            use_path_index: self.use_path_index,
        })
    }

    /// Keeps the samples whose predicate holds.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.subset(&idx)
    }

    pub fn input(&self) -> Stage2Input<'_> {
        Stage2Input {
            codes: &self.codes,
            semantic: &self.semantic,
            frequencies_hz: &self.frequencies_hz,
            path_index: self.use_path_index.then_some(self.path_index.as_slice()),
        }
    }

    /// Deterministic split by snapshot-id hash: `(train, validation)` indices.
    /// Falls back to validating on the training set when either side would be empty.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (0..self.len()).collect();
        let (val, train): (Vec<usize>, Vec<usize>) =
            all.iter().partition(|&&i| ((fnv1a(&self.ids[i]) % 10_000) as f64) < val_fraction * 10_000.0);
        if val.is_empty() || train.is_empty() {
            (all.clone(), all)
        } else {
            (train, val)
        }
    }
}

//! The stage-2 generator: fusion, mapper, per-task projections and map decoders.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor, Var};
use mpgen_io::checkpoint::in_scope;
use mpgen_io::{Checkpoint, TensorRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::mapper::{MapperConfig, MapperStack};
use crate::moe::LayerGates;
use crate::nn::{Linear, ParamStore};
use crate::tokenizer::{quantize, Codebook, Tokenizer, TokenizerConfig, CODEBOOK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub fusion: FusionConfig,
    pub mapper: MapperConfig,
    /// Image token grid `(h, w)` and its code width.
    pub image_grid: (usize, usize),
    pub image_n_z: usize,
    /// Semantic embedding width.
    pub d_c: usize,
    /// Map token grid `(h, w)`.
    pub map_grid: (usize, usize),
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            mapper: MapperConfig::default(),
            image_grid: (8, 8),
            image_n_z: 32,
            d_c: 64,
            map_grid: (4, 4),
        }
    }
}

impl Stage2Config {
    /// Image tokens merged into one map token along each axis.
    pub fn merge_factor(&self) -> Result<(usize, usize)> {
        let ((ih, iw), (mh, mw)) = (self.image_grid, self.map_grid);
        if mh == 0 || mw == 0 || ih % mh != 0 || iw % mw != 0 {
            return Err(CoreError::Config(format!("image grid {ih}x{iw} does not merge onto map grid {mh}x{mw}")));
        }
        Ok((ih / mh, iw / mw))
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion.d != self.mapper.d {
            return Err(CoreError::Config(format!("fusion width {} != mapper width {}", self.fusion.d, self.mapper.d)));
        }
        self.merge_factor()?;
        self.mapper.validate()
    }
}

/// Which parameters a fine-tuning run may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Fusion, mapper and every projection.
    Full,
    /// Task-wise blocks plus the projections and decoders of newly added tasks.
    TaskWiseOnly,
    /// Only parameters created by `add_task`.
    NewTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetunePolicy {
    pub mode: FinetuneMode,
    pub sample_budget: usize,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(B, H, W, 1)` per task.
    pub maps: BTreeMap<String, Tensor>,
    pub gates: Vec<LayerGates>,
}

/// Inputs of one stage-2 forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Input<'a> {
    pub codes: &'a Tensor,
    pub semantic: &'a Tensor,
    pub frequencies_hz: &'a [f64],
    pub path_index: Option<&'a [u32]>,
}

/// Concatenates each `fh x fw` block of a row-major `(B, mh*fh * mw*fw, d)`
/// grid into one token of width `fh*fw*d`, row-major within the block.
pub fn merge_tokens(tokens: &Tensor, map_grid: (usize, usize), factor: (usize, usize)) -> Result<Tensor> {
    let (b, _, d) = tokens.dims3()?;
    let ((mh, mw), (fh, fw)) = (map_grid, factor);
    Ok(tokens
        .reshape((b, mh, fh, mw, fw, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, mh * mw, fh * fw * d))?)
}

pub const DECODER_PREFIX: &str = "decoder";

#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub cfg: Stage2Config,
    pub ps: ParamStore,
    pub fusion: Fusion,
    pub mapper: MapperStack,
    pub proj: BTreeMap<String, Linear>,
    pub decoders: BTreeMap<String, Tokenizer>,
    pub new_tasks: BTreeSet<String>,
    new_params: BTreeSet<String>,
    pub freeze_decoders: bool,
}

impl Stage2Model {
    pub fn new(cfg: Stage2Config, decoders: BTreeMap<String, Tokenizer>, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let fusion = Fusion::new(&mut ps, cfg.fusion.clone(), cfg.image_n_z, cfg.d_c)?;
        let mapper = MapperStack::new(&mut ps, cfg.mapper.clone())?;
        let mut model = Self {
            cfg,
            ps,
            fusion,
            mapper,
            proj: BTreeMap::new(),
            decoders: BTreeMap::new(),
            new_tasks: BTreeSet::new(),
            new_params: BTreeSet::new(),
            freeze_decoders: true,
        };
        let mut decoders = decoders;
        for task in model.cfg.mapper.tasks.clone() {
            let dec = decoders.remove(&task).ok_or_else(|| CoreError::MissingDecoder(task.clone()))?;
            model.register_head(&task, dec)?;
        }
        Ok(model)
    }

    fn register_head(&mut self, task: &str, dec: Tokenizer) -> Result<()> {
        let (fh, fw) = self.cfg.merge_factor()?;
        let d_in = fh * fw * self.cfg.mapper.d;
        let lin = Linear::new(&mut self.ps, &format!("proj.{task}"), d_in, dec.cfg.n_z, true)?;
        self.proj.insert(task.to_string(), lin);
        self.decoders.insert(task.to_string(), dec);
        Ok(())
    }

    pub fn tasks(&self) -> &[String] {
        &self.mapper.cfg.tasks
    }

    /// Adds a gate in every task-wise block, a projection and a decoder.
    /// Existing outputs are unchanged.
    pub fn add_task(&mut self, task: &str, decoder: Tokenizer) -> Result<()> {
        if self.mapper.has_task(task) {
            return Err(CoreError::DuplicateTask(task.to_string()));
        }
        let before: BTreeSet<String> = self.ps.names().cloned().collect();
        self.mapper.add_task(&mut self.ps, task)?;
        self.register_head(task, decoder)?;
        self.cfg.mapper.tasks.push(task.to_string());
        self.new_params.extend(self.ps.names().filter(|n| !before.contains(*n)).cloned());
        self.new_tasks.insert(task.to_string());
        Ok(())
    }

    /// Merges `(B, ih*iw, d)` tokens onto the map grid and projects to `n_z`.
    pub fn project(&self, task: &str, tokens: &Tensor) -> Result<Tensor> {
        let lin = self.proj.get(task).ok_or_else(|| CoreError::UnknownTask(task.to_string()))?;
        lin.forward(&merge_tokens(tokens, self.cfg.map_grid, self.cfg.merge_factor()?)?)
    }

    /// Decodes projected tokens with the task's decoder; `snap` replaces each
    /// token by its nearest codebook entry first.
    pub fn decode_task(&self, task: &str, projected: &Tensor, snap: bool) -> Result<Tensor> {
        let dec = self.decoders.get(task).ok_or_else(|| CoreError::MissingDecoder(task.to_string()))?;
        let codes = if snap { quantize(projected, dec.codebook_tensor())?.codes } else { projected.clone() };
        let (mh, mw) = self.cfg.map_grid;
        dec.decode(&codes, mh, mw)
    }

    pub fn forward(&self, input: Stage2Input<'_>, tasks: &[String], snap: bool) -> Result<Prediction> {
        let fused = self.fusion.fuse(&input.codes.to_dtype(self.ps.dtype())?, &input.semantic.to_dtype(self.ps.dtype())?)?;
        let out = self.mapper.forward(&fused, self.cfg.image_grid, input.frequencies_hz, tasks, input.path_index)?;
        let mut maps = BTreeMap::new();
        for (task, grid) in &out.grids {
            maps.insert(task.clone(), self.decode_task(task, &self.project(task, grid)?, snap)?);
        }
        Ok(Prediction { maps, gates: out.gates })
    }

    fn mapper_trainable(&self, mode: FinetuneMode, name: &str) -> bool {
        match mode {
            FinetuneMode::Full => true,
            FinetuneMode::TaskWiseOnly => {
                in_scope(name, "mapper.task") || self.new_params.contains(name)
            }
            FinetuneMode::NewTask => self.new_params.contains(name),
        }
    }

    fn decoder_trainable(&self, task: &str) -> bool {
        !self.freeze_decoders || self.new_tasks.contains(task)
    }

    /// Named trainable variables under `mode`, decoders keyed `decoder.<task>.<name>`.
    pub fn trainable_names(&self, mode: FinetuneMode) -> Vec<String> {
        let mut out: Vec<String> = self.ps.names().filter(|n| self.mapper_trainable(mode, n)).cloned().collect();
        for (task, dec) in &self.decoders {
            if self.decoder_trainable(task) {
                out.extend(dec.ps.names().map(|n| format!("{DECODER_PREFIX}.{task}.{n}")));
            }
        }
        out
    }

    pub fn trainable_vars(&self, mode: FinetuneMode) -> Vec<Var> {
        let mut out = self.ps.vars_where(|n| self.mapper_trainable(mode, n));
        for (task, dec) in &self.decoders {
            if self.decoder_trainable(task) {
                out.extend(dec.ps.all_vars());
            }
        }
        out
    }

    /// `(trainable, total)` scalar parameter counts.
    pub fn parameter_counts(&self, mode: FinetuneMode) -> (usize, usize) {
        let mut trainable = self.ps.count_where(|n| self.mapper_trainable(mode, n));
        let mut total = self.ps.count_where(|_| true);
        for (task, dec) in &self.decoders {
            let n = dec.ps.count_where(|_| true);
            total += n;
            if self.decoder_trainable(task) {
                trainable += n;
            }
        }
        (trainable, total)
    }

    /// Every parameter as f32 records, decoders keyed `decoder.<task>.<name>`.
    pub fn records(&self) -> Result<BTreeMap<String, TensorRecord>> {
        let mut out = self.ps.to_records(|_| true)?;
        for (task, dec) in &self.decoders {
            for (n, r) in dec.ps.to_records(|_| true)? {
                out.insert(format!("{DECODER_PREFIX}.{task}.{n}"), r);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let dec_cfgs: BTreeMap<&String, &TokenizerConfig> = self.decoders.iter().map(|(t, d)| (t, &d.cfg)).collect();
        let mut ck = Checkpoint::new(serde_json::json!({
            "stage2": self.cfg,
            "decoders": dec_cfgs,
            "new_tasks": self.new_tasks,
            "new_params": self.new_params,
            "freeze_decoders": self.freeze_decoders,
            "seed": self.ps.seed(),
        }));
        self.ps.write_into(&mut ck)?;
        for (task, dec) in &self.decoders {
            dec.ps.write_prefixed(&mut ck, &format!("{DECODER_PREFIX}.{task}."))?;
            ck.codebooks.insert(format!("{DECODER_PREFIX}.{task}.{CODEBOOK}"), dec.codebook()?.to_blob());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| ck.config.get(k).cloned().ok_or_else(|| CoreError::Config(format!("checkpoint config lacks {k}")));
        let mut cfg: Stage2Config = serde_json::from_value(field("stage2")?)?;
        let dec_cfgs: BTreeMap<String, TokenizerConfig> = serde_json::from_value(field("decoders")?)?;
        let new_tasks: BTreeSet<String> = serde_json::from_value(field("new_tasks")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        // Tasks added after construction are re-added in order so parameter names line up.
        let all_tasks = cfg.mapper.tasks.clone();
        cfg.mapper.tasks.retain(|t| !new_tasks.contains(t));
        let mut decoders = BTreeMap::new();
        for (task, tc) in &dec_cfgs {
            decoders.insert(task.clone(), Tokenizer::new(tc.clone(), 0, DType::F32)?);
        }
        let mut later = Vec::new();
        for t in &all_tasks {
            if new_tasks.contains(t) {
                later.push((t.clone(), decoders.remove(t).ok_or_else(|| CoreError::MissingDecoder(t.clone()))?));
            }
        }
        let mut model = Self::new(cfg, decoders, seed, DType::F32)?;
        for (t, dec) in later {
            model.add_task(&t, dec)?;
        }
        model.freeze_decoders = serde_json::from_value(field("freeze_decoders")?)?;
        model.ps.load_from(ck, "")?;
        for (task, dec) in &model.decoders {
            let prefix = format!("{DECODER_PREFIX}.{task}.");
            dec.ps.load_from(ck, &prefix)?;
            if let Some(blob) = ck.codebooks.get(&format!("{prefix}{CODEBOOK}")) {
                dec.set_codebook(&Codebook::from_blob(blob)?)?;
            }
        }
        Ok(model)
    }
}

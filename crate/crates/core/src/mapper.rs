//! Token-wise then task-wise MoE transformer over fused image tokens.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::moe::{LayerGates, MoeLayerConfig, MoeStyle, TaskMoe, TokenMoe};
use crate::nn::{sincos_2d, Attention, LayerNorm, Linear, ParamStore};

/// `log10(f / 1 GHz) / log10(30)`.
pub fn normalized_log_frequency(frequency_hz: f64) -> Result<f64> {
    if !(frequency_hz.is_finite() && frequency_hz > 0.0) {
        return Err(CoreError::BadFrequency(frequency_hz));
    }
    Ok((frequency_hz / 1e9).log10() / 30f64.log10())
}

/// Two linear layers with a GELU between them, `u -> E_f`.
#[derive(Debug, Clone)]
pub struct FrequencyEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FrequencyEmbedding {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), 1, d, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), d, d, true)?,
        })
    }

    /// `(B, d)` embeddings for `B` frequencies.
    pub fn forward(&self, frequencies_hz: &[f64], dtype: DType) -> Result<Tensor> {
        let u = frequencies_hz.iter().map(|&f| normalized_log_frequency(f)).collect::<Result<Vec<_>>>()?;
        let dev = self.fc1.weight.device();
        let u = Tensor::from_vec(u, (frequencies_hz.len(), 1), dev)?.to_dtype(dtype)?;
        self.fc2.forward(&self.fc1.forward(&u)?.gelu()?)
    }
}

#[derive(Debug, Clone)]
pub enum MoeFfn {
    Token(TokenMoe),
    Task(TaskMoe),
}

/// Pre-normalized attention followed by a MoE feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: MoeFfn,
}

impl MoeBlock {
    fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, cfg: &MoeLayerConfig, tasks: &[String]) -> Result<Self> {
        let moe_name = format!("{name}.moe");
        let ffn = match cfg.style {
            MoeStyle::TokenWise => MoeFfn::Token(TokenMoe::new(ps, &moe_name, d, cfg.clone())?),
            MoeStyle::TaskWise => MoeFfn::Task(TaskMoe::new(ps, &moe_name, d, cfg.clone(), tasks)?),
        };
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            attn: Attention::new(ps, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            ffn,
        })
    }

    fn forward(&self, x: &Tensor, e_f: Option<&Tensor>, task: Option<&str>) -> Result<(Tensor, Option<LayerGates>)> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.ln2.forward(&x)?;
        let (y, g) = match (&self.ffn, task) {
            (MoeFfn::Token(m), _) => m.forward(&h, e_f)?,
            (MoeFfn::Task(m), Some(t)) => m.forward(&h, t)?,
            (MoeFfn::Task(_), None) => return Err(CoreError::Config("task-wise block needs a task".into())),
        };
        Ok(((&x + y)?, g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    pub d: usize,
    pub heads: usize,
    pub n_token_blocks: usize,
    pub n_task_blocks: usize,
    pub token_moe: MoeLayerConfig,
    pub task_moe: MoeLayerConfig,
    pub tasks: Vec<String>,
    /// Number of path indices (1-based) with a learned embedding; 0 disables it.
    pub path_table: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            n_token_blocks: 2,
            n_task_blocks: 1,
            token_moe: MoeLayerConfig::token_wise(),
            task_moe: MoeLayerConfig::task_wise(),
            tasks: ["power", "delay", "aod_az", "aod_el"].iter().map(|s| s.to_string()).collect(),
            path_table: 0,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_token_blocks == 0 || self.n_task_blocks == 0 {
            return Err(CoreError::Config("mapper needs at least one token-wise and one task-wise block".into()));
        }
        if self.token_moe.style != MoeStyle::TokenWise || self.task_moe.style != MoeStyle::TaskWise {
            return Err(CoreError::Config("token_moe/task_moe styles are swapped".into()));
        }
        if self.tasks.is_empty() {
            return Err(CoreError::Config("mapper needs at least one task".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t) {
                return Err(CoreError::DuplicateTask(t.clone()));
            }
        }
        self.token_moe.validate()?;
        self.task_moe.validate()
    }
}

#[derive(Debug, Clone)]
pub struct MapperOutput {
    pub grids: BTreeMap<String, Tensor>,
    pub gates: Vec<LayerGates>,
}

#[derive(Debug, Clone)]
pub struct MapperStack {
    pub cfg: MapperConfig,
    pub dtype: DType,
    pub freq: FrequencyEmbedding,
    pub path: Option<(Tensor, Linear)>,
    pub token_blocks: Vec<MoeBlock>,
    pub task_blocks: Vec<MoeBlock>,
}

impl MapperStack {
    pub fn new(ps: &mut ParamStore, cfg: MapperConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let freq = FrequencyEmbedding::new(ps, "mapper.freq", d)?;
        let path = if cfg.path_table > 0 {
            let table = ps.uniform("mapper.path.table", &[cfg.path_table, d], 1.0)?;
            Some((table, Linear::new(ps, "mapper.path.proj", d, d, true)?))
        } else {
            None
        };
        let token_blocks = (0..cfg.n_token_blocks)
            .map(|i| MoeBlock::new(ps, &format!("mapper.token.block{i}"), d, cfg.heads, &cfg.token_moe, &[]))
            .collect::<Result<Vec<_>>>()?;
        let task_blocks = (0..cfg.n_task_blocks)
            .map(|i| MoeBlock::new(ps, &format!("mapper.task.block{i}"), d, cfg.heads, &cfg.task_moe, &cfg.tasks))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dtype: ps.dtype(), cfg, freq, path, token_blocks, task_blocks })
    }

    pub fn has_task(&self, task: &str) -> bool {
        self.cfg.tasks.iter().any(|t| t == task)
    }

    /// Registers a gate for `task` in every task-wise block.
    pub fn add_task(&mut self, ps: &mut ParamStore, task: &str) -> Result<()> {
        if self.has_task(task) {
            return Err(CoreError::DuplicateTask(task.to_string()));
        }
        for b in &mut self.task_blocks {
            if let MoeFfn::Task(m) = &mut b.ffn {
                m.add_gate(ps, task)?;
            }
        }
        self.cfg.tasks.push(task.to_string());
        Ok(())
    }

    /// Runs the token-wise blocks once, then the task-wise blocks per task.
    /// `z` is `(B, h*w, d)` on an `h x w` grid.
    pub fn forward(
        &self,
        z: &Tensor,
        grid: (usize, usize),
        frequencies_hz: &[f64],
        tasks: &[String],
        path_index: Option<&[u32]>,
    ) -> Result<MapperOutput> {
        let (b, t, d) = z.dims3()?;
        if t != grid.0 * grid.1 || d != self.cfg.d || frequencies_hz.len() != b {
            return Err(CoreError::Shape(format!(
                "mapper input ({b}, {t}, {d}) with grid {grid:?} and {} frequencies",
                frequencies_hz.len()
            )));
        }
        for task in tasks {
            if !self.has_task(task) {
                return Err(CoreError::UnknownTask(task.clone()));
            }
        }
        let pos = sincos_2d(grid.0, grid.1, d, self.dtype, z.device())?;
        let mut x = z.broadcast_add(&pos)?;
        if let Some(idx) = path_index {
            let (table, proj) = self
                .path
                .as_ref()
                .ok_or_else(|| CoreError::Config("path_index given but no path embedding table is configured".into()))?;
            if idx.len() != b || idx.iter().any(|&k| k == 0 || k as usize > self.cfg.path_table) {
                return Err(CoreError::Config(format!("path indices {idx:?} outside 1..={}", self.cfg.path_table)));
            }
            let rows = Tensor::from_vec(idx.iter().map(|&k| k - 1).collect::<Vec<u32>>(), b, z.device())?;
            let e = proj.forward(&table.index_select(&rows, 0)?)?;
            x = x.broadcast_add(&e.unsqueeze(1)?)?;
        }
        let e_f = if self.cfg.token_moe.freq_conditioned {
            Some(self.freq.forward(frequencies_hz, self.dtype)?)
        } else {
            None
        };
        let mut gates = Vec::new();
        for blk in &self.token_blocks {
            let (y, g) = blk.forward(&x, e_f.as_ref(), None)?;
            x = y;
            gates.extend(g);
        }
        let mut grids = BTreeMap::new();
        for task in tasks {
            let mut y = x.clone();
            for blk in &self.task_blocks {
                let (o, g) = blk.forward(&y, None, Some(task))?;
                y = o;
                gates.extend(g);
            }
            grids.insert(task.clone(), y);
        }
        Ok(MapperOutput { grids, gates })
    }
}

/// Gate log rows `(block, token_or_task, expert_index, gate_value, frequency_hz)`
/// for the retained experts. Gate rows map to samples in equal consecutive runs.
pub fn gate_log_csv(gates: &[LayerGates], frequencies_hz: &[f64]) -> String {
    let mut s = String::from("block,token_or_task,expert_index,gate_value,frequency_hz\n");
    for g in gates {
        let per_sample = (g.rows / frequencies_hz.len().max(1)).max(1);
        for r in 0..g.rows {
            let f = frequencies_hz.get(r / per_sample).copied().unwrap_or(f64::NAN);
            let label = match &g.task {
                Some(t) => format!("{t}:{r}"),
                None => r.to_string(),
            };
            for &e in &g.selected[r] {
                let _ = writeln!(s, "{},{label},{e},{},{f}", g.block, g.gates[r * g.n_routed + e]);
            }
        }
    }
    s
}

pub fn write_gate_log(path: &Path, gates: &[LayerGates], frequencies_hz: &[f64]) -> Result<()> {
    std::fs::write(path, gate_log_csv(gates, frequencies_hz)).map_err(|e| CoreError::io(path, e))
}

//! Shared/routed mixture-of-experts feed-forward layers.

use std::collections::BTreeMap;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{to_f64_vec, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeStyle {
    TokenWise,
    TaskWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeLayerConfig {
    pub n_shared: usize,
    pub n_routed: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub style: MoeStyle,
    pub freq_conditioned: bool,
}

impl MoeLayerConfig {
    pub fn token_wise() -> Self {
        Self { n_shared: 2, n_routed: 5, top_k: 2, expert_hidden: 128, style: MoeStyle::TokenWise, freq_conditioned: true }
    }

    pub fn task_wise() -> Self {
        Self { style: MoeStyle::TaskWise, freq_conditioned: false, ..Self::token_wise() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shared + self.n_routed == 0 {
            return Err(CoreError::Config("MoE layer needs at least one expert".into()));
        }
        if self.n_routed > 0 && !(1..=self.n_routed).contains(&self.top_k) {
            return Err(CoreError::Config(format!("top_k {} outside 1..={}", self.top_k, self.n_routed)));
        }
        if self.expert_hidden == 0 {
            return Err(CoreError::Config("expert_hidden must be > 0".into()));
        }
        Ok(())
    }
}

/// Indices of the `k` largest values, largest first; equal values keep the lower index first.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Gate vectors of one layer for one forward pass. `rows` are tokens
/// (token-wise) or samples (task-wise).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGates {
    pub block: String,
    pub task: Option<String>,
    pub rows: usize,
    pub n_routed: usize,
    /// Pre-mask softmax gates, `rows x n_routed`.
    pub gates: Vec<f64>,
    /// Retained expert indices per row.
    pub selected: Vec<Vec<usize>>,
}

impl LayerGates {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.gates[r * self.n_routed..(r + 1) * self.n_routed]
    }

    /// Post-mask gates of a row: zero outside the selection.
    pub fn masked_row(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_routed];
        for &e in &self.selected[r] {
            out[e] = self.gates[r * self.n_routed + e];
        }
        out
    }
}

/// Softmax gates, Top-K selection and the sparse routed mixture.
struct Routing {
    gates: Tensor,
    host: Vec<f64>,
    selected: Vec<Vec<usize>>,
}

fn route(logits: &Tensor, top_k: usize) -> Result<Routing> {
    let gates = candle_nn::ops::softmax(logits, D::Minus1)?;
    let (rows, r) = gates.dims2()?;
    let host = to_f64_vec(&gates)?;
    let selected = (0..rows).map(|i| top_k_indices(&host[i * r..(i + 1) * r], top_k)).collect();
    Ok(Routing { gates, host, selected })
}

/// Adds `sum_{e in selected[row]} gate[row, e] * expert_e(x[row])` to `out`, where rows index dim 0 of `x`.
fn dispatch(x: &Tensor, out: Tensor, experts: &[Mlp], routing: &Routing) -> Result<Tensor> {
    let n_routed = experts.len();
    let flat_gates = routing.gates.flatten_all()?;
    let mut out = out;
    for (e, expert) in experts.iter().enumerate() {
        let rows: Vec<u32> = routing
            .selected
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(&e))
            .map(|(i, _)| i as u32)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let gate_pos: Vec<u32> = rows.iter().map(|&i| i * n_routed as u32 + e as u32).collect();
        let idx = Tensor::from_vec(rows.clone(), rows.len(), x.device())?;
        let gpos = Tensor::from_vec(gate_pos, rows.len(), x.device())?;
        let w = flat_gates.index_select(&gpos, 0)?;
        let xs = x.index_select(&idx, 0)?;
        let y = expert.forward(&xs)?;
        let mut wshape = vec![rows.len()];
        wshape.resize(y.rank(), 1);
        let y = y.broadcast_mul(&w.reshape(wshape)?)?;
        out = out.index_add(&idx, &y, 0)?;
    }
    Ok(out)
}

fn shared_sum(x: &Tensor, experts: &[Mlp]) -> Result<Tensor> {
    let mut out = x.zeros_like()?;
    for e in experts {
        out = (out + e.forward(x)?)?;
    }
    Ok(out)
}

/// Per-token routing: `softmax(g_f(g_t(x) + E_f))`, or `softmax(g_f(g_t(x)))`
/// without frequency conditioning.
#[derive(Debug, Clone)]
pub struct TokenMoe {
    pub name: String,
    pub cfg: MoeLayerConfig,
    pub shared: Vec<Mlp>,
    pub routed: Vec<Mlp>,
    pub g_t: Linear,
    pub g_f: Linear,
}

impl TokenMoe {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, cfg: MoeLayerConfig) -> Result<Self> {
        cfg.validate()?;
        let shared = (0..cfg.n_shared)
            .map(|i| Mlp::new(ps, &format!("{name}.shared{i}"), d, cfg.expert_hidden))
            .collect::<Result<Vec<_>>>()?;
        let routed = (0..cfg.n_routed)
            .map(|i| Mlp::new(ps, &format!("{name}.routed{i}"), d, cfg.expert_hidden))
            .collect::<Result<Vec<_>>>()?;
        let g_t = Linear::new(ps, &format!("{name}.g_t"), d, d, true)?;
        let g_f = Linear::new(ps, &format!("{name}.g_f"), d, cfg.n_routed.max(1), true)?;
        Ok(Self { name: name.to_string(), cfg, shared, routed, g_t, g_f })
    }

    /// Routing logits of `(N, d)` tokens; `e_f` is `(N, d)` when conditioned.
    pub fn logits(&self, x: &Tensor, e_f: Option<&Tensor>) -> Result<Tensor> {
        let h = self.g_t.forward(x)?;
        let h = match (self.cfg.freq_conditioned, e_f) {
            (true, Some(e)) => (h + e)?,
            (true, None) => return Err(CoreError::Config(format!("{} is frequency-conditioned but got no embedding", self.name))),
            (false, _) => h,
        };
        self.g_f.forward(&h)
    }

    /// `x (B, T, d)`, `e_f (B, d)`.
    pub fn forward(&self, x: &Tensor, e_f: Option<&Tensor>) -> Result<(Tensor, Option<LayerGates>)> {
        let (b, t, d) = x.dims3()?;
        let flat = x.reshape((b * t, d))?;
        let out = shared_sum(&flat, &self.shared)?;
        if self.routed.is_empty() {
            return Ok((out.reshape((b, t, d))?, None));
        }
        let e_tok = match e_f {
            Some(e) => Some(e.unsqueeze(1)?.broadcast_as((b, t, d))?.reshape((b * t, d))?),
            None => None,
        };
        let routing = route(&self.logits(&flat, e_tok.as_ref())?, self.cfg.top_k)?;
        let out = dispatch(&flat, out, &self.routed, &routing)?;
        let gates = LayerGates {
            block: self.name.clone(),
            task: None,
            rows: b * t,
            n_routed: self.cfg.n_routed,
            gates: routing.host,
            selected: routing.selected,
        };
        Ok((out.reshape((b, t, d))?, Some(gates)))
    }
}

/// Per-(sample, task) routing from the mean-pooled tokens through a task's own gate.
#[derive(Debug, Clone)]
pub struct TaskMoe {
    pub name: String,
    pub cfg: MoeLayerConfig,
    pub d: usize,
    pub shared: Vec<Mlp>,
    pub routed: Vec<Mlp>,
    pub gates: BTreeMap<String, Linear>,
}

impl TaskMoe {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, cfg: MoeLayerConfig, tasks: &[String]) -> Result<Self> {
        cfg.validate()?;
        let shared = (0..cfg.n_shared)
            .map(|i| Mlp::new(ps, &format!("{name}.shared{i}"), d, cfg.expert_hidden))
            .collect::<Result<Vec<_>>>()?;
        let routed = (0..cfg.n_routed)
            .map(|i| Mlp::new(ps, &format!("{name}.routed{i}"), d, cfg.expert_hidden))
            .collect::<Result<Vec<_>>>()?;
        let mut layer = Self { name: name.to_string(), cfg, d, shared, routed, gates: BTreeMap::new() };
        for t in tasks {
            layer.add_gate(ps, t)?;
        }
        Ok(layer)
    }

    pub fn gate_name(&self, task: &str) -> String {
        format!("{}.gate_{task}", self.name)
    }

    pub fn add_gate(&mut self, ps: &mut ParamStore, task: &str) -> Result<()> {
        if self.gates.contains_key(task) {
            return Err(CoreError::DuplicateTask(task.to_string()));
        }
        let g = Linear::new(ps, &self.gate_name(task), self.d, self.cfg.n_routed.max(1), true)?;
        self.gates.insert(task.to_string(), g);
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, task: &str) -> Result<(Tensor, Option<LayerGates>)> {
        let gate = self.gates.get(task).ok_or_else(|| CoreError::UnknownTask(task.to_string()))?;
        let (b, _, _) = x.dims3()?;
        let out = shared_sum(x, &self.shared)?;
        if self.routed.is_empty() {
            return Ok((out, None));
        }
        let routing = route(&gate.forward(&x.mean(1)?)?, self.cfg.top_k)?;
        let out = dispatch(x, out, &self.routed, &routing)?;
        let gates = LayerGates {
            block: self.name.clone(),
            task: Some(task.to_string()),
            rows: b,
            n_routed: self.cfg.n_routed,
            gates: routing.host,
            selected: routing.selected,
        };
        Ok((out, Some(gates)))
    }
}

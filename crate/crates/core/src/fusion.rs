//! Continuous semantic embeddings and their gated fusion with discrete tokens.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use mpgen_io::Raster;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{patchify, sincos_2d, to_f64_vec, Block, LayerNorm, Linear, ParamStore};

pub const DEFAULT_PROVIDER: &str = "frozen-vit";
const DEFAULT_PROVIDER_SEED: u64 = 0x5e_ed_c0de;

/// Maps `(B, H, W, 3)` images in `[0, 1]` to `(B, n_c, d_c)` embeddings.
pub trait SemanticProvider: Send + Sync {
    fn id(&self) -> &str;
    fn d_c(&self) -> usize;
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

/// Randomly initialized, never-trained ViT encoder with a fixed seed.
#[derive(Debug, Clone)]
pub struct FrozenVit {
    ps: ParamStore,
    patch: usize,
    width: usize,
    patch_in: Linear,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl FrozenVit {
    pub fn new(patch: usize, width: usize, depth: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new(seed, DType::F32);
        let patch_in = Linear::new(&mut ps, "sem.patch", patch * patch * 3, width, true)?;
        let blocks = (0..depth)
            .map(|i| Block::new(&mut ps, &format!("sem.block{i}"), width, heads, 2 * width))
            .collect::<Result<Vec<_>>>()?;
        let ln = LayerNorm::new(&mut ps, "sem.ln", width)?;
        Ok(Self { ps, patch, width, patch_in, blocks, ln })
    }

    /// Patch 16, width 64, 4 blocks, 4 heads: 16 vectors of 64 for a 64x64 image.
    pub fn default_provider() -> Result<Self> {
        Self::new(16, 64, 4, 4, DEFAULT_PROVIDER_SEED)
    }
}

impl SemanticProvider for FrozenVit {
    fn id(&self) -> &str {
        DEFAULT_PROVIDER
    }

    fn d_c(&self) -> usize {
        self.width
    }

    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (_, hh, ww, c) = images.dims4()?;
        if c != 3 {
            return Err(CoreError::Shape(format!("semantic provider expects 3 channels, got {c}")));
        }
        let x = images.to_dtype(self.ps.dtype())?.detach();
        let pos = sincos_2d(hh / self.patch, ww / self.patch, self.width, self.ps.dtype(), self.ps.device())?;
        let mut t = self.patch_in.forward(&patchify(&x, self.patch)?)?.broadcast_add(&pos)?;
        for b in &self.blocks {
            t = b.forward(&t)?;
        }
        Ok(self.ln.forward(&t)?.detach())
    }
}

/// Providers keyed by id.
#[derive(Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Box<dyn SemanticProvider>>,
}

impl ProviderRegistry {
    pub fn with_defaults() -> Result<Self> {
        let mut r = Self::default();
        r.register(Box::new(FrozenVit::default_provider()?));
        Ok(r)
    }

    pub fn register(&mut self, p: Box<dyn SemanticProvider>) {
        self.providers.insert(p.id().to_string(), p);
    }

    pub fn get(&self, id: &str) -> Result<&dyn SemanticProvider> {
        self.providers.get(id).map(|b| b.as_ref()).ok_or_else(|| CoreError::UnknownProvider(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.providers.keys().cloned().collect()
    }
}

pub fn embed_semantic(images: &Tensor, registry: &ProviderRegistry, provider_id: &str) -> Result<Tensor> {
    registry.get(provider_id)?.embed(images)
}

/// Stores one `(n_c, d_c)` embedding as an `n_c x d_c x 1` raster.
pub fn embedding_to_raster(e: &Tensor) -> Result<Raster> {
    let (n, d) = e.dims2()?;
    let data = e.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(Raster::new(n, d, 1, data)?)
}

pub fn embedding_from_raster(r: &Raster, dtype: DType, device: &Device) -> Result<Tensor> {
    let (n, d, c) = r.dims();
    if c != 1 {
        return Err(CoreError::Shape(format!("embedding raster has {c} channels")));
    }
    Ok(Tensor::from_vec(r.data.clone(), (n, d), device)?.to_dtype(dtype)?)
}

pub fn read_embedding(path: &Path, dtype: DType, device: &Device) -> Result<Tensor> {
    embedding_from_raster(&Raster::read(path)?, dtype, device)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub d: usize,
    pub provider_id: String,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.5, d: 64, provider_id: DEFAULT_PROVIDER.to_string() }
    }
}

/// `z' + sigmoid(g_c(z')) * h(s_c) * alpha`, with `z'` a linear embedding of
/// the codes and `h` a linear map of the mean semantic vector.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub embed: Linear,
    pub gate: Linear,
    pub pool: Linear,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Tensor,
    pub embedded: Tensor,
    pub gate: Tensor,
    pub context: Tensor,
}

impl Fusion {
    pub fn new(ps: &mut ParamStore, cfg: FusionConfig, n_z: usize, d_c: usize) -> Result<Self> {
        if !(cfg.alpha >= 0.0) {
            return Err(CoreError::Config(format!("fusion alpha {} must be >= 0", cfg.alpha)));
        }
        let d = cfg.d;
        Ok(Self {
            embed: Linear::new(ps, "fusion.embed", n_z, d, true)?,
            gate: Linear::new(ps, "fusion.gate", d, d, true)?,
            pool: Linear::new(ps, "fusion.pool", d_c, d, true)?,
            cfg,
        })
    }

    /// `codes (B, T, n_z)`, `s_c (B, n_c, d_c)` to `(B, T, d)`.
    pub fn forward(&self, codes: &Tensor, s_c: &Tensor) -> Result<FusionOutput> {
        let (b, _, _) = codes.dims3()?;
        let (bs, _, _) = s_c.dims3()?;
        if b != bs {
            return Err(CoreError::Shape(format!("{b} code grids but {bs} semantic embeddings")));
        }
        let embedded = self.embed.forward(codes)?;
        let gate = candle_nn::ops::sigmoid(&self.gate.forward(&embedded)?)?;
        let context = self.pool.forward(&s_c.mean(1)?)?.unsqueeze(1)?;
        let fused = if self.cfg.alpha == 0.0 {
            embedded.clone()
        } else {
            (&embedded + (gate.broadcast_mul(&context)? * self.cfg.alpha)?)?
        };
        Ok(FusionOutput { fused, embedded, gate, context })
    }

    pub fn fuse(&self, codes: &Tensor, s_c: &Tensor) -> Result<Tensor> {
        Ok(self.forward(codes, s_c)?.fused)
    }
}

/// Max-abs of a tensor, for bounded-injection checks.
pub fn max_abs(t: &Tensor) -> Result<f64> {
    Ok(to_f64_vec(t)?.into_iter().fold(0.0, |m, v| m.max(v.abs())))
}

//! ViT encoder/decoder with a vector-quantized bottleneck, plus the
//! reconstruction, commitment and adversarial losses used to train it.

use candle_core::{DType, Device, Tensor, Var};
use candle_core::backprop::GradStore;
use mpgen_io::{Checkpoint, CodebookBlob};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{patchify, scalar, sincos_2d, to_f64_vec, unpatchify, Block, LayerNorm, Linear, ParamStore};

/// Name of the parameter used for the adaptive adversarial weight.
pub const LAST_LAYER: &str = "dec.out.weight";
pub const CODEBOOK: &str = "codebook";
pub const LAMBDA_DELTA: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub k: usize,
    pub n_z: usize,
    pub beta: f64,
    pub channels: usize,
    /// Base channel count of the discriminator.
    #[serde(default = "default_disc_channels")]
    pub disc_channels: usize,
}

fn default_disc_channels() -> usize {
    16
}

impl TokenizerConfig {
    /// Desk-scale image tokenizer: 64x64x3 input, 8x8 patches.
    pub fn image() -> Self {
        Self { depth: 1, width: 64, heads: 4, patch_size: 8, k: 256, n_z: 32, beta: 0.25, channels: 3, disc_channels: 16 }
    }

    /// Desk-scale map tokenizer: 32x32x1 input, 8x8 patches, same codebook shape as [`Self::image`].
    pub fn map() -> Self {
        Self { channels: 1, ..Self::image() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.depth == 0 || self.patch_size == 0 || self.channels == 0 || self.n_z == 0 {
            return bad("depth, patch_size, channels and n_z must be positive".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.width % 4 != 0 {
            return bad(format!("width {} must be a multiple of 4 and of heads {}", self.width, self.heads));
        }
        if self.k < 2 {
            return bad(format!("codebook size {} < 2", self.k));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be > 0", self.beta));
        }
        Ok(())
    }
}

/// Host copy of a codebook: `k` rows of `n_z` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub n_z: usize,
    pub entries: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, n_z: usize, entries: Vec<f32>) -> Result<Self> {
        if k == 0 {
            return Err(CoreError::EmptyCodebook);
        }
        if entries.len() != k * n_z || entries.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Shape(format!("codebook {k}x{n_z} with {} finite values", entries.len())));
        }
        Ok(Self { k, n_z, entries })
    }

    pub fn lookup(&self, index: usize) -> &[f32] {
        &self.entries[index * self.n_z..(index + 1) * self.n_z]
    }

    pub fn to_blob(&self) -> CodebookBlob {
        CodebookBlob { k: self.k, n_z: self.n_z, data: self.entries.clone() }
    }

    pub fn from_blob(b: &CodebookBlob) -> Result<Self> {
        Self::new(b.k, b.n_z, b.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_blob().to_bytes()
    }
}

/// Copies `source` for a tokenizer configured by `target`; shapes must match.
pub fn init_codebook_from(source: &Codebook, target: &TokenizerConfig) -> Result<Codebook> {
    if source.k != target.k || source.n_z != target.n_z {
        return Err(CoreError::CodebookShapeMismatch {
            source_k: source.k,
            source_nz: source.n_z,
            target_k: target.k,
            target_nz: target.n_z,
        });
    }
    Ok(source.clone())
}

/// Index of the nearest row of `codebook` (`k x n_z`, row-major) to each row of `z`.
/// Exhaustive Euclidean search; ties resolve to the lowest index.
pub fn nearest_indices(z: &[f64], codebook: &[f64], n_z: usize) -> Result<Vec<u32>> {
    if codebook.is_empty() {
        return Err(CoreError::EmptyCodebook);
    }
    if n_z == 0 || z.len() % n_z != 0 || codebook.len() % n_z != 0 {
        return Err(CoreError::Shape(format!("rows of width {n_z} do not tile the inputs")));
    }
    let k = codebook.len() / n_z;
    Ok(z.chunks_exact(n_z)
        .map(|row| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let e = &codebook[j * n_z..(j + 1) * n_z];
                let d: f64 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best as u32
        })
        .collect())
}

/// Tokens of a batch of rasters: `(B, h*w, n_z)`.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
    pub patch_size: usize,
    pub source_dims: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct QuantizeResult {
    /// Selected codebook rows, differentiable w.r.t. the codebook only.
    pub codes: Tensor,
    /// Decoder input: forward value equals `codes`, gradient passes to the tokens unchanged.
    pub st: Tensor,
    /// Row-major over `(B, h*w)`.
    pub indices: Vec<u32>,
    /// Mean squared distance of `sg(tokens)` to the codes.
    pub codebook_loss: Tensor,
    /// Mean squared distance of the tokens to `sg(codes)`.
    pub commitment_loss: Tensor,
}

/// Nearest-code quantization of `tokens` (`(B, T, n_z)`) against `codebook` (`(K, n_z)`).
pub fn quantize(tokens: &Tensor, codebook: &Tensor) -> Result<QuantizeResult> {
    let (k, n_z) = codebook.dims2()?;
    if k == 0 {
        return Err(CoreError::EmptyCodebook);
    }
    let (b, t, nz) = tokens.dims3()?;
    if nz != n_z {
        return Err(CoreError::Shape(format!("token width {nz} vs codebook width {n_z}")));
    }
    let indices = nearest_indices(&to_f64_vec(tokens)?, &to_f64_vec(codebook)?, n_z)?;
    let idx = Tensor::from_vec(indices.clone(), indices.len(), tokens.device())?;
    let codes = codebook.index_select(&idx, 0)?.reshape((b, t, n_z))?;
    let codebook_loss = (tokens.detach() - &codes)?.sqr()?.mean_all()?;
    let commitment_loss = (tokens - codes.detach())?.sqr()?.mean_all()?;
    let st = (codes.detach() + (tokens - tokens.detach())?)?;
    Ok(QuantizeResult { codes, st, indices, codebook_loss, commitment_loss })
}

/// Reported components of the tokenizer objective.
#[derive(Debug, Clone)]
pub struct VqLoss {
    pub total: Tensor,
    pub mse: Tensor,
    pub ssim: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
}

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over channels with a uniform 7x7 window (valid positions only) and data range 1.
/// Inputs are `(B, H, W, C)`.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if y.dims() != x.dims() {
        return Err(CoreError::Shape(format!("ssim of {:?} and {:?}", x.dims(), y.dims())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let planes = |t: &Tensor| -> Result<Tensor> {
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.reshape((b * c, 1, h, w))?)
    };
    let (x, y) = (planes(x)?, planes(y)?);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let kernel = (Tensor::ones((1, 1, SSIM_WINDOW, SSIM_WINDOW), x.dtype(), x.device())? / n)?;
    let blur = |t: &Tensor| -> Result<Tensor> { Ok(t.conv2d(&kernel, 0, 1, 1, 1)?) };
    let mx = blur(&x)?;
    let my = blur(&y)?;
    let sxx = (blur(&x.sqr()?)? - mx.sqr()?)?;
    let syy = (blur(&y.sqr()?)? - my.sqr()?)?;
    let sxy = (blur(&(&x * &y)?)? - (&mx * &my)?)?;
    let num = (((&mx * &my)? * 2.0)? + SSIM_C1)?.mul(&((sxy * 2.0)? + SSIM_C2)?)?;
    let den = ((mx.sqr()? + my.sqr()?)? + SSIM_C1)?.mul(&((sxx + syy)? + SSIM_C2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// `MSE(x, x_hat) + (1 - SSIM(x, x_hat)) + codebook + beta * commitment`.
pub fn vq_loss(x: &Tensor, x_hat: &Tensor, qr: &QuantizeResult, beta: f64) -> Result<VqLoss> {
    let mse = (x - x_hat)?.sqr()?.mean_all()?;
    let ssim = ssim(x, x_hat)?;
    let rec = (&mse + (ssim.neg()? + 1.0)?)?;
    let total = ((rec + &qr.codebook_loss)? + (&qr.commitment_loss * beta)?)?;
    Ok(VqLoss { total, mse, ssim, codebook: qr.codebook_loss.clone(), commitment: qr.commitment_loss.clone() })
}

/// `lambda = |a| / (|b| + 1e-6)` clamped to `[0, 1e4]`; non-finite ratios map to 0.
pub fn lambda_from_norms(rec_norm: f64, gan_norm: f64) -> f64 {
    let l = rec_norm / (gan_norm + LAMBDA_DELTA);
    if l.is_nan() {
        0.0
    } else {
        l.clamp(0.0, LAMBDA_MAX)
    }
}

pub fn grad_norm(grads: &GradStore, param: &Tensor) -> Result<f64> {
    match grads.get(param) {
        Some(g) => Ok(scalar(&g.sqr()?.sum_all()?)?.sqrt()),
        None => Ok(0.0),
    }
}

/// Adaptive adversarial weight from the two losses' gradients at `last`.
pub fn adaptive_lambda(l_rec: &Tensor, l_gan: &Tensor, last: &Tensor) -> Result<f64> {
    let a = grad_norm(&l_rec.backward()?, last)?;
    let b = grad_norm(&l_gan.backward()?, last)?;
    Ok(lambda_from_norms(a, b))
}

/// Patch critic: three stride-2 convolutions with LeakyReLU, then a 3x3 logit head.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub ps: ParamStore,
    layers: Vec<(Tensor, Tensor, usize, usize)>,
}

impl Discriminator {
    pub fn new(channels: usize, base: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(seed, dtype);
        let spec = [(channels, base, 4, 2, 1), (base, 2 * base, 4, 2, 1), (2 * base, 2 * base, 4, 2, 1), (2 * base, 1, 3, 1, 1)];
        let mut layers = Vec::new();
        for (i, (cin, cout, k, stride, pad)) in spec.into_iter().enumerate() {
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            let w = ps.uniform(&format!("disc.{i}.weight"), &[cout, cin, k, k], bound)?;
            let b = ps.uniform(&format!("disc.{i}.bias"), &[cout], bound)?;
            layers.push((w, b, stride, pad));
        }
        Ok(Self { ps, layers })
    }

    /// Logits `(B, n_patches)` for `(B, H, W, C)` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.permute((0, 3, 1, 2))?.contiguous()?;
        let n = self.layers.len();
        for (i, (w, b, stride, pad)) in self.layers.iter().enumerate() {
            h = h.conv2d(w, *pad, *stride, 1, 1)?.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?;
            if i + 1 < n {
                h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            }
        }
        let bsz = h.dims()[0];
        Ok(h.reshape((bsz, ()))?)
    }
}

/// Hinge losses: `(mean relu(1 - D(x)) + mean relu(1 + D(sg(x_hat))), -mean D(x_hat))`.
pub fn gan_step_losses(disc: &Discriminator, x: &Tensor, x_hat: &Tensor) -> Result<(Tensor, Tensor)> {
    let real = disc.forward(x)?;
    let fake_d = disc.forward(&x_hat.detach())?;
    let loss_d = ((real.neg()? + 1.0)?.relu()?.mean_all()? + (fake_d + 1.0)?.relu()?.mean_all()?)?;
    let loss_g = disc.forward(x_hat)?.mean_all()?.neg()?;
    Ok((loss_d, loss_g))
}

/// Everything computed by one tokenizer forward pass.
#[derive(Debug, Clone)]
pub struct TokenizerOutput {
    pub grid: TokenGrid,
    pub quant: QuantizeResult,
    pub recon: Tensor,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub ps: ParamStore,
    patch_in: Linear,
    enc_blocks: Vec<Block>,
    enc_ln: LayerNorm,
    enc_out: Linear,
    dec_in: Linear,
    dec_blocks: Vec<Block>,
    dec_ln: LayerNorm,
    dec_out: Linear,
    codebook: Tensor,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let (d, p, c) = (cfg.width, cfg.patch_size, cfg.channels);
        let hidden = 2 * d;
        let patch_in = Linear::new(&mut ps, "enc.patch", p * p * c, d, true)?;
        let enc_blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut ps, &format!("enc.block{i}"), d, cfg.heads, hidden))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(&mut ps, "enc.ln", d)?;
        let enc_out = Linear::new(&mut ps, "enc.out", d, cfg.n_z, true)?;
        let dec_in = Linear::new(&mut ps, "dec.in", cfg.n_z, d, true)?;
        let dec_blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut ps, &format!("dec.block{i}"), d, cfg.heads, hidden))
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(&mut ps, "dec.ln", d)?;
        let dec_out = Linear::new(&mut ps, "dec.out", d, p * p * c, true)?;
        let bound = 1.0 / cfg.k as f64;
        let codebook = ps.uniform(CODEBOOK, &[cfg.k, cfg.n_z], bound)?;
        Ok(Self { cfg, ps, patch_in, enc_blocks, enc_ln, enc_out, dec_in, dec_blocks, dec_ln, dec_out, codebook })
    }

    pub fn device(&self) -> &Device {
        self.ps.device()
    }

    pub fn codebook_tensor(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook_var(&self) -> &Var {
        self.ps.get(CODEBOOK).expect("codebook registered")
    }

    pub fn last_layer(&self) -> &Tensor {
        &self.dec_out.weight
    }

    pub fn codebook(&self) -> Result<Codebook> {
        let data = self.codebook.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Codebook::new(self.cfg.k, self.cfg.n_z, data)
    }

    pub fn set_codebook(&self, cb: &Codebook) -> Result<()> {
        if cb.k != self.cfg.k || cb.n_z != self.cfg.n_z {
            return Err(CoreError::CodebookShapeMismatch {
                source_k: cb.k,
                source_nz: cb.n_z,
                target_k: self.cfg.k,
                target_nz: self.cfg.n_z,
            });
        }
        let t = Tensor::from_vec(cb.entries.clone(), (cb.k, cb.n_z), self.device())?.to_dtype(self.ps.dtype())?;
        self.codebook_var().set(&t)?;
        Ok(())
    }

    fn grid_dims(&self, hh: usize, ww: usize) -> Result<(usize, usize)> {
        let p = self.cfg.patch_size;
        if hh % p != 0 || ww % p != 0 || hh == 0 || ww == 0 {
            return Err(CoreError::BadPatching { height: hh, width: ww, patch: p });
        }
        Ok((hh / p, ww / p))
    }

    /// `(B, H, W, C)` rasters to a token grid.
    pub fn encode(&self, x: &Tensor) -> Result<TokenGrid> {
        let (_, hh, ww, c) = x.dims4()?;
        if c != self.cfg.channels {
            return Err(CoreError::Shape(format!("{c} channels, tokenizer expects {}", self.cfg.channels)));
        }
        let (h, w) = self.grid_dims(hh, ww)?;
        let x = x.to_dtype(self.ps.dtype())?;
        let pos = sincos_2d(h, w, self.cfg.width, self.ps.dtype(), self.device())?;
        let mut t = self.patch_in.forward(&patchify(&x, self.cfg.patch_size)?)?.broadcast_add(&pos)?;
        for b in &self.enc_blocks {
            t = b.forward(&t)?;
        }
        let tokens = self.enc_out.forward(&self.enc_ln.forward(&t)?)?;
        Ok(TokenGrid { tokens, h, w, patch_size: self.cfg.patch_size, source_dims: (hh, ww, c) })
    }

    pub fn quantize(&self, grid: &TokenGrid) -> Result<QuantizeResult> {
        quantize(&grid.tokens, &self.codebook)
    }

    /// `(B, h*w, n_z)` codes to `(B, h*p, w*p, C)` rasters.
    pub fn decode(&self, codes: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (_, t, nz) = codes.dims3()?;
        if t != h * w || nz != self.cfg.n_z {
            return Err(CoreError::Shape(format!("codes ({t}, {nz}) for a {h}x{w} grid of width {}", self.cfg.n_z)));
        }
        let pos = sincos_2d(h, w, self.cfg.width, self.ps.dtype(), self.device())?;
        let mut y = self.dec_in.forward(codes)?.broadcast_add(&pos)?;
        for b in &self.dec_blocks {
            y = b.forward(&y)?;
        }
        let y = self.dec_out.forward(&self.dec_ln.forward(&y)?)?;
        unpatchify(&y, h, w, self.cfg.patch_size, self.cfg.channels)
    }

    pub fn forward(&self, x: &Tensor) -> Result<TokenizerOutput> {
        let grid = self.encode(x)?;
        let quant = self.quantize(&grid)?;
        let recon = self.decode(&quant.st, grid.h, grid.w)?;
        Ok(TokenizerOutput { grid, quant, recon })
    }

    /// Decoder parameters only.
    pub fn decoder_vars(&self) -> Vec<Var> {
        self.ps.vars_where(|n| n.starts_with("dec."))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({ "tokenizer": self.cfg }));
        self.ps.write_into(&mut ck)?;
        ck.codebooks.insert(CODEBOOK.to_string(), self.codebook()?.to_blob());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: TokenizerConfig = serde_json::from_value(
            ck.config.get("tokenizer").cloned().ok_or_else(|| CoreError::Config("checkpoint has no tokenizer config".into()))?,
        )?;
        let tok = Self::new(cfg, 0, DType::F32)?;
        tok.ps.load_from(ck, "")?;
        if let Some(blob) = ck.codebooks.get(CODEBOOK) {
            tok.set_codebook(&Codebook::from_blob(blob)?)?;
        }
        Ok(tok)
    }
}

/// Stacks `(H, W, C)` rasters into a `(B, H, W, C)` tensor.
pub fn stack_rasters(rasters: &[&mpgen_io::Raster], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = rasters.first().ok_or_else(|| CoreError::EmptyDataset("no rasters to stack".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(rasters.len() * h * w * c);
    for r in rasters {
        if r.dims() != (h, w, c) {
            return Err(CoreError::Shape(format!("raster {:?} vs {:?}", r.dims(), (h, w, c))));
        }
        data.extend_from_slice(&r.data);
    }
    Ok(Tensor::from_vec(data, (rasters.len(), h, w, c), device)?.to_dtype(dtype)?)
}

//! Parameter storage and the small set of layers the models are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use mpgen_io::checkpoint::in_scope;
use mpgen_io::{Checkpoint, TensorRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// FNV-1a, used to derive per-parameter seeds from names.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named trainable tensors. Each parameter draws its initial values from an RNG
/// seeded by `(store seed, name)`, so creation order does not matter.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    params: BTreeMap<String, Var>,
}

/// Parameter group: the name without its last dotted component.
pub fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map(|(g, _)| g).unwrap_or(name)
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { device: Device::Cpu, dtype, seed, params: BTreeMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(CoreError::Config(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.params.insert(name.to_string(), v);
        Ok(out)
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Variables whose name passes `keep`, in name order.
    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.params.iter().filter(|(n, _)| keep(n)).map(|(_, v)| v.clone()).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars_where(|_| true)
    }

    /// Scalar count of parameters passing `keep`.
    pub fn count_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|(n, _)| keep(n)).map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_records(&self, keep: impl Fn(&str) -> bool) -> Result<BTreeMap<String, TensorRecord>> {
        let mut out = BTreeMap::new();
        for (name, v) in self.params.iter().filter(|(n, _)| keep(n)) {
            let data = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            out.insert(
                name.clone(),
                TensorRecord { group: group_of(name).to_string(), shape: v.dims().to_vec(), data },
            );
        }
        Ok(out)
    }

    /// Tensors under `scope` (dotted prefix), for bit-identity comparisons.
    pub fn scope_records(&self, scope: &str) -> Result<BTreeMap<String, TensorRecord>> {
        self.to_records(|n| in_scope(n, scope))
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.write_prefixed(ckpt, "")
    }

    /// Writes every tensor under `prefix + name`.
    pub fn write_prefixed(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, rec) in self.to_records(|_| true)? {
            let key = format!("{prefix}{name}");
            let group = group_of(&key).to_string();
            ckpt.insert_tensor(key, group, rec.shape, rec.data)?;
        }
        Ok(())
    }

    /// Copies values in place. Every parameter of the store must be present
    /// under `prefix + name` with a matching shape.
    pub fn load_from(&self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, v) in &self.params {
            let key = format!("{prefix}{name}");
            let rec = ckpt
                .tensors
                .get(&key)
                .ok_or_else(|| CoreError::Config(format!("checkpoint lacks tensor {key}")))?;
            self.set_from_record(name, v, rec)?;
        }
        Ok(())
    }

    pub fn set_value(&self, name: &str, rec: &TensorRecord) -> Result<()> {
        let v = self
            .params
            .get(name)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter {name}")))?;
        self.set_from_record(name, v, rec)
    }

    fn set_from_record(&self, name: &str, v: &Var, rec: &TensorRecord) -> Result<()> {
        if rec.shape != v.dims() {
            return Err(CoreError::Shape(format!(
                "{name}: stored shape {:?}, parameter shape {:?}",
                rec.shape,
                v.dims()
            )));
        }
        let t = Tensor::from_vec(rec.data.clone(), rec.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Affine map over the last dimension. `weight` is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub name: String,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?;
        let bias = if bias { Some(ps.uniform(&format!("{name}.bias"), &[d_out], bound)?) } else { None };
        Ok(Self { weight, bias, name: name.to_string() })
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = ps.constant(&format!("{name}.weight"), &[d_in, d_out], 0.0)?;
        let bias = Some(ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?);
        Ok(Self { weight, bias, name: name.to_string() })
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| CoreError::Shape("scalar input to linear".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.d_out();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[d], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[d], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two-layer feed-forward network with a tanh-approximated GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Multi-head self-attention over `(batch, tokens, d)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Config(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), d, 3 * d, true)?,
            proj: Linear::new(ps, &format!("{name}.proj"), d, d, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.proj.forward(&y)
    }
}

/// Pre-normalized transformer encoder block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            attn: Attention::new(ps, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), d, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Fixed 2-D sine/cosine position table of shape `(h * w, d)`; `d` must be a multiple of 4.
pub fn sincos_2d(h: usize, w: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(CoreError::Config(format!("position width {d} not a multiple of 4")));
    }
    let quarter = d / 4;
    let mut out = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for (pos, _) in [(c as f64, 0), (r as f64, 1)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).sin());
                }
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    out.push((pos * omega).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (h * w, d), device)?.to_dtype(dtype)?)
}

/// `(B, H, W, C)` rasters to `(B, h*w, p*p*C)` patch rows, row-major over patches.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, hh, ww, c) = x.dims4()?;
    if p == 0 || hh % p != 0 || ww % p != 0 {
        return Err(CoreError::BadPatching { height: hh, width: ww, patch: p });
    }
    let (h, w) = (hh / p, ww / p);
    Ok(x.reshape((b, h, p, w, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * w, p * p * c))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(x: &Tensor, h: usize, w: usize, p: usize, c: usize) -> Result<Tensor> {
    let (b, t, _) = x.dims3()?;
    if t != h * w {
        return Err(CoreError::Shape(format!("{t} tokens for a {h}x{w} grid")));
    }
    Ok(x.reshape((b, h, w, p, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h * p, w * p, c))?)
}

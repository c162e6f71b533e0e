//! Small neural-network building blocks on top of candle tensors: a named
//! parameter store with seeded initialisation, linear layers, RMS norm,
//! rotary attention and the gated feed-forward block.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::text::LowRankAdapter;

pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Owns every weight of a model, in creation order.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0)),
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.params.push(Param {
            name: name.to_string(),
            var,
            trainable: true,
        });
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.normal(&format!("{name}.weight"), &[out_dim, in_dim], std)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[out_dim, in_dim], 0.0)?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    /// Applies the layer to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap_or(&0);
        let rows = x.elem_count() / in_dim.max(1);
        let flat = x.reshape((rows, in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone)]
pub struct RmsNorm {
    weight: Tensor,
    eps: f64,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
        let inv = (ms + self.eps)?.sqrt()?.recip()?;
        Ok(x.broadcast_mul(&inv)?.broadcast_mul(&self.weight)?)
    }
}

/// Rotary position tables (rotate-half layout).
#[derive(Clone)]
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
}

impl Rotary {
    pub fn new(head_dim: usize, max_pos: usize, dtype: DType, device: &Device) -> Result<Self> {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for p in 0..max_pos {
            for i in 0..half {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            cos: Tensor::from_vec(cos, (max_pos, half), device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (max_pos, half), device)?.to_dtype(dtype)?,
        })
    }

    pub fn max_positions(&self) -> usize {
        self.cos.dim(0).unwrap_or(0)
    }

    /// `x`: [B, H, L, hd]; `positions`: [B, L] u32.
    pub fn apply(&self, x: &Tensor, positions: &Tensor) -> Result<Tensor> {
        let (b, _h, l, hd) = x.dims4()?;
        let half = hd / 2;
        let flat = positions.flatten_all()?;
        let cos = self.cos.index_select(&flat, 0)?.reshape((b, 1, l, half))?;
        let sin = self.sin.index_select(&flat, 0)?.reshape((b, 1, l, half))?;
        let x1 = x.narrow(3, 0, half)?;
        let x2 = x.narrow(3, half, half)?;
        let r1 = (x1.broadcast_mul(&cos)? - x2.broadcast_mul(&sin)?)?;
        let r2 = (x2.broadcast_mul(&cos)? + x1.broadcast_mul(&sin)?)?;
        Ok(Tensor::cat(&[r1, r2], 3)?)
    }
}

/// Cached keys and values of one attention layer, [B, H, L, hd].
#[derive(Clone, Default)]
pub struct LayerCache {
    kv: Option<(Tensor, Tensor)>,
}

/// Incremental decoding cache for a stack of attention layers.
#[derive(Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![LayerCache::default(); layers],
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    q_adapter: Option<LowRankAdapter>,
    v_adapter: Option<LowRankAdapter>,
    adapters_enabled: bool,
    heads: usize,
    head_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        adapter: Option<AdapterSpec>,
    ) -> Result<Self> {
        if width % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        let q = Linear::new(store, &format!("{name}.q"), width, width, false)?;
        let k = Linear::new(store, &format!("{name}.k"), width, width, false)?;
        let v = Linear::new(store, &format!("{name}.v"), width, width, false)?;
        let o = Linear::new(store, &format!("{name}.o"), width, width, false)?;
        let (q_adapter, v_adapter) = match adapter {
            Some(spec) => (
                Some(LowRankAdapter::new(store, &format!("{name}.q.lora"), width, width, spec)?),
                Some(LowRankAdapter::new(store, &format!("{name}.v.lora"), width, width, spec)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            q,
            k,
            v,
            o,
            q_adapter,
            v_adapter,
            adapters_enabled: true,
            heads,
            head_dim: width / heads,
        })
    }

    fn project(&self, lin: &Linear, adapter: Option<&LowRankAdapter>, x: &Tensor) -> Result<Tensor> {
        let base = lin.forward(x)?;
        match adapter {
            Some(a) if self.adapters_enabled => a.apply(&base, x),
            _ => Ok(base),
        }
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `mask`: additive [B, 1, L, L_total] or `None` for unrestricted attention.
    pub fn forward(
        &self,
        x: &Tensor,
        positions: &Tensor,
        rotary: &Rotary,
        mask: Option<&Tensor>,
        cache: Option<&mut LayerCache>,
    ) -> Result<Tensor> {
        let (b, l, width) = x.dims3()?;
        let q = self.split_heads(&self.project(&self.q, self.q_adapter.as_ref(), x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        let v = self.split_heads(&self.project(&self.v, self.v_adapter.as_ref(), x)?)?;
        let q = rotary.apply(&q, positions)?;
        let k = rotary.apply(&k, positions)?;
        let (k, v) = match cache {
            Some(c) => {
                let (k, v) = match &c.kv {
                    Some((pk, pv)) => (Tensor::cat(&[pk, &k], 2)?, Tensor::cat(&[pv, &v], 2)?),
                    None => (k, v),
                };
                c.kv = Some((k.clone(), v.clone()));
                (k, v)
            }
            None => (k, v),
        };
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, width))?;
        self.o.forward(&ctx)
    }
}

pub struct FeedForward {
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            gate: Linear::new(store, &format!("{name}.gate"), width, hidden, false)?,
            up: Linear::new(store, &format!("{name}.up"), width, hidden, false)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, width, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = (self.gate.forward(x)?.silu()? * self.up.forward(x)?)?;
        self.down.forward(&h)
    }
}

/// Pre-norm transformer block.
pub struct Block {
    attn_norm: RmsNorm,
    attn: Attention,
    ffn_norm: RmsNorm,
    ffn: FeedForward,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        ffn_width: usize,
        heads: usize,
        adapter: Option<AdapterSpec>,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: RmsNorm::new(store, &format!("{name}.attn_norm"), width)?,
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, adapter)?,
            ffn_norm: RmsNorm::new(store, &format!("{name}.ffn_norm"), width)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ffn_width)?,
        })
    }

    pub fn set_adapters_enabled(&mut self, enabled: bool) {
        self.attn.adapters_enabled = enabled;
    }

    pub fn forward(
        &self,
        x: &Tensor,
        positions: &Tensor,
        rotary: &Rotary,
        mask: Option<&Tensor>,
        cache: Option<&mut LayerCache>,
    ) -> Result<Tensor> {
        let h = self
            .attn
            .forward(&self.attn_norm.forward(x)?, positions, rotary, mask, cache)?;
        let x = (x + h)?;
        let h = self.ffn.forward(&self.ffn_norm.forward(&x)?)?;
        Ok((x + h)?)
    }
}

/// Runs `blocks` over `x`, threading an optional incremental cache.
pub fn run_blocks(
    blocks: &[Block],
    x: Tensor,
    positions: &Tensor,
    rotary: &Rotary,
    mask: Option<&Tensor>,
    mut cache: Option<&mut KvCache>,
) -> Result<Tensor> {
    let new_len = x.dim(1)?;
    let mut x = x;
    for (i, block) in blocks.iter().enumerate() {
        let layer = cache.as_deref_mut().map(|c| &mut c.layers[i]);
        x = block.forward(&x, positions, rotary, mask, layer)?;
    }
    if let Some(c) = cache {
        c.len += new_len;
    }
    Ok(x)
}

/// Additive attention mask [B, 1, L, L] from per-item key validity.
/// A query may always see itself, so rows of padding never go empty.
pub fn attention_mask(
    key_valid: &[Vec<bool>],
    causal: bool,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let b = key_valid.len();
    let l = key_valid.first().map_or(0, Vec::len);
    let mut values = Vec::with_capacity(b * l * l);
    for valid in key_valid {
        for i in 0..l {
            for (j, &ok) in valid.iter().enumerate() {
                let visible = (ok || i == j) && (!causal || j <= i);
                values.push(if visible { 0f32 } else { -1e9 });
            }
        }
    }
    Ok(Tensor::from_vec(values, (b, 1, l, l), device)?.to_dtype(dtype)?)
}

/// Causal mask for `new` queries appended after `past` cached positions.
pub fn incremental_mask(past: usize, new: usize, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
    if new <= 1 {
        return Ok(None);
    }
    let total = past + new;
    let values: Vec<f32> = (0..new)
        .flat_map(|i| (0..total).map(move |j| if j <= past + i { 0.0 } else { -1e9 }))
        .collect();
    Ok(Some(
        Tensor::from_vec(values, (1, 1, new, total), device)?.to_dtype(dtype)?,
    ))
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible_across_dtypes() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F64);
        let ta = a.normal("w", &[3, 4], 0.5).unwrap();
        let tb = b.normal("w", &[3, 4], 0.5).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f64> = tb.flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in va.iter().zip(&vb) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn rms_norm_unit_scale() {
        let mut s = ParamStore::new(0, DType::F64);
        let n = RmsNorm::new(&mut s, "n", 4).unwrap();
        let x = Tensor::new(&[[2.0f64, 2.0, 2.0, 2.0]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = n.forward(&x).unwrap().to_vec2().unwrap();
        for v in &y[0] {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotary_preserves_norm_and_is_identity_at_zero() {
        let r = Rotary::new(8, 16, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 2, 8))
            .unwrap();
        let pos = Tensor::new(&[[0u32, 5]], &Device::Cpu).unwrap();
        let y = r.apply(&x, &pos).unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(&xv[..8], &yv[..8]);
        let nx: f64 = xv[8..].iter().map(|v| v * v).sum();
        let ny: f64 = yv[8..].iter().map(|v| v * v).sum();
        assert!((nx - ny).abs() < 1e-9);
    }

    #[test]
    fn mask_keeps_diagonal_for_padding() {
        let m = attention_mask(&[vec![true, false, true]], true, DType::F32, &Device::Cpu).unwrap();
        let v: Vec<f32> = m.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, -1e9, -1e9, 0.0, 0.0, -1e9, 0.0, -1e9, 0.0]);
    }
}

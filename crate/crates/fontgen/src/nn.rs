//! Shared network plumbing: a named parameter registry with deterministic
//! seeded init, layer primitives, a serializable Adam, and raster/tensor
//! conversion. All models in this crate are built from these pieces so that
//! checkpointing, freezing, and reproducibility behave the same everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Whether a forward pass lets gradients reach the module's own parameters.
/// `Frozen` still propagates gradients through to the inputs, which is how a
/// generator learns from a fixed discriminator or style encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Live,
    Frozen,
}

fn param(v: &Var, mode: ParamMode) -> Tensor {
    match mode {
        ParamMode::Live => v.as_tensor().clone(),
        ParamMode::Frozen => v.as_tensor().detach(),
    }
}

/// Parameters are stored f32; a cast is inserted when the activations run at
/// another precision (tests drive f64 through the same graphs for tight
/// finite-difference checks).
fn param_as(v: &Var, mode: ParamMode, dtype: DType) -> Result<Tensor> {
    let t = param(v, mode);
    if t.dtype() == dtype {
        Ok(t)
    } else {
        Ok(t.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
}

/// He initialization for a layer with the given fan-in.
pub fn kaiming(fan_in: usize) -> Init {
    Init::Normal { std: (2.0 / fan_in as f64).sqrt() }
}

/// Box-Muller, so initialization depends only on the caller's rng stream and
/// not on any external distribution crate's internals.
fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * u2;
        out.push((r * a.cos() * std) as f32);
        if out.len() < n {
            out.push((r * a.sin() * std) as f32);
        }
    }
    out
}

/// Ordered registry of named trainable parameters. Creation order is code
/// order, so initialization consumes the rng stream deterministically.
#[derive(Debug, Default)]
pub struct VarSet {
    vars: BTreeMap<String, Var>,
}

impl VarSet {
    pub fn new() -> Self {
        VarSet { vars: BTreeMap::new() }
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    pub fn var(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal { std } => normal_vec(rng, n, std),
            Init::Uniform { lo, hi } => {
                (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// All parameter tensors under `prefix/name` keys, for checkpointing.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}/{k}"), v.as_tensor().clone()))
            .collect()
    }

    /// Restores every parameter from `map`; shapes must match and no
    /// parameter may be missing.
    pub fn restore(&self, prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let key = format!("{prefix}/{k}");
            let t = map.get(&key).ok_or_else(|| {
                Error::integrity(format!("checkpoint is missing parameter {key}"))
            })?;
            if t.dims() != v.as_tensor().dims() {
                return Err(Error::integrity(format!(
                    "checkpoint parameter {key} has shape {:?}, model expects {:?}",
                    t.dims(),
                    v.as_tensor().dims()
                )));
            }
            v.set(t)?;
        }
        Ok(())
    }

    /// Order-stable FNV-1a over every parameter's bits. Two sets share a
    /// fingerprint iff all parameters are bitwise identical.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (k, v) in &self.vars {
            eat(k.as_bytes());
            let data = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            for x in data {
                eat(&x.to_le_bytes());
            }
        }
        Ok(h)
    }
}

/// Writes tensor maps from several models into one safetensors file.
pub fn save_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let map: std::collections::HashMap<String, Tensor> = entries.iter().cloned().collect();
    candle_core::safetensors::save(&map, path)
        .map_err(|e| Error::integrity(format!("{}: safetensors write: {e}", path.display())))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let map = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::integrity(format!("{}: safetensors read: {e}", path.display())))?;
    Ok(map.into_iter().collect())
}

/// 2D convolution layer, NCHW.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn init(
        vs: &mut VarSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight =
            vs.var(&format!("{name}.weight"), &[out_c, in_c, k, k], kaiming(in_c * k * k), rng)?;
        let bias = vs.var(&format!("{name}.bias"), &[out_c], Init::Zeros, rng)?;
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let w = param_as(&self.weight, mode, x.dtype())?;
        let b = param_as(&self.bias, mode, x.dtype())?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, 1)?;
        let b = b.reshape((1, b.elem_count(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn init(
        vs: &mut VarSet,
        name: &str,
        in_d: usize,
        out_d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = vs.var(&format!("{name}.weight"), &[in_d, out_d], kaiming(in_d), rng)?;
        let bias = vs.var(&format!("{name}.bias"), &[out_d], Init::Zeros, rng)?;
        Ok(Linear { weight, bias })
    }

    /// x: (..., in_d) -> (..., out_d).
    pub fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let w = param_as(&self.weight, mode, x.dtype())?;
        let b = param_as(&self.bias, mode, x.dtype())?;
        Ok(x.broadcast_matmul(&w)?.broadcast_add(&b)?)
    }
}

/// Embedding table looked up by integer class label.
#[derive(Debug, Clone)]
pub struct Embedding {
    table: Var,
}

impl Embedding {
    pub fn init(
        vs: &mut VarSet,
        name: &str,
        num_classes: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let table = vs.var(&format!("{name}.table"), &[num_classes, dim], Init::Normal { std: 0.05 }, rng)?;
        Ok(Embedding { table })
    }

    /// ids: (B,) u32 -> (B, dim) at the requested activation dtype.
    pub fn forward(&self, ids: &Tensor, mode: ParamMode, dtype: DType) -> Result<Tensor> {
        let t = param_as(&self.table, mode, dtype)?;
        Ok(t.index_select(ids, 0)?)
    }

    pub fn num_classes(&self) -> usize {
        self.table.as_tensor().dims()[0]
    }
}

pub fn leaky_relu(x: &Tensor, alpha: f64) -> Result<Tensor> {
    let scaled = (x * alpha)?;
    Ok(x.maximum(&scaled)?)
}

/// Per-location channel RMS normalization: x / sqrt(mean_c x^2 + eps).
/// Purely local, so it cannot leak statistics across patch positions the way
/// batch or instance normalization would.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(1)?;
    let denom = (ms + 1e-8)?.sqrt()?;
    Ok(x.broadcast_div(&denom)?)
}

/// (B,C,H,W) -> (B,C) channel means.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    Ok(x.avg_pool2d((h, w))?.squeeze(3)?.squeeze(2)?)
}

/// (B,C,H,W) -> (B,C) channel maxima.
///
/// Built from max reductions, not `max_pool2d`: the pooling backward in the
/// tensor backend scales gradients down by the kernel area (its tie-handling
/// mask is multiplied by count/area instead of 1/count), which silently
/// shrinks style gradients by HxW. The reduction backward is exact. A
/// finite-difference regression test below pins this choice.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.max(3)?.max(2)?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

/// Rasters to a (B,1,H,W) tensor, [0,1] pixels mapped to [-1,1].
pub fn glyph_batch(images: &[&Raster]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let size = images[0].size();
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.size() != size {
            return Err(Error::config("mixed raster sizes in one batch"));
        }
        data.extend(img.data().iter().map(|v| v * 2.0 - 1.0));
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, size, size), &Device::Cpu)?)
}

/// (B,1,H,W) tensor in [-1,1] back to rasters, clamped into range.
pub fn tensor_to_rasters(t: &Tensor) -> Result<Vec<Raster>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 || h != w {
        return Err(Error::config(format!("expected (B,1,N,N) glyph tensor, got {:?}", t.dims())));
    }
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let data: Vec<f32> =
            flat[i * h * w..(i + 1) * h * w].iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
        out.push(Raster::from_vec(h, data)?);
    }
    Ok(out)
}

/// Extracts a finite scalar, failing with a divergence error otherwise.
pub fn finite_scalar(t: &Tensor, what: &str) -> Result<f32> {
    let v = t.to_dtype(DType::F32)?.to_scalar::<f32>()?;
    if !v.is_finite() {
        return Err(Error::Divergence(format!("{what} is {v}")));
    }
    Ok(v)
}

/// Adam with bias correction. State is plain tensors so checkpoints restore
/// the optimizer bit-for-bit.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter in `vs` that received a gradient.
    pub fn step(&mut self, vs: &VarSet, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in vs.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let delta = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().sub(&delta)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn tensors(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(
            format!("{prefix}/t"),
            Tensor::from_vec(vec![self.t as f64], &[1][..], &Device::Cpu)?,
        )];
        for (k, t) in &self.m {
            out.push((format!("{prefix}/m/{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            out.push((format!("{prefix}/v/{k}"), t.clone()));
        }
        Ok(out)
    }

    pub fn restore(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let t_key = format!("{prefix}/t");
        let t = map
            .get(&t_key)
            .ok_or_else(|| Error::integrity(format!("checkpoint is missing {t_key}")))?;
        self.t = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0] as u64;
        self.m.clear();
        self.v.clear();
        let m_pre = format!("{prefix}/m/");
        let v_pre = format!("{prefix}/v/");
        for (k, t) in map {
            if let Some(name) = k.strip_prefix(&m_pre) {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&v_pre) {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        Ok(())
    }
}

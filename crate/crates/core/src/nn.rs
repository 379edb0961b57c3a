//! Small neural-network building blocks shared by the codec and the refiner.
//!
//! Parameters live in a [`ParamStore`], a `candle_nn` variable backend whose
//! initialisation is driven by a seed and the parameter name rather than a
//! thread-local RNG, so two stores built with the same seed hold bit-identical
//! weights regardless of construction order.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::{NormalOrUniform, DEFAULT_KAIMING_NORMAL};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// FNV-1a, used to derive per-name seeds.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named trainable parameters with seeded, order-independent initialisation.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("len", &self.lock().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, Var>> {
        self.vars.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.lock()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.lock().values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.lock()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrite every parameter from `tensors`. Every stored name must be present
    /// with a matching shape; extra entries are ignored.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let vars = self.lock();
        for (name, var) in vars.iter() {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: stored {:?}, model {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }

    fn init_tensor(&self, name: &str, shape: &Shape, init: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(name.as_bytes()));
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| mean + stdev * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect(),
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)?)
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut vars = self.lock();
        if let Some(v) = vars.get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter `{name}` requested with shape {s:?}, stored {:?}", v.shape());
            }
            return v.as_tensor().to_dtype(dtype);
        }
        let t = self
            .init_tensor(name, &s, h, dtype, dev)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.lock().get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("parameter `{name}` not initialised"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.lock().contains_key(name)
    }
}

/// Layer normalisation built from primitive ops so it differentiates in any dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    /// Normalise over the channel axis of an NCHW map.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Softmax over the last axis from primitive ops. Rows may contain `-inf`
/// entries (masked positions) as long as at least one entry is finite.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let num = x.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(D::Minus1)?;
    Ok(num.broadcast_div(&den)?)
}

/// 3×3 depthwise convolution (stride 1, zero padding 1) on an NCHW map, written
/// as a sum of nine shifted, per-channel-scaled copies.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((channels, 9), "weight", DEFAULT_KAIMING_NORMAL)?;
        let bias = vb.get_with_hints(channels, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }
}

impl Module for DepthwiseConv3x3 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut acc = self.bias.reshape((1, c, 1, 1))?.broadcast_as(x.shape())?.contiguous()?;
        for dy in 0..3 {
            for dx in 0..3 {
                let tap = self.weight.narrow(1, dy * 3 + dx, 1)?.reshape((1, c, 1, 1))?;
                let shifted = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
                acc = (acc + shifted.broadcast_mul(&tap)?)?;
            }
        }
        Ok(acc)
    }
}

/// Hyper-parameters for [`Adam`].
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are exposed so training can be resumed
/// from a checkpoint without perturbing the trajectory.
#[derive(Debug)]
pub struct Adam {
    params: AdamParams,
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, params: AdamParams) -> Result<Self> {
        let first = vars
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            params,
            vars,
            first,
            second,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let c1 = 1.0 - p.beta1.powi(self.step as i32);
        let c2 = 1.0 - p.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients keep their backward graph alive unless detached
            let g = &g.detach();
            let m = ((&self.first[i] * p.beta1)? + (g * (1.0 - p.beta1))?)?;
            let v = ((&self.second[i] * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + p.eps)?)?;
            var.set(&var.as_tensor().sub(&(update * p.lr)?)?.detach())?;
            self.first[i] = m.detach();
            self.second[i] = v.detach();
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<name>` / `adam.v.<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("adam.m.{name}"), self.first[i].clone());
            out.insert(format!("adam.v.{name}"), self.second[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("adam.{prefix}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Shape(format!("missing optimizer state `{key}`")))?;
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_init_is_order_independent() {
        let dev = Device::Cpu;
        let a = ParamStore::new(3);
        let b = ParamStore::new(3);
        let va = a.var_builder(DType::F64, &dev);
        let vb = b.var_builder(DType::F64, &dev);
        let a1 = candle_nn::linear(4, 5, va.pp("x")).unwrap();
        let _a2 = candle_nn::linear(2, 2, va.pp("y")).unwrap();
        let _b2 = candle_nn::linear(2, 2, vb.pp("y")).unwrap();
        let b1 = candle_nn::linear(4, 5, vb.pp("x")).unwrap();
        let wa: Vec<f64> = a1.weight().flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f64> = b1.weight().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
        assert_eq!(a.num_params(), 4 * 5 + 5 + 2 * 2 + 2);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let dev = Device::Cpu;
        let store = ParamStore::new(1);
        let vb = store.var_builder(DType::F64, &dev);
        let conv = DepthwiseConv3x3::new(3, vb.pp("dw")).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap();
        let ours = conv.forward(&x).unwrap();
        let kernel = conv.weight.reshape((3, 1, 3, 3)).unwrap();
        let reference = x
            .conv2d(&kernel, 1, 1, 1, 3)
            .unwrap()
            .broadcast_add(&conv.bias.reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        let diff: f64 = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[0.5f64, f64::NEG_INFINITY, 1.0]], &dev).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        assert_eq!(s[0][1], 0.0);
        assert!((s[0][0] + s[0][2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op() {
        let dev = Device::Cpu;
        let store = ParamStore::new(0);
        let vb = store.var_builder(DType::F64, &dev);
        let lin = candle_nn::linear(3, 1, vb).unwrap();
        let before = store.tensors();
        let mut opt = Adam::new(store.vars(), AdamParams::with_lr(0.0)).unwrap();
        let x = Tensor::ones((4, 3), DType::F64, &dev).unwrap();
        let loss = lin.forward(&x).unwrap().sqr().unwrap().mean_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        for (k, t) in store.tensors() {
            let d: f64 = (t - &before[&k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert_eq!(d, 0.0);
        }
    }
}

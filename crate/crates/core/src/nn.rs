//! Minimal parameter store and layers on top of candle tensors.
//!
//! Parameters are initialised from a seeded generator rather than the
//! device RNG so that two runs with the same seed start from bit-identical
//! weights.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub struct ParamStore {
    entries: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            entries: Vec::new(),
            rng: seed::rng(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.push(name, t)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.push(name, t)
    }

    fn push(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let v = Var::from_tensor(&t)?;
        self.entries.push((name.to_string(), v.clone()));
        Ok(v)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of all parameters, converted to f32.
    pub fn export(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().to_dtype(DType::F32)?.copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match.
    pub fn import(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, var) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[out_c, in_c, kernel, kernel], bound)?;
        let bias = ps.zeros(&format!("{name}.bias"), &[out_c])?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_d: usize, out_d: usize) -> Result<Self> {
        let bound = 1.0 / (in_d as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[out_d, in_d], bound)?;
        let bias = ps.zeros(&format!("{name}.bias"), &[out_d])?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())
    }
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.silu()
}

/// Softmax over the last axis built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Adds a leading batch axis to a rank-3 tensor; rank-4 input passes through.
pub(crate) fn as_batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        3 => Ok((x.unsqueeze(0)?, true)),
        4 => Ok((x.clone(), false)),
        r => Err(Error::Shape(format!(
            "expected a C×H×W or B×C×H×W tensor, got rank {r}"
        ))),
    }
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Numerical(format!("{what} contains non-finite values")));
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    step: usize,
    loss_log: Vec<f32>,
}

/// Named tensors plus a JSON header (kind, config, step count, loss log),
/// stored as a single safetensors container.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: usize,
    pub loss_log: Vec<f32>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            loss_log: self.loss_log.clone(),
        };
        // a single metadata key keeps the serialised bytes independent of
        // hash-map iteration order
        let meta = HashMap::from([("header".to_string(), serde_json::to_string(&header)?)]);
        let tensors: Vec<(&str, Tensor)> = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.as_str(), t.to_dtype(DType::F32)?.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("header"))
            .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header_json)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }
        let loaded = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        Ok(Self {
            kind: header.kind,
            config: header.config,
            step: header.step,
            loss_log: header.loss_log,
            tensors: loaded.into_iter().collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::rgbd::ensure_parent(path)?;
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

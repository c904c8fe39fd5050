//! Named parameter storage with seeded initialization and safetensors
//! checkpoints carrying a JSON metadata header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Glorot/Xavier uniform over `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { fan_in: usize, fan_out: usize },
}

enum Source {
    Fresh(ChaCha8Rng),
    Loaded(HashMap<String, Tensor>),
}

/// Owns every tensor a network needs: trainable weights and non-trainable
/// buffers (batch-norm running statistics).
pub struct ParamStore {
    dtype: DType,
    device: Device,
    frozen: bool,
    source: Source,
    trainable: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    /// Empty store whose parameters are drawn from a ChaCha8 stream seeded by `seed`.
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            frozen: false,
            source: Source::Fresh(ChaCha8Rng::seed_from_u64(seed)),
            trainable: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Store that serves previously saved tensors. Call [`ParamStore::finish_loading`]
    /// after building the network to reject unused entries.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            frozen: false,
            source: Source::Loaded(tensors),
            trainable: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Parameters handed out after this call are detached from autograd.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn materialize(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match &mut self.source {
            Source::Loaded(map) => {
                let t = map
                    .remove(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                Ok(t.to_dtype(self.dtype)?.to_device(&self.device)?)
            }
            Source::Fresh(rng) => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal { std } => {
                        let dist = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                    Init::GlorotUniform { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                    }
                };
                Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
            }
        }
    }

    /// A trainable parameter.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.trainable.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&self.materialize(name, shape, init)?)?;
        let t = if self.frozen { var.as_tensor().detach() } else { var.as_tensor().clone() };
        self.trainable.insert(name.to_string(), var);
        Ok(t)
    }

    /// A non-trainable buffer updated in place.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.trainable.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&self.materialize(name, shape, init)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Errors if a loaded checkpoint carried tensors the network never asked for.
    pub fn finish_loading(&mut self) -> Result<()> {
        if let Source::Loaded(map) = &self.source {
            if let Some(name) = map.keys().next() {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}` in checkpoint")));
            }
        }
        Ok(())
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.values().cloned().collect()
    }

    pub fn trainable(&self) -> &BTreeMap<String, Var> {
        &self.trainable
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable.values().map(|v| v.elem_count()).sum()
    }

    /// All tensors (trainable and buffers), sorted by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }
}

/// SHA-256 over a kind tag, an architecture description and the sorted
/// `(name, shape)` list of a tensor set.
pub fn architecture_hash<'a>(
    kind: &str,
    arch_json: &str,
    shapes: impl IntoIterator<Item = (&'a str, &'a [usize])>,
) -> String {
    let mut shapes: Vec<_> = shapes.into_iter().collect();
    shapes.sort();
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(arch_json.as_bytes());
    for (name, shape) in shapes {
        h.update([0]);
        h.update(name.as_bytes());
        h.update(format!("{shape:?}").as_bytes());
    }
    hex::encode(h.finalize())
}

fn tensor_bytes(t: &Tensor) -> Result<(safetensors::Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            safetensors::Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            safetensors::Dtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

/// Writes tensors plus string metadata atomically (temp file, then rename).
pub fn save_tensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let encoded = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.dims().to_vec(), tensor_bytes(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let views = encoded
        .iter()
        .map(|(k, shape, (dt, bytes))| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (k.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(metadata))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

/// Reads every tensor and the metadata map of a safetensors file.
pub fn load_tensors(
    path: &Path,
    device: &Device,
) -> Result<(HashMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let ckpt = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(ckpt)?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&bytes).map_err(ckpt)?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            safetensors::Dtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            safetensors::Dtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?} for `{name}`"))),
        };
        out.insert(name, t);
    }
    Ok((out, metadata))
}

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::rng::PipelineRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// Running statistic; saved with the model but never optimized.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub kind: ParamKind,
}

/// Flat registry of every tensor a model owns, addressed by id or by
/// dotted name (`encoder.layer4.0.conv1.weight`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Kaiming normal with the given fan (fan-out for convolutions).
    KaimingNormal {
        fan: usize,
    },
    Uniform {
        bound: f32,
    },
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], kind: ParamKind, init: Init, rng: &mut PipelineRng) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let value: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingNormal { fan } => {
                let std = (2.0 / fan as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng) as f32).collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        };
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            value,
            kind,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of optimizable weights whose name starts with any of `prefixes`.
    pub fn weights_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight && prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn save_safetensors(&self, path: &Path, metadata: Option<HashMap<String, String>>) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|p| {
                let b = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
                (p.name.clone(), b, p.shape.clone())
            })
            .collect();
        let views: Vec<(String, TensorView<'_>)> = bytes
            .iter()
            .map(|(n, b, s)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F32, s.clone(), b).expect("consistent view"),
                )
            })
            .collect();
        let data = safetensors::serialize(views, metadata).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, data).map_err(|e| Error::io(path, e))
    }

    /// Header metadata of a safetensors file.
    pub fn read_safetensors_metadata(path: &Path) -> Result<HashMap<String, String>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(meta.metadata().clone().unwrap_or_default())
    }

    /// Overwrites values of parameters named in the file. With `prefix`,
    /// only file tensors under that prefix are read and it must match
    /// every store parameter under the same prefix.
    pub fn load_safetensors(&mut self, path: &Path, prefix: Option<&str>) -> Result<usize> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut loaded = 0;
        for (name, view) in st.tensors() {
            if prefix.is_some_and(|pre| !name.starts_with(pre)) {
                continue;
            }
            let Some(&i) = self.index.get(&name) else {
                return Err(Error::format(path, format!("unexpected tensor {name}")));
            };
            let p = &mut self.params[i];
            if view.dtype() != Dtype::F32 || view.shape() != p.shape.as_slice() {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor {name}: expected f32 {:?}, found {:?} {:?}",
                        p.shape,
                        view.dtype(),
                        view.shape()
                    ),
                ));
            }
            for (v, chunk) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
                *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            loaded += 1;
        }
        let expected = self
            .params
            .iter()
            .filter(|p| prefix.is_none_or(|pre| p.name.starts_with(pre)))
            .count();
        if loaded != expected {
            return Err(Error::format(
                path,
                format!("checkpoint holds {loaded} of {expected} tensors"),
            ));
        }
        Ok(loaded)
    }

    /// Copies values of every parameter under `prefix` from another store.
    pub fn copy_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Config(format!("source model lacks {}", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Config(format!("shape mismatch for {}", p.name)));
            }
            p.value.copy_from_slice(&src.value);
            n += 1;
        }
        Ok(n)
    }
}

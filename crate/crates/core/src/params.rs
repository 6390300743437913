//! Named parameter tensors and their on-disk format.
//!
//! On disk a parameter set is a directory holding `manifest.json` (one entry
//! per tensor: name, shape, dtype, byte offset) and `params.bin`, the
//! concatenated little-endian `f32` data. Extra metadata (a model config) can
//! ride along in the manifest under `"config"`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "cops-params-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values from `other`, which must hold exactly the same names
    /// and shapes (order may differ).
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::contract(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::contract(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Parameters bound to a tape, addressable by [`ParamId`].
pub struct Bound<'t, T: Real> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps variables already on a tape, in store order. Panics if empty.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        let tape = vars.first().expect("at least one bound variable").tape();
        Bound { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients of every bound parameter, in store order.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

// ── initialization ───────────────────────────────────────────────────

/// Seeded initializer shared by all modules.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| {
            if bound == 0.0 {
                T::zero()
            } else {
                T::of(rng.random_range(-bound..bound))
            }
        })
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(mean + std * z)
        })
    }

    pub fn gamma<T: Real>(&mut self, shape: &[usize], alpha: f64, beta: f64) -> Tensor<T> {
        let dist = Gamma::new(alpha, 1.0 / beta).expect("valid gamma parameters");
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| T::of(dist.sample(rng)))
    }

    /// Uniform in ±1/√fan_in.
    pub fn linear<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> (Tensor<T>, Tensor<T>) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (self.uniform(&[fan_in, fan_out], bound), self.uniform(&[fan_out], bound))
    }
}

// ── serialization ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Writes `store` as float32 into `dir` (created if needed).
pub fn save<T: Real>(dir: &Path, store: &ParamStore<T>, config: Option<serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            blob.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: BLOB.into(),
        tensors,
        config,
    };
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

/// Reads a parameter directory written by [`save`].
pub fn load(dir: &Path) -> Result<(ParamStore<f32>, Option<serde_json::Value>)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Format {
            what: "parameter manifest",
            detail: format!("unknown format {:?}", manifest.format),
        });
    }
    let bpath = dir.join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Format {
                what: "parameter manifest",
                detail: format!("{}: unsupported dtype {}", e.name, e.dtype),
            });
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = blob.get(start..start + 4 * n).ok_or_else(|| Error::Format {
            what: "parameter blob",
            detail: format!("{} extends past end of {}", e.name, bpath.display()),
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((store, manifest.config))
}

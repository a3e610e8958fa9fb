//! Named parameter tensors, their binding onto a [`Tape`], the Adam
//! optimizer and safetensors persistence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F = f32> {
    tensors: BTreeMap<String, ArrayD<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<F>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::from_f64(x.to_f64()))))
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }
}

impl<F> FromIterator<(String, ArrayD<F>)> for ParamStore<F> {
    fn from_iter<I: IntoIterator<Item = (String, ArrayD<F>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

impl<F> IntoIterator for ParamStore<F> {
    type Item = (String, ArrayD<F>);
    type IntoIter = std::collections::btree_map::IntoIter<String, ArrayD<F>>;
    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}

/// One forward pass: a tape plus the parameters bound onto it on first use.
pub struct Graph<'s, F: Float> {
    pub tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: BTreeMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
}

impl<'s, F: Float> Graph<'s, F> {
    /// Every parameter is differentiable.
    pub fn training(store: &'s ParamStore<F>) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// No parameter is differentiable.
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self::with_trainable(store, |_| false)
    }

    pub fn with_trainable(store: &'s ParamStore<F>, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self { tape: Tape::new(), store, bound: BTreeMap::new(), trainable: Box::new(trainable) }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) { self.tape.param(value) } else { self.tape.constant(value) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to a value already on the tape (used by gradient checks).
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Gradients of `root` for every differentiable parameter that was used.
    pub fn gradients(&self, root: Var) -> BTreeMap<String, ArrayD<F>> {
        let mut grads = self.tape.backward(root);
        self.bound
            .iter()
            .filter_map(|(name, v)| grads.remove(*v).map(|g| (name.clone(), g)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: ParamStore<f32>,
    v: ParamStore<f32>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the (pre-clip) global gradient norm.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, ArrayD<f32>>) -> Result<f64> {
        let norm = grads.values().flat_map(|g| g.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = match self.config.grad_clip {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps * bc2.sqrt()) as f32;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(crate::error::dim(format!("gradient for `{name}` has shape {:?}", g.shape())));
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), ArrayD::zeros(p.raw_dim()));
                self.v.insert(name.clone(), ArrayD::zeros(p.raw_dim()));
            }
            let m = self.m.get_mut(name)?;
            Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g * clip);
            let v = self.v.get_mut(name)?;
            Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * (g * clip) * (g * clip));
            let (m, v) = (self.m.get(name)?, self.v.get(name)?);
            Zip::from(p).and(m).and(v).for_each(|p, &m, &v| *p -= step_size * m / (v.sqrt() + eps));
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = BTreeMap::new();
        for (k, t) in self.m.iter() {
            all.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in self.v.iter() {
            all.insert(format!("v.{k}"), t.clone());
        }
        let meta = BTreeMap::from([("step".to_string(), self.step.to_string())]);
        save_tensors(path, &all, Some(meta))
    }

    pub fn load(config: AdamConfig, path: &Path) -> Result<Self> {
        let (tensors, meta) = load_tensors_with_metadata(path)?;
        let step = meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("optimizer state has no step".into()))?;
        let mut adam = Adam::new(config);
        adam.step = step;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                adam.m.insert(name, t);
            } else if let Some(name) = k.strip_prefix("v.") {
                adam.v.insert(name, t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{k}`")));
            }
        }
        Ok(adam)
    }
}

fn f32_bytes(t: &ArrayD<f32>) -> Vec<u8> {
    t.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Header key under which the metadata map is stored as one JSON object,
/// keeping the header byte-stable across runs.
const METADATA_KEY: &str = "neurodecode";

/// Writes float32 tensors (row-major) to a safetensors file.
pub fn save_tensors(
    path: &Path,
    tensors: &BTreeMap<String, ArrayD<f32>>,
    metadata: Option<BTreeMap<String, String>>,
) -> Result<()> {
    let metadata = metadata.map(|m| {
        HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&m).expect("string map serializes"))])
    });
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> =
        tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec(), f32_bytes(t))).collect();
    let views = bytes
        .iter()
        .map(|(k, shape, data)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), data)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, metadata, path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    Ok(load_tensors_with_metadata(path)?.0)
}

pub fn load_tensors_with_metadata(path: &Path) -> Result<(BTreeMap<String, ArrayD<f32>>, BTreeMap<String, String>)> {
    use crate::error::IoContext;
    let bytes = std::fs::read(path).at(path)?;
    let corrupt = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(corrupt)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(corrupt)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is not float32")));
        }
        let values: Vec<f32> =
            view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        out.insert(name, arr);
    }
    let meta = match meta.metadata().as_ref().and_then(|m| m.get(METADATA_KEY)) {
        Some(json) => serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("{}: metadata: {e}", path.display())))?,
        None => BTreeMap::new(),
    };
    Ok((out, meta))
}

//! Parcel tokenizer plus denoiser, with checkpoint persistence.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoiser_forward, init_denoiser, DenoiserConfig};
use crate::error::{dim, Error, Result};
use crate::params::{load_tensors_with_metadata, save_tensors, Graph, ParamStore};
use crate::parcel::{BrainSample, ParcelAtlas};
use crate::rng::{tagged, tags};
use crate::tokenizer;

pub const MODEL_FILE: &str = "model.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token embedding dimension `f`.
    pub token_dim: usize,
    /// One map shared by all parcels instead of one per parcel.
    pub shared_mapper: bool,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { token_dim: 768, shared_mapper: false, denoiser: DenoiserConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 {
            return Err(Error::Config { field: "model.token_dim".into(), reason: "must be positive".into() });
        }
        self.denoiser.validate()
    }
}

/// Parameters belonging to the conditioning pathway (tokenizer and
/// cross-attention), the only ones trained in adapter-only mode.
pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with(tokenizer::PREFIX) || name.starts_with("attn")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub parcel_ids: Vec<u32>,
    pub v_max: usize,
    pub params: ParamStore<f32>,
}

/// Noise prediction plus, when requested, per-layer attention
/// `[b * heads, q, p]`.
pub struct Prediction {
    pub eps: Array4<f32>,
    pub attention: Option<Vec<ArrayD<f32>>>,
}

impl Model {
    pub fn init(config: ModelConfig, atlas: &ParcelAtlas, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = tagged(seed, tags::INIT, 1);
        let mut params = ParamStore::new();
        tokenizer::init_maps(&mut params, atlas.len(), atlas.v_max(), config.token_dim, config.shared_mapper, &mut rng);
        init_denoiser(&mut params, &config.denoiser, config.token_dim, &mut rng)?;
        Ok(Self { config, parcel_ids: atlas.ids(), v_max: atlas.v_max(), params })
    }

    pub fn num_parcels(&self) -> usize {
        self.parcel_ids.len()
    }

    /// Fails unless `atlas` lists the model's parcels in the same order.
    pub fn check_atlas(&self, atlas: &ParcelAtlas) -> Result<()> {
        if atlas.ids() != self.parcel_ids || atlas.v_max() != self.v_max {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {} parcels (v_max {}), atlas has {} (v_max {})",
                self.parcel_ids.len(),
                self.v_max,
                atlas.len(),
                atlas.v_max()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, batch: &[BrainSample]) -> Result<Array3<f32>> {
        tokenizer::encode(&self.params, batch)
    }

    /// Runs the denoiser. `capture` only copies attention out of the graph.
    pub fn predict_noise(&self, x: &Array4<f32>, t: &[usize], tokens: &Array3<f32>, capture: bool) -> Result<Prediction> {
        let (b, p, f) = tokens.dim();
        if b != x.dim().0 || p != self.num_parcels() || f != self.config.token_dim {
            return Err(dim(format!("tokens {:?} for images {:?}", tokens.dim(), x.dim())));
        }
        let mut g = Graph::inference(&self.params);
        let xv = g.tape.constant(x.clone().into_dyn());
        let ev = g.tape.constant(tokens.clone().into_dyn());
        let out = denoiser_forward(&mut g, &self.config.denoiser, xv, t, ev)?;
        let eps = g.tape.value(out.eps).clone().into_dimensionality().unwrap();
        let attention = capture.then(|| out.attention.iter().map(|a| g.tape.value(*a).clone()).collect());
        Ok(Prediction { eps, attention })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: BTreeMap<String, ArrayD<f32>> = tokenizer::export_maps(&self.params, &self.parcel_ids)?;
        for (k, v) in self.params.iter() {
            if !k.starts_with(tokenizer::PREFIX) {
                tensors.insert(k.clone(), v.clone());
            }
        }
        let meta = BTreeMap::from([
            ("config".to_string(), serde_json::to_string(&self.config).expect("config serializes")),
            ("parcel_ids".to_string(), serde_json::to_string(&self.parcel_ids).expect("ids serialize")),
            ("v_max".to_string(), self.v_max.to_string()),
        ]);
        save_tensors(path, &tensors, Some(meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut tensors, meta) = load_tensors_with_metadata(path)?;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}` metadata", path.display())));
        let bad = |k: &str, e: String| Error::Checkpoint(format!("{}: bad `{k}` metadata: {e}", path.display()));
        let config: ModelConfig = serde_json::from_str(field("config")?).map_err(|e| bad("config", e.to_string()))?;
        let parcel_ids: Vec<u32> = serde_json::from_str(field("parcel_ids")?).map_err(|e| bad("parcel_ids", e.to_string()))?;
        let v_max: usize = field("v_max")?.parse().map_err(|e: std::num::ParseIntError| bad("v_max", e.to_string()))?;
        let mut params = ParamStore::new();
        tokenizer::import_maps(&mut tensors, &parcel_ids, &mut params)?;
        for (k, v) in tensors {
            params.insert(k, v);
        }
        let model = Self { config, parcel_ids, v_max, params };
        model.verify_structure()?;
        Ok(model)
    }

    /// Checks that the parameter set matches a fresh initialization of the
    /// same configuration.
    fn verify_structure(&self) -> Result<()> {
        let mut reference = ParamStore::new();
        let mut rng = tagged(0, tags::INIT, 1);
        tokenizer::init_maps(
            &mut reference,
            self.parcel_ids.len(),
            self.v_max,
            self.config.token_dim,
            self.config.shared_mapper,
            &mut rng,
        );
        init_denoiser(&mut reference, &self.config.denoiser, self.config.token_dim, &mut rng)?;
        for (k, v) in reference.iter() {
            let got = self.params.get(k)?;
            if got.shape() != v.shape() {
                return Err(Error::Checkpoint(format!("`{k}` has shape {:?}, expected {:?}", got.shape(), v.shape())));
            }
        }
        if reference.len() != self.params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected extra tensors".into()));
        }
        self.params.check_finite()
    }
}

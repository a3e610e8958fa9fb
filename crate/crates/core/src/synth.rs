//! Procedural shape scenes and a synthetic brain with a known linear encoding.
//!
//! Each scene is one solid shape on a flat background. Low-level attributes
//! (colour, position) are carried by pooled pixel features; the shape class
//! is a separate one-hot feature. Parcels are assigned one of three roles:
//! low-level parcels read only the pooled pixels, high-level parcels read only
//! the shape class, and noise parcels carry no signal at all.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::parcel::{average_repetitions, pad_parcel_responses, BrainSample, Hemisphere, Parcel, ParcelAtlas};
use crate::rng::{tagged, tags};

pub const IMAGE_SIZE: usize = 32;
pub const BACKGROUND: f32 = -0.8;
const RADIUS: f32 = 6.5;
const GRID: [f32; 3] = [8.0, 16.0, 24.0];
const POOL: usize = 4;

pub const LOW_LEVEL_LABEL: &str = "V1";
pub const HIGH_LEVEL_LABEL: &str = "LOC";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn class_index(self) -> usize {
        self as usize
    }

    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= (dy + r) / 1.8,
            ShapeKind::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
        }
    }
}

pub const PALETTE: [[f32; 3]; 6] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.9, -0.6],
    [-0.6, -0.6, 0.9],
    [0.9, 0.9, -0.6],
    [-0.6, 0.9, 0.9],
    [0.9, -0.6, 0.9],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: ShapeKind,
    pub color: usize,
    /// Cell of the 3x3 placement grid, row-major.
    pub cell: usize,
}

impl Scene {
    pub fn all() -> Vec<Scene> {
        let mut out = Vec::new();
        for shape in ShapeKind::ALL {
            for color in 0..PALETTE.len() {
                for cell in 0..9 {
                    out.push(Scene { shape, color, cell });
                }
            }
        }
        out
    }

    pub fn random(rng: &mut impl Rng) -> Scene {
        Scene {
            shape: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            color: rng.random_range(0..PALETTE.len()),
            cell: rng.random_range(0..9),
        }
    }

    pub fn render(&self) -> Image {
        let cx = GRID[self.cell % 3];
        let cy = GRID[self.cell / 3];
        let color = PALETTE[self.color];
        let mut img = Array3::from_elem((IMAGE_SIZE, IMAGE_SIZE, 3), BACKGROUND);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if self.shape.contains(dx, dy, RADIUS) {
                    for c in 0..3 {
                        img[[y, x, c]] = color[c];
                    }
                }
            }
        }
        img
    }

    /// Unnormalized encoding features: 4x4 average-pooled RGB followed by the
    /// one-hot shape class.
    pub fn raw_features(&self) -> Vec<f64> {
        let img = self.render();
        let cell = IMAGE_SIZE / POOL;
        let mut out = Vec::with_capacity(feature_dim());
        for py in 0..POOL {
            for px in 0..POOL {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for y in py * cell..(py + 1) * cell {
                        for x in px * cell..(px + 1) * cell {
                            acc += img[[y, x, c]] as f64;
                        }
                    }
                    out.push(acc / (cell * cell) as f64);
                }
            }
        }
        for s in ShapeKind::ALL {
            out.push(if s == self.shape { 1.0 } else { 0.0 });
        }
        out
    }
}

pub const fn low_level_dim() -> usize {
    POOL * POOL * 3
}

pub const fn feature_dim() -> usize {
    low_level_dim() + ShapeKind::ALL.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub id: String,
    pub index: u64,
    pub scene: Scene,
}

/// `n` random scenes; stimulus `i` gets index `offset + i`.
pub fn random_stimuli(n: usize, seed: u64, offset: u64) -> Vec<Stimulus> {
    (0..n as u64)
        .map(|i| {
            let index = offset + i;
            let mut rng = tagged(seed, tags::SCENES, index);
            Stimulus { id: format!("stim{index:05}"), index, scene: Scene::random(&mut rng) }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParcelRole {
    LowLevel,
    HighLevel,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticAtlasConfig {
    pub parcels_per_hemisphere: usize,
    pub low_level_per_hemisphere: usize,
    pub high_level_per_hemisphere: usize,
    pub min_vertices: usize,
    pub max_vertices: usize,
}

impl Default for SyntheticAtlasConfig {
    fn default() -> Self {
        Self {
            parcels_per_hemisphere: 20,
            low_level_per_hemisphere: 4,
            high_level_per_hemisphere: 4,
            min_vertices: 4,
            max_vertices: 12,
        }
    }
}

/// Ground-truth linear encoding from scene features to vertex responses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticEncodingSpec {
    pub image_feature_dim: usize,
    /// Per parcel id, a `vertex_count x image_feature_dim` weight matrix.
    pub weights: BTreeMap<u32, Array2<f64>>,
    pub roles: BTreeMap<u32, ParcelRole>,
    pub noise_std: f64,
    pub informative_parcel_ids: BTreeSet<u32>,
    pub seed: u64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl SyntheticEncodingSpec {
    /// Standardized features of a scene.
    pub fn features(&self, scene: &Scene) -> Vec<f64> {
        scene
            .raw_features()
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Noise-free responses of one parcel.
    pub fn signal(&self, parcel_id: u32, features: &[f64]) -> Vec<f64> {
        match self.weights.get(&parcel_id) {
            Some(w) if self.informative_parcel_ids.contains(&parcel_id) => {
                w.rows().into_iter().map(|row| row.iter().zip(features).map(|(a, b)| a * b).sum()).collect()
            }
            Some(w) => vec![0.0; w.nrows()],
            None => Vec::new(),
        }
    }

    pub fn parcels_with_role(&self, role: ParcelRole) -> Vec<u32> {
        self.roles.iter().filter(|(_, r)| **r == role).map(|(id, _)| *id).collect()
    }
}

/// Builds a labelled atlas together with its ground-truth encoding.
///
/// Informative parcels carry their analytic SNR (signal variance over all
/// scenes divided by noise variance, averaged over vertices); noise parcels
/// carry SNR 0.
pub fn synthetic_brain(
    cfg: &SyntheticAtlasConfig,
    noise_std: f64,
    seed: u64,
) -> Result<(ParcelAtlas, SyntheticEncodingSpec)> {
    if cfg.low_level_per_hemisphere + cfg.high_level_per_hemisphere > cfg.parcels_per_hemisphere {
        return Err(invalid("more informative parcels than parcels per hemisphere"));
    }
    if cfg.min_vertices == 0 || cfg.min_vertices > cfg.max_vertices {
        return Err(invalid("vertex count range is empty"));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(invalid("noise_std must be finite and non-negative"));
    }
    let mut rng = tagged(seed, tags::INIT, 0);

    let scenes = Scene::all();
    let raw: Vec<Vec<f64>> = scenes.iter().map(|s| s.raw_features()).collect();
    let d = feature_dim();
    let n = raw.len() as f64;
    let feature_mean: Vec<f64> = (0..d).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let feature_std: Vec<f64> = (0..d)
        .map(|j| {
            let var = raw.iter().map(|r| (r[j] - feature_mean[j]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-6)
        })
        .collect();

    let mut parcels = Vec::new();
    let mut weights = BTreeMap::new();
    let mut roles = BTreeMap::new();
    let mut informative = BTreeSet::new();
    let low = low_level_dim();
    for (h, hemi) in [Hemisphere::Left, Hemisphere::Right].into_iter().enumerate() {
        let mut side_roles = vec![ParcelRole::Noise; cfg.parcels_per_hemisphere];
        for r in side_roles.iter_mut().take(cfg.low_level_per_hemisphere) {
            *r = ParcelRole::LowLevel;
        }
        for r in side_roles
            .iter_mut()
            .skip(cfg.low_level_per_hemisphere)
            .take(cfg.high_level_per_hemisphere)
        {
            *r = ParcelRole::HighLevel;
        }
        side_roles.shuffle(&mut rng);
        for (i, role) in side_roles.into_iter().enumerate() {
            let id = (h * cfg.parcels_per_hemisphere + i) as u32;
            let vertex_count = rng.random_range(cfg.min_vertices..=cfg.max_vertices);
            let (cols, label) = match role {
                ParcelRole::LowLevel => (0..low, Some(LOW_LEVEL_LABEL)),
                ParcelRole::HighLevel => (low..d, Some(HIGH_LEVEL_LABEL)),
                ParcelRole::Noise => (0..0, None),
            };
            let std = if cols.is_empty() { 0.0 } else { (1.0 / cols.len() as f64).sqrt() };
            let mut w = Array2::<f64>::zeros((vertex_count, d));
            if !cols.is_empty() {
                let normal = Normal::new(0.0, std).unwrap();
                for v in 0..vertex_count {
                    for j in cols.clone() {
                        w[[v, j]] = normal.sample(&mut rng);
                    }
                }
                informative.insert(id);
            }
            weights.insert(id, w);
            roles.insert(id, role);
            parcels.push(Parcel {
                id,
                hemisphere: hemi,
                vertex_count,
                snr: 0.0,
                roi_label: label.map(str::to_string),
            });
        }
    }

    let mut spec = SyntheticEncodingSpec {
        image_feature_dim: d,
        weights,
        roles,
        noise_std,
        informative_parcel_ids: informative,
        seed,
        feature_mean,
        feature_std,
    };

    let feats: Vec<Vec<f64>> = scenes.iter().map(|s| spec.features(s)).collect();
    for p in parcels.iter_mut() {
        if !spec.informative_parcel_ids.contains(&p.id) {
            continue;
        }
        let signals: Vec<Vec<f64>> = feats.iter().map(|f| spec.signal(p.id, f)).collect();
        let mut total = 0.0;
        for v in 0..p.vertex_count {
            let mean = signals.iter().map(|s| s[v]).sum::<f64>() / n;
            let var = signals.iter().map(|s| (s[v] - mean).powi(2)).sum::<f64>() / n;
            total += var;
        }
        let var = total / p.vertex_count as f64;
        p.snr = if noise_std > 0.0 { var / (noise_std * noise_std) } else { 1e6 };
    }
    spec.noise_std = noise_std;
    Ok((ParcelAtlas::new(parcels)?, spec))
}

/// Serializable description of what generated a synthetic dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub stimuli: Vec<Stimulus>,
    pub informative_parcel_ids: BTreeSet<u32>,
    pub roles: BTreeMap<u32, ParcelRole>,
    pub noise_std: f64,
    pub repetitions: usize,
}

/// Simulates responses of `atlas` (any subset of the spec's parcels) to each
/// stimulus, averaging `repetitions` independent noisy measurements.
///
/// Stimulus `s` draws its noise from a stream keyed by `(spec.seed, s.index)`,
/// so results do not depend on batch composition.
pub fn generate_synthetic_dataset(
    spec: &SyntheticEncodingSpec,
    atlas: &ParcelAtlas,
    stimuli: &[Stimulus],
    repetitions: usize,
) -> Result<(Vec<BrainSample>, GroundTruth)> {
    if stimuli.is_empty() {
        return Err(invalid("no stimuli to simulate"));
    }
    if repetitions == 0 {
        return Err(invalid("repetitions must be at least 1"));
    }
    for p in atlas.parcels() {
        match spec.weights.get(&p.id) {
            Some(w) if w.nrows() == p.vertex_count => {}
            _ => return Err(invalid(format!("parcel {} is not part of the synthetic encoding", p.id))),
        }
    }
    let mut samples = Vec::with_capacity(stimuli.len());
    for stim in stimuli {
        let mut rng = tagged(spec.seed, tags::DATA, stim.index);
        let feats = spec.features(&stim.scene);
        let signals: Vec<Vec<f64>> = atlas.parcels().iter().map(|p| spec.signal(p.id, &feats)).collect();
        let mut reps = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let raw: Vec<Vec<f32>> = signals
                .iter()
                .map(|sig| {
                    sig.iter()
                        .map(|&s| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (s + spec.noise_std * z) as f32
                        })
                        .collect()
                })
                .collect();
            reps.push(pad_parcel_responses(&stim.id, &raw, atlas)?);
        }
        samples.push(average_repetitions(&reps)?);
    }
    let truth = GroundTruth {
        stimuli: stimuli.to_vec(),
        informative_parcel_ids: spec.informative_parcel_ids.clone(),
        roles: spec.roles.clone(),
        noise_std: spec.noise_std,
        repetitions,
    };
    Ok((samples, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parcel::select_top_k_parcels;

    fn brain(noise: f64) -> (ParcelAtlas, SyntheticEncodingSpec) {
        synthetic_brain(&SyntheticAtlasConfig::default(), noise, 11).unwrap()
    }

    #[test]
    fn scenes_render_distinctly() {
        let all = Scene::all();
        assert_eq!(all.len(), 4 * 6 * 9);
        let imgs: Vec<Image> = all.iter().map(|s| s.render()).collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(imgs[i], imgs[j], "{:?} vs {:?}", all[i], all[j]);
            }
        }
    }

    #[test]
    fn zero_noise_reproduces_the_linear_map() {
        let (atlas, spec) = brain(0.0);
        let stimuli = random_stimuli(5, 3, 0);
        let (samples, _) = generate_synthetic_dataset(&spec, &atlas, &stimuli, 1).unwrap();
        let id = *spec.informative_parcel_ids.iter().next().unwrap();
        let row = atlas.index_of(id).unwrap();
        for (s, stim) in samples.iter().zip(&stimuli) {
            let expect: Vec<f32> = spec.signal(id, &spec.features(&stim.scene)).iter().map(|&v| v as f32).collect();
            assert_eq!(s.unpad()[row], expect);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (atlas, spec) = brain(0.7);
        let stimuli = random_stimuli(20, 9, 100);
        let (a, _) = generate_synthetic_dataset(&spec, &atlas, &stimuli, 2).unwrap();
        let (b, _) = generate_synthetic_dataset(&spec, &atlas, &stimuli, 2).unwrap();
        assert_eq!(a, b);
        // stream per stimulus: a subset reproduces the same rows
        let (c, _) = generate_synthetic_dataset(&spec, &atlas, &stimuli[5..8], 2).unwrap();
        assert_eq!(&a[5..8], &c[..]);
    }

    #[test]
    fn noise_parcels_have_unit_variance() {
        let (atlas, spec) = brain(1.0);
        let noise_id = spec.parcels_with_role(ParcelRole::Noise)[0];
        let row = atlas.index_of(noise_id).unwrap();
        let stimuli = random_stimuli(10_000, 5, 0);
        let (samples, _) = generate_synthetic_dataset(&spec, &atlas, &stimuli, 1).unwrap();
        let n = samples.len() as f64;
        for v in 0..atlas.parcels()[row].vertex_count {
            let vals: Vec<f64> = samples.iter().map(|s| s.responses()[[row, v]] as f64).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var - 1.0).abs() < 0.05, "vertex {v}: variance {var}");
        }
    }

    #[test]
    fn informative_parcels_outrank_noise_parcels() {
        let (atlas, spec) = brain(1.0);
        let sel = select_top_k_parcels(&atlas, 8).unwrap();
        for id in sel.ids() {
            assert!(spec.informative_parcel_ids.contains(&id));
        }
        assert!(atlas.roi_groups().contains_key(LOW_LEVEL_LABEL));
        assert!(atlas.roi_groups().contains_key(HIGH_LEVEL_LABEL));
    }
}

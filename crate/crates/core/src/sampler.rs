//! Deterministic reverse diffusion with attention capture, seed-indexed
//! candidates and ROI-masked inference.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Error, Result};
use crate::image::Image;
use crate::model::Model;
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;
use crate::tokenizer::DropoutMask;
use crate::trace::AttentionTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
    pub candidates_per_sample: usize,
    /// Parcel ids whose tokens are zeroed before conditioning.
    pub roi_mask: Option<Vec<u32>>,
    /// Classifier-free guidance scale; `None` disables the unconditional pass.
    pub guidance_scale: Option<f32>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, seed: 0, candidates_per_sample: 8, roi_mask: None, guidance_scale: None }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, reason: &str| Error::Config { field: format!("sample.{f}"), reason: reason.into() };
        if self.steps == 0 {
            return Err(field("steps", "must be at least 1"));
        }
        if self.candidates_per_sample == 0 {
            return Err(field("candidates_per_sample", "must be at least 1"));
        }
        if self.guidance_scale.is_some_and(|g| !g.is_finite()) {
            return Err(field("guidance_scale", "must be finite"));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps `T-1, T-1-T/S, ...`, strictly decreasing.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(invalid(format!("cannot take {steps} sampling steps from a {total}-step schedule")));
    }
    Ok((0..steps).map(|s| total - 1 - s * total / steps).collect())
}

/// Standard-normal starting image for `seed`.
pub fn initial_noise(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((size, size, 3), || StandardNormal.sample(&mut rng))
}

/// One deterministic reverse update from `alpha_bar` to `alpha_bar_prev`.
pub fn ddim_update(x: &mut [f32], eps: &[f32], alpha_bar: f64, alpha_bar_prev: f64) {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    for (xv, &e) in x.iter_mut().zip(eps) {
        let x0 = (*xv as f64 - sn * e as f64) / sa;
        *xv = (pa * x0 + pn * e as f64) as f32;
    }
}

/// Result of one sampling run.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub image: Image,
    pub trace: Option<AttentionTrace>,
    pub seed: u64,
}

/// Zeroes the tokens of the listed parcels in `[n, p, f]` embeddings.
pub fn mask_tokens(model: &Model, tokens: &Array3<f32>, parcel_ids: &[u32]) -> Result<Array3<f32>> {
    let rows = parcel_ids
        .iter()
        .map(|id| {
            model
                .parcel_ids
                .iter()
                .position(|p| p == id)
                .ok_or_else(|| invalid(format!("parcel {id} is not in the model's atlas")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (n, p, _) = tokens.dim();
    DropoutMask::zero_rows(n, p, &rows)?.apply(tokens)
}

/// Samples one image per `(tokens[i], seeds[i])` pair in a single batch.
/// Each item's result is independent of the rest of the batch.
pub fn sample_batch(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &Array3<f32>,
    seeds: &[u64],
    config: &SampleConfig,
    capture: bool,
) -> Result<Vec<Sampled>> {
    config.validate()?;
    let n = tokens.dim().0;
    if seeds.len() != n {
        return Err(dim(format!("{} seeds for {n} token sets", seeds.len())));
    }
    let tokens = match &config.roi_mask {
        Some(ids) => mask_tokens(model, tokens, ids)?,
        None => tokens.clone(),
    };
    let unconditional = config.guidance_scale.map(|_| Array3::<f32>::zeros(tokens.raw_dim()));
    let size = model.config.denoiser.image_size;
    let heads = model.config.denoiser.heads;
    let grids = model.config.denoiser.layer_grids();
    let mut x = Array4::<f32>::zeros((n, size, size, 3));
    for (i, &seed) in seeds.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&initial_noise(seed, size));
    }
    let mut traces = if capture {
        let p = model.num_parcels();
        (0..n).map(|_| AttentionTrace::new(p, heads, grids.clone()).map(Some)).collect::<Result<Vec<_>>>()?
    } else {
        vec![None; n]
    };
    let timesteps = sampling_timesteps(schedule.timesteps(), config.steps)?;
    for (s, &t) in timesteps.iter().enumerate() {
        let ts = vec![t; n];
        let pred = model.predict_noise(&x, &ts, &tokens, capture)?;
        let mut eps = pred.eps;
        if let (Some(scale), Some(uncond)) = (config.guidance_scale, &unconditional) {
            let base = model.predict_noise(&x, &ts, uncond, false)?.eps;
            eps.zip_mut_with(&base, |c, &u| *c = u + scale * (*c - u));
        }
        if let Some(layers) = pred.attention {
            for (l, a) in layers.iter().enumerate() {
                let a = a.view().into_dimensionality::<ndarray::Ix3>().map_err(|e| dim(e.to_string()))?;
                for (i, trace) in traces.iter_mut().enumerate() {
                    let trace = trace.as_mut().expect("capture enabled");
                    for h in 0..heads {
                        trace.insert(t, l, h, a.index_axis(Axis(0), i * heads + h).to_owned())?;
                    }
                }
            }
        }
        let alpha_bar = schedule.alpha_bar(t)?;
        let alpha_bar_prev = match timesteps.get(s + 1) {
            Some(&next) => schedule.alpha_bar(next)?,
            None => 1.0,
        };
        ddim_update(x.as_slice_mut().unwrap(), eps.as_slice().unwrap(), alpha_bar, alpha_bar_prev);
    }
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(seeds
        .iter()
        .zip(traces)
        .enumerate()
        .map(|(i, (&seed, trace))| Sampled { image: x.index_axis(Axis(0), i).to_owned(), trace, seed })
        .collect())
}

fn single(tokens: &Array2<f32>) -> Array3<f32> {
    tokens.clone().insert_axis(Axis(0))
}

/// Samples from `config.seed` with the full attention trace.
pub fn sample(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &Array2<f32>,
    config: &SampleConfig,
) -> Result<(Image, AttentionTrace)> {
    let mut out = sample_batch(model, schedule, &single(tokens), &[config.seed], config, true)?;
    let Sampled { image, trace, .. } = out.remove(0);
    Ok((image, trace.expect("capture enabled")))
}

/// Candidate seeds `derive_seed(seed, i)` for `i < candidates_per_sample`.
pub fn candidate_seeds(config: &SampleConfig) -> Vec<u64> {
    (0..config.candidates_per_sample as u64).map(|i| derive_seed(config.seed, i)).collect()
}

/// One candidate per derived seed, all conditioned on the same tokens.
pub fn generate_candidates(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &Array2<f32>,
    config: &SampleConfig,
    capture: bool,
) -> Result<Vec<Sampled>> {
    config.validate()?;
    let seeds = candidate_seeds(config);
    let batch = single(tokens).broadcast((seeds.len(), tokens.nrows(), tokens.ncols())).unwrap().to_owned();
    sample_batch(model, schedule, &batch, &seeds, config, capture)
}

/// Samples with the tokens of `roi_parcel_ids` zeroed.
pub fn sample_with_roi_mask(
    model: &Model,
    schedule: &NoiseSchedule,
    tokens: &Array2<f32>,
    roi_parcel_ids: &[u32],
    config: &SampleConfig,
) -> Result<Image> {
    let config = SampleConfig { roi_mask: Some(roi_parcel_ids.to_vec()), ..config.clone() };
    let mut out = sample_batch(model, schedule, &single(tokens), &[config.seed], &config, false)?;
    Ok(out.remove(0).image)
}

/// Rows `start..start + n` of `[b, p, f]` embeddings.
pub fn token_rows(tokens: &Array3<f32>, start: usize, n: usize) -> Array3<f32> {
    tokens.slice(s![start..start + n, .., ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::model::ModelConfig;
    use crate::schedule::ScheduleConfig;
    use crate::synth::{synthetic_brain, SyntheticAtlasConfig};

    fn fixture() -> (Model, NoiseSchedule, Array2<f32>) {
        let (atlas, _) = synthetic_brain(&SyntheticAtlasConfig::default(), 0.5, 1).unwrap();
        let config = ModelConfig {
            token_dim: 8,
            shared_mapper: false,
            denoiser: DenoiserConfig { image_size: 8, base_channels: 4, depth: 1, heads: 2, head_dim: 4, time_dim: 8 },
        };
        let mut model = Model::init(config, &atlas, 3).unwrap();
        model.params.insert("out.w", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[36, 3]), 0.02));
        let sched = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let tokens = Array2::from_shape_fn((atlas.len(), 8), |(i, j)| ((i * 3 + j) % 7) as f32 / 7.0 - 0.4);
        (model, sched, tokens)
    }

    #[test]
    fn timesteps_are_evenly_spaced_and_decreasing() {
        let ts = sampling_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(ts[1], 979);
        assert_eq!(*ts.last().unwrap(), 19);
        assert_eq!(sampling_timesteps(1000, 1).unwrap(), vec![999]);
        assert_eq!(sampling_timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        assert!(sampling_timesteps(10, 11).is_err());
        assert!(sampling_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_update_recovers_clean_image_at_the_last_step() {
        let x0 = [0.5f32, -0.25, 0.9];
        let eps = [0.3f32, -1.2, 0.7];
        let a = 0.6f64;
        let mut x: Vec<f32> =
            x0.iter().zip(&eps).map(|(&c, &e)| (a.sqrt() * c as f64 + (1.0 - a).sqrt() * e as f64) as f32).collect();
        ddim_update(&mut x, &eps, a, 1.0);
        for (got, want) in x.iter().zip(&x0) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn one_step_records_one_timestep() {
        let (model, sched, tokens) = fixture();
        let cfg = SampleConfig { steps: 1, ..Default::default() };
        let (image, trace) = sample(&model, &sched, &tokens, &cfg).unwrap();
        assert_eq!(image.dim(), (8, 8, 3));
        assert_eq!(trace.timesteps(), &[999]);
        assert_eq!(trace.len(), model.config.denoiser.num_layers() * 2);
        trace.validate().unwrap();
    }

    #[test]
    fn same_seed_gives_identical_images_and_full_traces() {
        let (model, sched, tokens) = fixture();
        let cfg = SampleConfig { steps: 5, seed: 11, ..Default::default() };
        let (a, ta) = sample(&model, &sched, &tokens, &cfg).unwrap();
        let (b, tb) = sample(&model, &sched, &tokens, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 5 * 3 * 2);
        ta.validate().unwrap();
        assert!(a.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn candidates_use_derived_seeds_and_match_single_runs() {
        let (model, sched, tokens) = fixture();
        let cfg = SampleConfig { steps: 3, seed: 5, candidates_per_sample: 4, ..Default::default() };
        let cands = generate_candidates(&model, &sched, &tokens, &cfg, false).unwrap();
        assert_eq!(cands.len(), 4);
        for (i, c) in cands.iter().enumerate() {
            assert_eq!(c.seed, derive_seed(5, i as u64));
            let alone = sample(&model, &sched, &tokens, &SampleConfig { seed: c.seed, ..cfg.clone() }).unwrap().0;
            assert_eq!(alone, c.image, "candidate {i} differs from its single run");
        }
        assert_ne!(cands[0].image, cands[1].image);
        let again = generate_candidates(&model, &sched, &tokens, &cfg, false).unwrap();
        assert!(cands.iter().zip(&again).all(|(a, b)| a.image == b.image));
        let one = generate_candidates(&model, &sched, &tokens, &SampleConfig { candidates_per_sample: 1, ..cfg.clone() }, false)
            .unwrap();
        assert_eq!(one[0].image, cands[0].image);
    }

    #[test]
    fn roi_masking_boundaries() {
        let (model, sched, tokens) = fixture();
        let cfg = SampleConfig { steps: 3, seed: 2, ..Default::default() };
        let plain = sample(&model, &sched, &tokens, &cfg).unwrap().0;
        assert_eq!(sample_with_roi_mask(&model, &sched, &tokens, &[], &cfg).unwrap(), plain);
        let all = sample_with_roi_mask(&model, &sched, &tokens, &model.parcel_ids.clone(), &cfg).unwrap();
        assert!(all.iter().all(|v| v.is_finite()));
        assert_ne!(all, plain);
        let err = sample_with_roi_mask(&model, &sched, &tokens, &[999_999], &cfg).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn masking_after_encoding_equals_encoding_masked_responses_without_bias() {
        let (atlas, spec) = synthetic_brain(&SyntheticAtlasConfig::default(), 0.5, 1).unwrap();
        let (mut model, _, _) = fixture();
        let bias = model.params.get(crate::tokenizer::BIAS).unwrap().clone();
        model.params.insert(crate::tokenizer::BIAS, bias.mapv(|_| 0.0));
        let stimuli = crate::synth::random_stimuli(2, 1, 0);
        let (samples, _) = crate::synth::generate_synthetic_dataset(&spec, &atlas, &stimuli, 1).unwrap();
        let ids: Vec<u32> = model.parcel_ids[..3].to_vec();
        let rows = atlas.indices_of(&ids).unwrap();
        let masked_after = mask_tokens(&model, &model.encode(&samples).unwrap(), &ids).unwrap();
        let zeroed: Vec<_> = samples.iter().map(|s| s.with_rows_zeroed(&rows)).collect();
        assert_eq!(masked_after, model.encode(&zeroed).unwrap());
    }

    #[test]
    fn guidance_with_unit_scale_matches_unguided() {
        let (model, sched, tokens) = fixture();
        let cfg = SampleConfig { steps: 3, seed: 9, ..Default::default() };
        let plain = sample(&model, &sched, &tokens, &cfg).unwrap().0;
        let guided = sample(&model, &sched, &tokens, &SampleConfig { guidance_scale: Some(1.0), ..cfg.clone() }).unwrap().0;
        for (a, b) in plain.iter().zip(guided.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        let strong = sample(&model, &sched, &tokens, &SampleConfig { guidance_scale: Some(3.0), ..cfg }).unwrap().0;
        assert_ne!(strong, plain);
    }
}

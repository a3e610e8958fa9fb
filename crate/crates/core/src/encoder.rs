//! Image-to-brain encoder: fixed random-convolution features with a ridge
//! read-out onto the concatenated valid vertices of the atlas.
//!
//! The encoder scores candidate reconstructions by how well their predicted
//! responses correlate with the measured ones.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array4, ArrayD};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Error, Result};
use crate::image::Image;
use crate::params::{load_tensors_with_metadata, save_tensors};
use crate::parcel::BrainSample;
use crate::rng::{tagged, tags};
use crate::stats::{mean, pearson};

pub const ENCODER_FILE: &str = "encoder.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of random filters; each yields two half-wave rectified maps.
    pub filters: usize,
    /// Odd filter side length.
    pub kernel: usize,
    /// Feature maps are average-pooled onto a `pool_grid x pool_grid` grid.
    pub pool_grid: usize,
    /// L2 penalty on the read-out, in units of standardized features.
    pub ridge_penalty: f64,
    /// Fraction of the pairs held out to report validation correlation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { filters: 16, kernel: 5, pool_grid: 4, ridge_penalty: 10.0, validation_fraction: 0.1, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, reason: &str| Error::Config { field: format!("encoder.{f}"), reason: reason.into() };
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(field("kernel", "must be a positive odd number"));
        }
        if self.pool_grid == 0 {
            return Err(field("pool_grid", "must be positive"));
        }
        if !(self.ridge_penalty.is_finite() && self.ridge_penalty >= 0.0) {
            return Err(field("ridge_penalty", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(field("validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrainEncoder {
    pub config: EncoderConfig,
    /// `[filters, kernel, kernel, 3]`, zero-mean per filter.
    filters: Array4<f32>,
    feature_mean: Array1<f32>,
    feature_scale: Array1<f32>,
    /// `[features, vertices]`.
    weights: Array2<f32>,
    target_mean: Array1<f32>,
}

/// A fitted encoder with its in-sample and held-out correlation.
#[derive(Clone, Debug)]
pub struct EncoderFit {
    pub encoder: BrainEncoder,
    pub train_correlation: f64,
    pub validation_correlation: Option<f64>,
    /// Vertices whose training targets are constant.
    pub constant_targets: usize,
}

fn random_filters(cfg: &EncoderConfig) -> Array4<f32> {
    let mut rng = tagged(cfg.seed, tags::ENCODER, 0);
    let k = cfg.kernel;
    let normal = Normal::new(0.0, 1.0 / ((k * k * 3) as f64).sqrt()).unwrap();
    let mut filters = Array4::from_shape_simple_fn((cfg.filters, k, k, 3), || normal.sample(&mut rng) as f32);
    for mut f in filters.outer_iter_mut() {
        let m = f.mean().unwrap_or(0.0);
        f.mapv_inplace(|v| v - m);
    }
    filters
}

/// Raw backbone features: pooled RGB followed by pooled rectified filter
/// responses, with edge-clamped borders.
fn backbone(filters: &Array4<f32>, grid: usize, img: &Image) -> Result<Vec<f64>> {
    let (h, w, c) = img.dim();
    if c != 3 || h < grid || w < grid {
        return Err(dim(format!("encoder expects an RGB image of at least {grid}x{grid}, got {:?}", img.dim())));
    }
    let cell = |y: usize, x: usize| (y * grid / h, x * grid / w);
    let mut counts = vec![0.0f64; grid * grid];
    for y in 0..h {
        for x in 0..w {
            let (gy, gx) = cell(y, x);
            counts[gy * grid + gx] += 1.0;
        }
    }
    let mut pixels = vec![0.0f64; grid * grid * 3];
    for y in 0..h {
        for x in 0..w {
            let (gy, gx) = cell(y, x);
            for ch in 0..3 {
                pixels[(gy * grid + gx) * 3 + ch] += img[[y, x, ch]] as f64;
            }
        }
    }
    for (i, v) in pixels.iter_mut().enumerate() {
        *v /= counts[i / 3];
    }
    let (nf, k) = (filters.dim().0, filters.dim().1);
    let r = (k / 2) as isize;
    let mut maps = vec![0.0f64; nf * 2 * grid * grid];
    let mut patch = vec![0.0f32; k * k * 3];
    for y in 0..h {
        for x in 0..w {
            for dy in 0..k {
                let sy = (y as isize + dy as isize - r).clamp(0, h as isize - 1) as usize;
                for dx in 0..k {
                    let sx = (x as isize + dx as isize - r).clamp(0, w as isize - 1) as usize;
                    for ch in 0..3 {
                        patch[(dy * k + dx) * 3 + ch] = img[[sy, sx, ch]];
                    }
                }
            }
            let (gy, gx) = cell(y, x);
            let g = gy * grid + gx;
            for (f, filt) in filters.outer_iter().enumerate() {
                let resp: f64 = filt.iter().zip(&patch).map(|(&a, &b)| a as f64 * b as f64).sum();
                maps[(2 * f) * grid * grid + g] += resp.max(0.0);
                maps[(2 * f + 1) * grid * grid + g] += (-resp).max(0.0);
            }
        }
    }
    for (i, v) in maps.iter_mut().enumerate() {
        *v /= counts[i % (grid * grid)];
    }
    pixels.extend(maps);
    Ok(pixels)
}

/// Ridge solution `W` of `min |X W - Y|^2 + penalty |W|^2`, via whichever of
/// the primal or dual systems is smaller.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, penalty: f64) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    let jitter = if penalty > 0.0 { 0.0 } else { 1e-10 };
    if d <= n {
        let mut gram = x.transpose() * x;
        for i in 0..d {
            gram[(i, i)] += penalty + jitter;
        }
        let chol = gram.cholesky().ok_or_else(|| invalid("ridge system is singular; increase the penalty"))?;
        Ok(chol.solve(&(x.transpose() * y)))
    } else {
        let mut gram = x * x.transpose();
        for i in 0..n {
            gram[(i, i)] += penalty + jitter;
        }
        let chol = gram.cholesky().ok_or_else(|| invalid("ridge system is singular; increase the penalty"))?;
        Ok(x.transpose() * chol.solve(y))
    }
}

impl BrainEncoder {
    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.target_mean.len()
    }

    /// Backbone features of one image (before standardization).
    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        backbone(&self.filters, self.config.pool_grid, img)
    }

    /// Predicted concatenated valid-vertex responses.
    pub fn predict(&self, img: &Image) -> Result<Vec<f64>> {
        let z = self.standardized(&self.features(img)?);
        let mut out: Vec<f64> = self.target_mean.iter().map(|&v| v as f64).collect();
        for (zi, row) in z.iter().zip(self.weights.rows()) {
            for (o, &w) in out.iter_mut().zip(row.iter()) {
                *o += zi * w as f64;
            }
        }
        Ok(out)
    }

    fn standardized(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(self.feature_mean.iter().zip(self.feature_scale.iter()))
            .map(|(&v, (&m, &s))| (v - m as f64) / s as f64)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = BTreeMap::from([
            ("filters".to_string(), self.filters.clone().into_dyn()),
            ("feature_mean".to_string(), self.feature_mean.clone().into_dyn()),
            ("feature_scale".to_string(), self.feature_scale.clone().into_dyn()),
            ("weights".to_string(), self.weights.clone().into_dyn()),
            ("target_mean".to_string(), self.target_mean.clone().into_dyn()),
        ]);
        let meta = BTreeMap::from([("config".to_string(), serde_json::to_string(&self.config).expect("config serializes"))]);
        save_tensors(path, &tensors, Some(meta))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut tensors, meta) = load_tensors_with_metadata(path)?;
        let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
        let config: EncoderConfig = serde_json::from_str(meta.get("config").ok_or_else(|| bad("missing config".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let mut take = |name: &str, rank: usize| -> Result<ArrayD<f32>> {
            let t = tensors.remove(name).ok_or_else(|| bad(format!("missing `{name}`")))?;
            if t.ndim() != rank {
                return Err(bad(format!("`{name}` has rank {}", t.ndim())));
            }
            Ok(t)
        };
        let filters = take("filters", 4)?.into_dimensionality().unwrap();
        let feature_mean: Array1<f32> = take("feature_mean", 1)?.into_dimensionality().unwrap();
        let feature_scale: Array1<f32> = take("feature_scale", 1)?.into_dimensionality().unwrap();
        let weights: Array2<f32> = take("weights", 2)?.into_dimensionality().unwrap();
        let target_mean: Array1<f32> = take("target_mean", 1)?.into_dimensionality().unwrap();
        let enc = Self { config, filters, feature_mean, feature_scale, weights, target_mean };
        let d = enc.config.pool_grid.pow(2) * (3 + 2 * enc.filters.dim().0);
        if enc.feature_mean.len() != d
            || enc.feature_scale.len() != d
            || enc.weights.dim() != (d, enc.target_mean.len())
            || enc.filters.dim().1 != enc.config.kernel
        {
            return Err(bad("tensor shapes are inconsistent with the config".into()));
        }
        Ok(enc)
    }
}

fn vertex_vector(s: &BrainSample) -> Vec<f64> {
    s.valid_vector().iter().map(|&v| v as f64).collect()
}

/// Mean per-sample correlation between predicted and measured responses.
fn mean_sample_correlation(enc: &BrainEncoder, images: &[Image], samples: &[BrainSample]) -> Result<f64> {
    let mut rs = Vec::with_capacity(images.len());
    for (img, s) in images.iter().zip(samples) {
        if let Some(r) = pearson(&enc.predict(img)?, &vertex_vector(s)) {
            rs.push(r);
        }
    }
    Ok(if rs.is_empty() { 0.0 } else { mean(&rs) })
}

fn fit_on(cfg: &EncoderConfig, features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(BrainEncoder, usize)> {
    let n = features.len();
    let d = features[0].len();
    let v = targets[0].len();
    let fmean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let fscale: Vec<f64> = (0..d)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - fmean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    // Round the standardization to the stored precision before fitting.
    let fmean: Vec<f64> = fmean.iter().map(|&m| m as f32 as f64).collect();
    let fscale: Vec<f64> = fscale.iter().map(|&s| s as f32 as f64).collect();
    let tmean: Vec<f64> = (0..v).map(|j| targets.iter().map(|t| t[j]).sum::<f64>() / n as f64).collect();
    let constant = (0..v).filter(|&j| targets.iter().all(|t| (t[j] - tmean[j]).abs() < 1e-12)).count();
    if constant > 0 {
        warn!("{constant} of {v} vertices have constant training targets; their correlation is undefined");
    }
    let x = DMatrix::from_fn(n, d, |i, j| (features[i][j] - fmean[j]) / fscale[j]);
    let y = DMatrix::from_fn(n, v, |i, j| targets[i][j] - tmean[j]);
    let w = ridge_solve(&x, &y, cfg.ridge_penalty)?;
    let enc = BrainEncoder {
        config: cfg.clone(),
        filters: random_filters(cfg),
        feature_mean: fmean.iter().map(|&m| m as f32).collect(),
        feature_scale: fscale.iter().map(|&s| s as f32).collect(),
        weights: Array2::from_shape_fn((d, v), |(i, j)| w[(i, j)] as f32),
        target_mean: tmean.iter().map(|&m| m as f32).collect(),
    };
    Ok((enc, constant))
}

/// Fits the read-out on all pairs; when `validation_fraction` leaves at least
/// one pair on each side, a separate fit on the leading pairs reports the
/// correlation on the held-out tail.
pub fn fit_encoder(images: &[Image], samples: &[BrainSample], config: &EncoderConfig) -> Result<EncoderFit> {
    config.validate()?;
    if images.len() != samples.len() {
        return Err(dim(format!("{} images but {} brain samples", images.len(), samples.len())));
    }
    if images.len() < 2 {
        return Err(invalid("fitting an encoder needs at least two pairs"));
    }
    let filters = random_filters(config);
    let features = images.iter().map(|img| backbone(&filters, config.pool_grid, img)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<f64>> = samples.iter().map(vertex_vector).collect();
    if targets.iter().any(|t| t.len() != targets[0].len()) {
        return Err(dim("brain samples have different valid-vertex counts"));
    }
    let n = images.len();
    let held = (config.validation_fraction * n as f64).round() as usize;
    let validation_correlation = if held >= 1 && held < n {
        let split = n - held;
        let (enc, _) = fit_on(config, &features[..split], &targets[..split])?;
        Some(mean_sample_correlation(&enc, &images[split..], &samples[split..])?)
    } else {
        None
    };
    let (encoder, constant_targets) = fit_on(config, &features, &targets)?;
    let train_correlation = mean_sample_correlation(&encoder, images, samples)?;
    Ok(EncoderFit { encoder, train_correlation, validation_correlation, constant_targets })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankedCandidate {
    pub index: usize,
    /// Pearson correlation with the measurement, `-inf` when undefined.
    pub score: f64,
}

/// Candidates in descending score order, ties broken by index.
pub fn rank_by_score(scores: &[f64]) -> Vec<RankedCandidate> {
    let mut ranked: Vec<RankedCandidate> =
        scores.iter().enumerate().map(|(index, &score)| RankedCandidate { index, score }).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    ranked
}

/// Scores each candidate by the correlation of its predicted responses with
/// `measured` over the concatenated valid vertices.
pub fn rank_candidates(encoder: &BrainEncoder, candidates: &[Image], measured: &BrainSample) -> Result<Vec<RankedCandidate>> {
    if candidates.is_empty() {
        return Err(invalid("no candidates to rank"));
    }
    let target = vertex_vector(measured);
    if target.len() != encoder.output_dim() {
        return Err(dim(format!("measurement has {} vertices, encoder predicts {}", target.len(), encoder.output_dim())));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (i, img) in candidates.iter().enumerate() {
        let score = pearson(&encoder.predict(img)?, &target).unwrap_or_else(|| {
            warn!("candidate {i} for {}: zero-variance prediction or measurement", measured.stimulus_id);
            f64::NEG_INFINITY
        });
        scores.push(score);
    }
    Ok(rank_by_score(&scores))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationPair {
    pub sample_id: String,
    /// Correlation of the decoded image's predicted response with the
    /// measurement; NaN when undefined.
    pub rho_decoded: f64,
    /// The same for the ground-truth stimulus.
    pub rho_stimulus: f64,
}

pub fn correlation_report(
    encoder: &BrainEncoder,
    decoded: &[Image],
    truths: &[Image],
    measurements: &[BrainSample],
) -> Result<Vec<CorrelationPair>> {
    if decoded.len() != truths.len() || decoded.len() != measurements.len() {
        return Err(dim("decoded images, ground truths and measurements must align"));
    }
    decoded
        .iter()
        .zip(truths)
        .zip(measurements)
        .map(|((d, t), m)| {
            let target = vertex_vector(m);
            let r = |img: &Image| -> Result<f64> { Ok(pearson(&encoder.predict(img)?, &target).unwrap_or(f64::NAN)) };
            Ok(CorrelationPair { sample_id: m.stimulus_id.clone(), rho_decoded: r(d)?, rho_stimulus: r(t)? })
        })
        .collect()
}

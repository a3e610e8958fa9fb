//! Reconstruction quality metrics and the feature extractors behind them.
//!
//! The eight reported columns are pixel correlation, SSIM, two-way
//! classification accuracy under four extractors and correlation distance
//! under two. Extractor identifiers travel with every report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::encoder::BrainEncoder;
use crate::error::{dim, invalid, Error, IoContext, Result};
use crate::image::{grayscale_unit, Image};
use crate::stats::{mean, pearson};
use crate::synth::{Scene, ShapeKind};

pub const METRIC_NAMES: [&str; 8] =
    ["PixCorr", "SSIM", "2WC-low-a", "2WC-low-b", "2WC-high-a", "2WC-high-b", "dist-a", "dist-b"];

/// A metric value plus whether it hit a degenerate case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(dim(format!("images differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn flat(img: &Image) -> Vec<f64> {
    img.iter().map(|&v| v as f64).collect()
}

/// Pearson correlation over all pixel values; 0 (flagged) for a constant
/// image.
pub fn pixcorr(recon: &Image, truth: &Image) -> Result<Scored> {
    same_shape(recon, truth)?;
    Ok(match pearson(&flat(recon), &flat(truth)) {
        Some(value) => Scored { value, degenerate: false },
        None => Scored { value: 0.0, degenerate: true },
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(y, x)| {
        let (dy, dx) = (y as f64 - r, x as f64 - r);
        (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s = w.sum();
    w.mapv_inplace(|v| v / s);
    w
}

fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Windowed SSIM on luma in `[0, 1]` with an 11x11 Gaussian window
/// (sigma 1.5), averaged over all fully contained windows. Images smaller
/// than the window fall back to global statistics (flagged).
pub fn ssim(recon: &Image, truth: &Image) -> Result<Scored> {
    same_shape(recon, truth)?;
    let x = grayscale_unit(recon);
    let y = grayscale_unit(truth);
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let mx = x.sum() / n;
        let my = y.sum() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cxy = x.iter().zip(y.iter()).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        return Ok(Scored { value: ssim_from_moments(mx, my, vx, vy, cxy), degenerate: true });
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((dy, dx), &k) in win.indexed_iter() {
                let (a, b) = (x[(y0 + dy, x0 + dx)], y[(y0 + dy, x0 + dx)]);
                mx += k * a;
                my += k * b;
                sxx += k * a * a;
                syy += k * b * b;
                sxy += k * a * b;
            }
            total += ssim_from_moments(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my);
            count += 1;
        }
    }
    Ok(Scored { value: total / count as f64, degenerate: false })
}

/// Per-sample two-way accuracies and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoWay {
    pub per_sample: Vec<f64>,
    pub accuracy: f64,
    /// Correlations that were undefined and scored as 0.
    pub degenerate: usize,
}

/// For every sample `i` and every `j != i`, a win when `recon_i` correlates
/// more with `truth_i` than with `truth_j`; ties count one half. Undefined
/// correlations count as 0.
pub fn two_way_accuracy(recon_features: &[Vec<f64>], truth_features: &[Vec<f64>]) -> Result<TwoWay> {
    let n = recon_features.len();
    if n != truth_features.len() {
        return Err(dim(format!("{n} reconstructions for {} truths", truth_features.len())));
    }
    if n < 2 {
        return Err(invalid("two-way accuracy needs at least two samples"));
    }
    let mut degenerate = 0;
    let mut per_sample = Vec::with_capacity(n);
    for (i, r) in recon_features.iter().enumerate() {
        let corr: Vec<f64> = truth_features
            .iter()
            .map(|t| {
                pearson(r, t).unwrap_or_else(|| {
                    degenerate += 1;
                    0.0
                })
            })
            .collect();
        let own = corr[i];
        let wins: f64 = corr
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &c)| if own > c { 1.0 } else if own == c { 0.5 } else { 0.0 })
            .sum();
        per_sample.push(wins / (n - 1) as f64);
    }
    Ok(TwoWay { accuracy: mean(&per_sample), per_sample, degenerate })
}

/// Per-sample correlation distances `1 - rho` and their mean; undefined
/// correlations are scored as distance 1 and counted.
pub fn feature_distance(recon_features: &[Vec<f64>], truth_features: &[Vec<f64>]) -> Result<TwoWay> {
    if recon_features.len() != truth_features.len() || recon_features.is_empty() {
        return Err(dim("feature distance needs equally many, and at least one, reconstructions and truths"));
    }
    let mut degenerate = 0;
    let per_sample: Vec<f64> = recon_features
        .iter()
        .zip(truth_features)
        .map(|(r, t)| {
            1.0 - pearson(r, t).unwrap_or_else(|| {
                degenerate += 1;
                0.0
            })
        })
        .collect();
    Ok(TwoWay { accuracy: mean(&per_sample), per_sample, degenerate })
}

/// Maps an image to a feature vector for 2WC and distance metrics.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn extract(&self, img: &Image) -> Result<Vec<f64>>;
}

impl<T: FeatureExtractor + ?Sized> FeatureExtractor for &T {
    fn id(&self) -> String {
        (**self).id()
    }

    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        (**self).extract(img)
    }
}

/// Raw pixel values.
pub struct PixelExtractor;

impl FeatureExtractor for PixelExtractor {
    fn id(&self) -> String {
        "pixels".into()
    }

    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(flat(img))
    }
}

/// Quadrature Gabor energy on luma at four orientations and two
/// wavelengths, average-pooled onto a coarse grid.
pub struct GaborExtractor {
    pub grid: usize,
    bank: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Default for GaborExtractor {
    fn default() -> Self {
        Self::new(4)
    }
}

impl GaborExtractor {
    pub const WAVELENGTHS: [f64; 2] = [4.0, 8.0];
    pub const ORIENTATIONS: usize = 4;

    pub fn new(grid: usize) -> Self {
        let mut bank = Vec::new();
        for &lambda in &Self::WAVELENGTHS {
            let sigma = 0.56 * lambda;
            let r = (2.0 * sigma).ceil() as isize;
            let size = (2 * r + 1) as usize;
            for o in 0..Self::ORIENTATIONS {
                let theta = o as f64 * std::f64::consts::PI / Self::ORIENTATIONS as f64;
                let (s, c) = theta.sin_cos();
                let kernel = |phase: f64| {
                    let mut k = Array2::from_shape_fn((size, size), |(y, x)| {
                        let (dy, dx) = (y as f64 - r as f64, x as f64 - r as f64);
                        let u = dx * c + dy * s;
                        let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        env * (2.0 * std::f64::consts::PI * u / lambda + phase).cos()
                    });
                    let m = k.mean().unwrap();
                    k.mapv_inplace(|v| v - m);
                    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
                    k.mapv_inplace(|v| v / norm);
                    k
                };
                bank.push((kernel(0.0), kernel(-std::f64::consts::FRAC_PI_2)));
            }
        }
        Self { grid, bank }
    }
}

impl FeatureExtractor for GaborExtractor {
    fn id(&self) -> String {
        format!("gabor-energy-{}x{}-o{}-l4,8", self.grid, self.grid, Self::ORIENTATIONS)
    }

    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        let g = grayscale_unit(img);
        let (h, w) = g.dim();
        if h < self.grid || w < self.grid {
            return Err(dim(format!("image {h}x{w} is smaller than the pooling grid")));
        }
        let cells = self.grid * self.grid;
        let mut out = vec![0.0; self.bank.len() * cells];
        let mut counts = vec![0.0; cells];
        for y in 0..h {
            for x in 0..w {
                counts[(y * self.grid / h) * self.grid + x * self.grid / w] += 1.0;
            }
        }
        for (f, (even, odd)) in self.bank.iter().enumerate() {
            let r = (even.nrows() / 2) as isize;
            for y in 0..h {
                for x in 0..w {
                    let (mut e, mut o) = (0.0, 0.0);
                    for ((ky, kx), &kv) in even.indexed_iter() {
                        let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        let v = g[(sy, sx)];
                        e += kv * v;
                        o += odd[(ky, kx)] * v;
                    }
                    let cell = (y * self.grid / h) * self.grid + x * self.grid / w;
                    out[f * cells + cell] += (e * e + o * o).sqrt();
                }
            }
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v /= counts[i % cells];
        }
        Ok(out)
    }
}

/// Backbone features of a fitted brain encoder.
pub struct EncoderExtractor<'a> {
    pub encoder: &'a BrainEncoder,
}

impl FeatureExtractor for EncoderExtractor<'_> {
    fn id(&self) -> String {
        let c = &self.encoder.config;
        format!("encoder-backbone-f{}-k{}-g{}-s{}", c.filters, c.kernel, c.pool_grid, c.seed)
    }

    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        self.encoder.features(img)
    }
}

/// Softmax regression over Gabor energy trained on every rendered synthetic
/// scene; the extracted features are the class logits.
pub struct ShapeClassifier {
    gabor: GaborExtractor,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes, features + 1]`, last column is the bias.
    weights: Array2<f64>,
    pub train_accuracy: f64,
}

impl ShapeClassifier {
    const EPOCHS: usize = 300;
    const LEARNING_RATE: f64 = 0.5;
    const L2: f64 = 1e-3;

    pub fn train() -> Result<Self> {
        let gabor = GaborExtractor::default();
        let scenes = Scene::all();
        let feats = scenes.iter().map(|s| gabor.extract(&s.render())).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = scenes.iter().map(|s| s.shape.class_index()).collect();
        let d = feats[0].len();
        let n = feats.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let xs: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).chain([1.0]).collect())
            .collect();
        let k = ShapeKind::ALL.len();
        let mut weights = Array2::<f64>::zeros((k, d + 1));
        for _ in 0..Self::EPOCHS {
            let mut grad = Array2::<f64>::zeros((k, d + 1));
            for (x, &y) in xs.iter().zip(&labels) {
                let probs = softmax(&logits(&weights, x));
                for c in 0..k {
                    let err = probs[c] - if c == y { 1.0 } else { 0.0 };
                    for (g, &xv) in grad.row_mut(c).iter_mut().zip(x) {
                        *g += err * xv / n;
                    }
                }
            }
            let decay = weights.mapv(|w| Self::L2 * w);
            weights = weights - (grad + decay) * Self::LEARNING_RATE;
        }
        let correct = xs
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| argmax(&logits(&weights, x)) == y)
            .count();
        Ok(Self { gabor, mean, scale, weights, train_accuracy: correct as f64 / n })
    }

    pub fn predict_class(&self, img: &Image) -> Result<usize> {
        Ok(argmax(&self.extract(img)?))
    }
}

fn logits(weights: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    weights.rows().into_iter().map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

impl FeatureExtractor for ShapeClassifier {
    fn id(&self) -> String {
        format!("shape-classifier-softmax-gabor-logits-{}", ShapeKind::ALL.len())
    }

    fn extract(&self, img: &Image) -> Result<Vec<f64>> {
        let f = self.gabor.extract(img)?;
        let x: Vec<f64> =
            f.iter().zip(self.mean.iter().zip(&self.scale)).map(|(v, (m, s))| (v - m) / s).chain([1.0]).collect();
        Ok(logits(&self.weights, &x))
    }
}

/// The four extractors behind the 2WC and distance columns: `low_a` and
/// `low_b` for the low-level 2WC columns, `high_a` and `high_b` for the
/// high-level 2WC and the two distance columns.
pub struct ExtractorSet<'a> {
    pub low_a: Box<dyn FeatureExtractor + 'a>,
    pub low_b: Box<dyn FeatureExtractor + 'a>,
    pub high_a: Box<dyn FeatureExtractor + 'a>,
    pub high_b: Box<dyn FeatureExtractor + 'a>,
}

impl<'a> ExtractorSet<'a> {
    /// Pixels, Gabor energy, the encoder backbone and the shape classifier.
    pub fn standard(encoder: &'a BrainEncoder, classifier: &'a ShapeClassifier) -> Self {
        Self {
            low_a: Box::new(PixelExtractor),
            low_b: Box::new(GaborExtractor::default()),
            high_a: Box::new(EncoderExtractor { encoder }),
            high_b: Box::new(classifier),
        }
    }

    pub fn ids(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("2WC-low-a".to_string(), self.low_a.id()),
            ("2WC-low-b".to_string(), self.low_b.id()),
            ("2WC-high-a".to_string(), self.high_a.id()),
            ("2WC-high-b".to_string(), self.high_b.id()),
            ("dist-a".to_string(), self.high_a.id()),
            ("dist-b".to_string(), self.high_b.id()),
        ])
    }
}

fn features_of(ex: &dyn FeatureExtractor, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|img| ex.extract(img)).collect()
}

/// Per-sample metric rows plus the extractor identities behind them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub sample_ids: Vec<String>,
    /// One row per sample in [`METRIC_NAMES`] order.
    pub values: Vec<[f64; 8]>,
    pub extractors: BTreeMap<String, String>,
    /// Human-readable notes on degenerate cases.
    pub flags: Vec<String>,
}

impl MetricReport {
    /// Column means.
    pub fn aggregate(&self) -> [f64; 8] {
        std::array::from_fn(|k| mean(&self.values.iter().map(|row| row[k]).collect::<Vec<_>>()))
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = METRIC_NAMES.iter().position(|&n| n == name)?;
        Some(self.values.iter().map(|row| row[k]).collect())
    }

    /// Per-sample rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let fail = |e: csv::Error| Error::Format { path: path.to_path_buf(), reason: e.to_string() };
        let mut w = csv::Writer::from_path(path).map_err(fail)?;
        let header: Vec<&str> = std::iter::once("sample_id").chain(METRIC_NAMES).collect();
        w.write_record(&header).map_err(fail)?;
        let fmt = |row: &[f64; 8]| row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>();
        for (id, row) in self.sample_ids.iter().zip(&self.values) {
            w.write_record(std::iter::once(id.clone()).chain(fmt(row))).map_err(fail)?;
        }
        w.write_record(std::iter::once("mean".to_string()).chain(fmt(&self.aggregate()))).map_err(fail)?;
        w.flush().at(path)
    }

    /// Markdown table with a low-level and a high-level block, one row per
    /// labelled report, followed by the extractor identities.
    pub fn render_table(rows: &[(&str, &MetricReport)]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Method | {} |", METRIC_NAMES.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(METRIC_NAMES.len()));
        let _ = writeln!(s, "| | low-level | | | | high-level | | | |");
        for (label, report) in rows {
            let agg = report.aggregate();
            let cells: Vec<String> = agg.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(s, "| {label} | {} |", cells.join(" | "));
        }
        if let Some((_, first)) = rows.first() {
            let _ = writeln!(s);
            for (metric, id) in &first.extractors {
                let _ = writeln!(s, "- {metric}: {id}");
            }
        }
        s
    }
}

/// Computes every metric for aligned reconstructions and ground truths.
pub fn evaluate(recons: &[Image], truths: &[Image], sample_ids: &[String], extractors: &ExtractorSet<'_>) -> Result<MetricReport> {
    let n = recons.len();
    if truths.len() != n || sample_ids.len() != n {
        return Err(dim("reconstructions, truths and ids must align"));
    }
    let mut flags = Vec::new();
    let mut pix = Vec::with_capacity(n);
    let mut ss = Vec::with_capacity(n);
    for ((r, t), id) in recons.iter().zip(truths).zip(sample_ids) {
        let p = pixcorr(r, t)?;
        if p.degenerate {
            flags.push(format!("{id}: constant image, PixCorr reported as 0"));
        }
        pix.push(p.value);
        let s = ssim(r, t)?;
        if s.degenerate {
            flags.push(format!("{id}: image smaller than the SSIM window, global statistics used"));
        }
        ss.push(s.value);
    }
    let mut two_way = Vec::new();
    let mut feats = BTreeMap::new();
    for (name, ex) in [
        ("2WC-low-a", &extractors.low_a),
        ("2WC-low-b", &extractors.low_b),
        ("2WC-high-a", &extractors.high_a),
        ("2WC-high-b", &extractors.high_b),
    ] {
        let fr = features_of(ex.as_ref(), recons)?;
        let ft = features_of(ex.as_ref(), truths)?;
        let tw = two_way_accuracy(&fr, &ft)?;
        if tw.degenerate > 0 {
            flags.push(format!("{name}: {} undefined correlations scored as 0", tw.degenerate));
        }
        two_way.push(tw.per_sample);
        feats.insert(name, (fr, ft));
    }
    let mut dist = Vec::new();
    for (name, key) in [("dist-a", "2WC-high-a"), ("dist-b", "2WC-high-b")] {
        let (fr, ft) = &feats[key];
        let d = feature_distance(fr, ft)?;
        if d.degenerate > 0 {
            flags.push(format!("{name}: {} constant feature vectors", d.degenerate));
        }
        dist.push(d.per_sample);
    }
    let values = (0..n)
        .map(|i| [pix[i], ss[i], two_way[0][i], two_way[1][i], two_way[2][i], two_way[3][i], dist[0][i], dist[1][i]])
        .collect();
    Ok(MetricReport { sample_ids: sample_ids.to_vec(), values, extractors: extractors.ids(), flags })
}

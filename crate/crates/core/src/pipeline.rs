//! Experiment orchestration behind the command-line verbs.
//!
//! Every command writes into a run directory named
//! `<verb>-<seed>-<digest>` under the output root. Files are staged in a
//! hidden sibling directory that is renamed into place only when the
//! command succeeds, so a failed command leaves no partial outputs. Given
//! the same configuration and inputs, every command reproduces its outputs
//! byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::Axis;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::attribution::{
    contribution_series, mean_vectors, rank_and_partition, roi_attention_map, write_contributions_csv,
    write_partitions_csv, PARTITIONS,
};
use crate::config::{DataSource, ExperimentConfig, ExtractorKind, MetricsConfig};
use crate::encoder::{correlation_report, fit_encoder, rank_candidates, BrainEncoder, RankedCandidate, ENCODER_FILE};
use crate::error::{invalid, Error, IoContext, Result};
use crate::figures::{bar_chart, heatmap, overlay, upscale, write_f32_grid};
use crate::image::{load_png, save_png, tile, Image};
use crate::ingest::{load_archive, load_archive_with_manifest, read_manifest, write_archive, write_manifest};
use crate::metrics::{
    evaluate, EncoderExtractor, ExtractorSet, FeatureExtractor, GaborExtractor, MetricReport, PixelExtractor,
    ShapeClassifier, METRIC_NAMES,
};
use crate::model::{Model, MODEL_FILE};
use crate::parcel::{select_top_k_parcels, ParcelAtlas};
use crate::sampler::{candidate_seeds, sample, sample_batch, SampleConfig};
use crate::schedule::NoiseSchedule;
use crate::synth::{generate_synthetic_dataset, random_stimuli, synthetic_brain, Stimulus, SyntheticEncodingSpec};
use crate::trace::AttentionTrace;
use crate::train::{Dataset, Trainer};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ATLAS_SNAPSHOT: &str = "atlas.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RANKING_FILE: &str = "ranking.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TABLE_FILE: &str = "metrics.md";
pub const SWEEP_FILE: &str = "candidate_sweep.csv";
pub const SWEEP_TABLE_FILE: &str = "candidate_sweep.md";
pub const CORRELATION_FILE: &str = "correlations.csv";
pub const SELECTED_DIR: &str = "selected";
pub const TRUTH_DIR: &str = "truth";
pub const TRACES_DIR: &str = "traces";
pub const TRACE_EXT: &str = "trace";
pub const ABLATION_TABLE_FILE: &str = "ablation.md";
pub const REPORT_FILE: &str = "report.md";

/// Rows of one sampling batch during decoding.
const DECODE_BATCH: usize = 16;
/// Enlargement applied to raster figures.
const FIGURE_SCALE: usize = 4;

/// A run directory that becomes visible only on [`RunDir::commit`].
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl RunDir {
    pub fn name(verb: &str, seed: u64, digest: &str) -> String {
        format!("{verb}-{seed}-{}", &digest[..digest.len().min(12)])
    }

    pub fn create(root: &Path, name: &str) -> Result<Self> {
        std::fs::create_dir_all(root).at(root)?;
        let staging = root.join(format!(".{name}.partial"));
        if staging.exists() {
            std::fs::remove_dir_all(&staging).at(&staging)?;
        }
        std::fs::create_dir(&staging).at(&staging)?;
        Ok(Self { staging, target: root.join(name), committed: false })
    }

    /// Where files are written before the commit.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.staging.join(name);
        std::fs::create_dir_all(&dir).at(&dir)?;
        Ok(dir)
    }

    /// Moves the staged outputs into place, replacing an earlier run with the
    /// same name.
    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target).at(&self.target)?;
        }
        std::fs::rename(&self.staging, &self.target).at(&self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.staging);
        }
    }
}

fn digest_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).at(path)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("json serializes") + "\n"))
}

fn write_snapshot(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&run.path().join(CONFIG_SNAPSHOT), &cfg.to_toml())
}

/// Selected atlas plus train and held-out splits.
pub struct PreparedData {
    pub atlas: ParcelAtlas,
    pub train: Dataset,
    pub test: Dataset,
    pub synthetic: Option<SyntheticEncodingSpec>,
}

fn synthetic_stimuli(cfg: &ExperimentConfig) -> (Vec<Stimulus>, Vec<Stimulus>) {
    let d = &cfg.data;
    (random_stimuli(d.train_items, d.seed, 0), random_stimuli(d.test_items, d.seed, d.train_items as u64))
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let (full, spec) = synthetic_brain(&d.layout, d.noise_std, d.seed)?;
            let atlas = select_top_k_parcels(&full, cfg.k)?;
            let (train_stim, test_stim) = synthetic_stimuli(cfg);
            let build = |stimuli: &[Stimulus]| -> Result<Dataset> {
                let (samples, _) = generate_synthetic_dataset(&spec, &atlas, stimuli, d.repetitions)?;
                Dataset::new(stimuli.iter().map(|s| s.scene.render()).collect(), samples)
            };
            let (train, test) = (build(&train_stim)?, build(&test_stim)?);
            Ok(PreparedData { atlas, train, test, synthetic: Some(spec) })
        }
        DataSource::Archive => {
            let dir = d
                .archive
                .as_ref()
                .ok_or_else(|| Error::Config { field: "data.archive".into(), reason: "required for archive data".into() })?;
            let archive = match &d.atlas {
                Some(manifest) => load_archive_with_manifest(dir, manifest)?,
                None => load_archive(dir)?,
            };
            let images = archive.images.ok_or_else(|| Error::Config {
                field: "data.archive".into(),
                reason: format!("{} has no images directory", dir.display()),
            })?;
            let n = archive.samples.len();
            if n < d.test_items + 2 {
                return Err(Error::Config {
                    field: "data.test_items".into(),
                    reason: format!("archive holds {n} stimuli, too few for {} held-out items", d.test_items),
                });
            }
            let atlas = select_top_k_parcels(&archive.atlas, cfg.k)?;
            let samples =
                archive.samples.iter().map(|s| s.restrict(&archive.atlas, &atlas)).collect::<Result<Vec<_>>>()?;
            let split = n - d.test_items;
            let all = Dataset::new(images, samples)?;
            let train = all.subset(&(0..split).collect::<Vec<_>>());
            let test = all.subset(&(split..n).collect::<Vec<_>>());
            Ok(PreparedData { atlas, train, test, synthetic: None })
        }
    }
}

/// A trained denoiser with its schedule and brain encoder.
pub struct TrainedModel {
    pub model: Model,
    pub schedule: NoiseSchedule,
    pub encoder: BrainEncoder,
}

/// Trains the decoder and fits the brain encoder on the training split,
/// checkpointing both into `checkpoint` when given.
pub fn train_model(cfg: &ExperimentConfig, data: &PreparedData, checkpoint: Option<&Path>) -> Result<TrainedModel> {
    let model = Model::init(cfg.model.clone(), &data.atlas, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.schedule.clone(), cfg.train.clone())?;
    info!(
        "training on {} pairs, {} parcels, {} steps",
        data.train.len(),
        data.atlas.len(),
        cfg.train.total_steps(data.train.len())
    );
    trainer.run(&data.train, checkpoint)?;
    let fit = fit_encoder(&data.train.images, &data.train.samples, &cfg.encoder)?;
    info!(
        "encoder: train correlation {:.3}, validation correlation {}",
        fit.train_correlation,
        fit.validation_correlation.map_or("n/a".to_string(), |v| format!("{v:.3}"))
    );
    if let Some(dir) = checkpoint {
        fit.encoder.save(&dir.join(ENCODER_FILE))?;
    }
    let schedule = trainer.schedule().clone();
    Ok(TrainedModel { model: trainer.model, schedule, encoder: fit.encoder })
}

/// Directory holding `model.safetensors`: either `path` itself or its
/// `checkpoint/` child.
pub fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.join(MODEL_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Loads a checkpoint; the encoder is refitted on `data` when the
/// checkpoint has none.
pub fn load_trained(path: &Path, cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainedModel> {
    let dir = checkpoint_dir(path);
    if !dir.join(MODEL_FILE).exists() {
        return Err(Error::Checkpoint(format!("{} holds no {MODEL_FILE}", path.display())));
    }
    let trainer = Trainer::resume(&dir)?;
    trainer.model.check_atlas(&data.atlas)?;
    let enc_path = dir.join(ENCODER_FILE);
    let encoder = if enc_path.exists() {
        BrainEncoder::load(&enc_path)?
    } else {
        warn!("{} has no encoder; fitting one on the training split", dir.display());
        fit_encoder(&data.train.images, &data.train.samples, &cfg.encoder)?.encoder
    };
    let schedule = trainer.schedule().clone();
    Ok(TrainedModel { model: trainer.model, schedule, encoder })
}

/// All candidates of one decoded item and their encoder ranking.
#[derive(Clone, Debug)]
pub struct DecodedItem {
    pub sample_id: String,
    pub seeds: Vec<u64>,
    pub candidates: Vec<Image>,
    pub ranking: Vec<RankedCandidate>,
}

impl DecodedItem {
    /// Best-scoring candidate among the first `n`.
    pub fn best_of(&self, n: usize) -> RankedCandidate {
        *self.ranking.iter().find(|r| r.index < n).expect("at least one candidate")
    }

    pub fn selected(&self) -> &Image {
        &self.candidates[self.ranking[0].index]
    }
}

/// Generates `config.candidates_per_sample` candidates for every sample and
/// ranks them with the encoder against the unmasked measurement.
pub fn decode_samples(trained: &TrainedModel, samples: &[crate::parcel::BrainSample], config: &SampleConfig) -> Result<Vec<DecodedItem>> {
    config.validate()?;
    let tokens = trained.model.encode(samples)?;
    let seeds = candidate_seeds(config);
    let jobs: Vec<(usize, u64)> = (0..samples.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let mut images = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(DECODE_BATCH) {
        let rows: Vec<_> = chunk.iter().map(|&(i, _)| tokens.index_axis(Axis(0), i)).collect();
        let batch = ndarray::stack(Axis(0), &rows).expect("token rows share a shape");
        let chunk_seeds: Vec<u64> = chunk.iter().map(|&(_, s)| s).collect();
        images.extend(sample_batch(&trained.model, &trained.schedule, &batch, &chunk_seeds, config, false)?.into_iter().map(|s| s.image));
        info!("decoded {} / {} candidates", images.len(), jobs.len());
    }
    let per = seeds.len();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let candidates = images[i * per..(i + 1) * per].to_vec();
            let ranking = rank_candidates(&trained.encoder, &candidates, s)?;
            Ok(DecodedItem { sample_id: s.stimulus_id.clone(), seeds: seeds.clone(), candidates, ranking })
        })
        .collect()
}

fn extractor<'a>(
    kind: ExtractorKind,
    encoder: &'a BrainEncoder,
    classifier: &'a ShapeClassifier,
) -> Box<dyn FeatureExtractor + 'a> {
    match kind {
        ExtractorKind::Pixels => Box::new(PixelExtractor),
        ExtractorKind::Gabor => Box::new(GaborExtractor::default()),
        ExtractorKind::EncoderBackbone => Box::new(EncoderExtractor { encoder }),
        ExtractorKind::ShapeClassifier => Box::new(classifier),
    }
}

pub fn extractor_set<'a>(cfg: &MetricsConfig, encoder: &'a BrainEncoder, classifier: &'a ShapeClassifier) -> ExtractorSet<'a> {
    ExtractorSet {
        low_a: extractor(cfg.low_a, encoder, classifier),
        low_b: extractor(cfg.low_b, encoder, classifier),
        high_a: extractor(cfg.high_a, encoder, classifier),
        high_b: extractor(cfg.high_b, encoder, classifier),
    }
}

/// Metric report of reconstructions against the held-out ground truth.
pub fn evaluate_images(
    cfg: &ExperimentConfig,
    encoder: &BrainEncoder,
    classifier: &ShapeClassifier,
    recons: &[Image],
    test: &Dataset,
) -> Result<MetricReport> {
    let ids: Vec<String> = test.samples.iter().map(|s| s.stimulus_id.clone()).collect();
    let set = extractor_set(&cfg.metrics, encoder, classifier);
    let report = evaluate(recons, &test.images, &ids, &set)?;
    for flag in &report.flags {
        warn!("{flag}");
    }
    Ok(report)
}

/// `train`: checkpoint, loss curve, encoder and config snapshot.
pub fn cmd_train(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let run = RunDir::create(out_root, &RunDir::name("train", cfg.seed, &cfg.digest()))?;
    let ckpt = run.subdir(CHECKPOINT_DIR)?;
    let trained = train_model(cfg, &data, Some(&ckpt))?;
    write_manifest(&data.atlas, &run.path().join(ATLAS_SNAPSHOT))?;
    write_snapshot(&run, cfg)?;
    write_json(
        &run.path().join(SUMMARY_FILE),
        &json!({
            "parcels": data.atlas.len(),
            "train_items": data.train.len(),
            "steps": cfg.train.total_steps(data.train.len()),
            "encoder_outputs": trained.encoder.output_dim(),
        }),
    )?;
    run.commit()
}

#[derive(Serialize)]
struct RankingRow<'a> {
    sample_id: &'a str,
    candidate_seed: u64,
    score: f64,
    rank: usize,
    selected: bool,
}

fn write_ranking_csv(path: &Path, items: &[DecodedItem]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for item in items {
        for (rank, r) in item.ranking.iter().enumerate() {
            w.serialize(RankingRow {
                sample_id: &item.sample_id,
                candidate_seed: item.seeds[r.index],
                score: r.score,
                rank: rank + 1,
                selected: rank == 0,
            })?;
        }
    }
    w.flush().at(path)
}

/// One row of a candidate-count sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub candidates: usize,
    pub mean_selected_score: f64,
    pub report: MetricReport,
}

/// Metrics when selecting among the first `n` candidates, for each `n`.
pub fn candidate_sweep(
    cfg: &ExperimentConfig,
    encoder: &BrainEncoder,
    classifier: &ShapeClassifier,
    items: &[DecodedItem],
    test: &Dataset,
    counts: &[usize],
) -> Result<Vec<SweepRow>> {
    let available = items.first().map_or(0, |i| i.candidates.len());
    let mut rows = Vec::new();
    for &n in counts {
        if n > available {
            warn!("skipping the {n}-candidate sweep row: only {available} candidates were generated");
            continue;
        }
        let picks: Vec<RankedCandidate> = items.iter().map(|i| i.best_of(n)).collect();
        let images: Vec<Image> = items.iter().zip(&picks).map(|(i, p)| i.candidates[p.index].clone()).collect();
        let scores: Vec<f64> = picks.iter().map(|p| p.score).collect();
        let report = evaluate_images(cfg, encoder, classifier, &images, test)?;
        rows.push(SweepRow { candidates: n, mean_selected_score: crate::stats::mean(&scores), report });
    }
    Ok(rows)
}

fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let path = dir.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    let header: Vec<&str> = ["candidates", "mean_selected_score"].into_iter().chain(METRIC_NAMES).collect();
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.candidates.to_string(), format!("{:.6}", r.mean_selected_score)];
        rec.extend(r.report.aggregate().iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.flush().at(&path)?;
    let labels: Vec<String> = rows.iter().map(|r| format!("{} candidates", r.candidates)).collect();
    let table: Vec<(&str, &MetricReport)> = labels.iter().map(String::as_str).zip(rows.iter().map(|r| &r.report)).collect();
    write_text(&dir.join(SWEEP_TABLE_FILE), &MetricReport::render_table(&table))
}

fn file_digest(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(Sha256::digest(&bytes).to_vec())
}

/// `decode`: selected reconstructions, candidate ranking, metrics, the
/// candidate sweep, encoder correlations and attention traces.
pub fn cmd_decode(cfg: &ExperimentConfig, checkpoint: &Path, out_root: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let trained = load_trained(checkpoint, cfg, &data)?;
    let model_digest = file_digest(&checkpoint_dir(checkpoint).join(MODEL_FILE))?;
    let digest = digest_parts(&[cfg.digest().as_bytes(), &model_digest]);
    let run = RunDir::create(out_root, &RunDir::name("decode", cfg.seed, &digest))?;

    let items = decode_samples(&trained, &data.test.samples, &cfg.sample)?;
    let selected: Vec<Image> = items.iter().map(|i| i.selected().clone()).collect();
    let (sel_dir, truth_dir) = (run.subdir(SELECTED_DIR)?, run.subdir(TRUTH_DIR)?);
    for ((item, img), truth) in items.iter().zip(&selected).zip(&data.test.images) {
        save_png(img, &sel_dir.join(format!("{}.png", item.sample_id)))?;
        save_png(truth, &truth_dir.join(format!("{}.png", item.sample_id)))?;
    }
    write_ranking_csv(&run.path().join(RANKING_FILE), &items)?;

    let classifier = ShapeClassifier::train()?;
    let report = evaluate_images(cfg, &trained.encoder, &classifier, &selected, &data.test)?;
    report.write_csv(&run.path().join(METRICS_FILE))?;
    write_text(&run.path().join(TABLE_FILE), &MetricReport::render_table(&[("decoded", &report)]))?;
    let sweep = candidate_sweep(cfg, &trained.encoder, &classifier, &items, &data.test, &cfg.ablate.candidates)?;
    write_sweep(run.path(), &sweep)?;

    let pairs = correlation_report(&trained.encoder, &selected, &data.test.images, &data.test.samples)?;
    let path = run.path().join(CORRELATION_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for p in &pairs {
        w.serialize(p)?;
    }
    w.flush().at(&path)?;

    let traces = run.subdir(TRACES_DIR)?;
    let tokens = trained.model.encode(&data.test.samples[..cfg.interpret.trace_samples.min(items.len())])?;
    for (i, item) in items.iter().take(cfg.interpret.trace_samples).enumerate() {
        let seed = item.seeds[item.ranking[0].index];
        let one = SampleConfig { seed, ..cfg.sample.clone() };
        let (img, trace) = sample(&trained.model, &trained.schedule, &tokens.index_axis(Axis(0), i).to_owned(), &one)?;
        if img != *item.selected() {
            return Err(invalid(format!("attention capture changed the reconstruction of {}", item.sample_id)));
        }
        trace.write_dump(&traces.join(format!("{}.{TRACE_EXT}", item.sample_id)))?;
    }

    write_manifest(&data.atlas, &run.path().join(ATLAS_SNAPSHOT))?;
    write_snapshot(&run, cfg)?;
    let agg = report.aggregate();
    let metrics: BTreeMap<&str, f64> = METRIC_NAMES.iter().copied().zip(agg).collect();
    write_json(
        &run.path().join(SUMMARY_FILE),
        &json!({
            "items": items.len(),
            "candidates_per_sample": cfg.sample.candidates_per_sample,
            "sampling_steps": cfg.sample.steps,
            "metrics": metrics,
            "extractors": report.extractors,
            "traces": cfg.interpret.trace_samples.min(items.len()),
        }),
    )?;
    run.commit()
}

/// `heatmap_timesteps` entries spread evenly over `timesteps`, first and
/// last included.
pub fn logged_timesteps(timesteps: &[usize], count: usize) -> Vec<usize> {
    let n = timesteps.len();
    if n == 0 || count == 0 {
        return Vec::new();
    }
    if count >= n {
        return timesteps.to_vec();
    }
    if count == 1 {
        return vec![timesteps[0]];
    }
    (0..count).map(|k| timesteps[(k * (n - 1) + (count - 1) / 2) / (count - 1)]).collect()
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == TRACE_EXT))
        .collect();
    files.sort();
    Ok(files)
}

fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

/// `interpret`: contribution CSVs, partitions and ROI heatmap grids for every
/// trace of a decode run.
pub fn cmd_interpret(cfg: &ExperimentConfig, decode_dir: &Path, out_root: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let atlas = read_manifest(&decode_dir.join(ATLAS_SNAPSHOT))?;
    let files = trace_files(&decode_dir.join(TRACES_DIR))?;
    if files.is_empty() {
        return Err(invalid(format!("{} holds no attention traces", decode_dir.join(TRACES_DIR).display())));
    }
    let mut parts: Vec<Vec<u8>> = vec![cfg.digest().into_bytes(), std::fs::read(decode_dir.join(ATLAS_SNAPSHOT)).at(decode_dir)?];
    for f in &files {
        parts.push(file_digest(f)?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    let run = RunDir::create(out_root, &RunDir::name("interpret", cfg.seed, &digest_parts(&refs)))?;
    let ids = atlas.ids();
    let groups = atlas.roi_groups();
    if groups.is_empty() {
        warn!("atlas has no ROI labels; writing contributions only and skipping heatmaps");
    }
    let (contrib_dir, part_dir, fig_dir) = (run.subdir("contributions")?, run.subdir("partitions")?, run.subdir("figures")?);
    let mut means = Vec::new();
    let mut heatmap_rows = 0;
    for file in &files {
        let id = file.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").to_string();
        let trace = AttentionTrace::read_dump(file)?;
        trace.validate()?;
        if trace.num_parcels() != atlas.len() {
            return Err(invalid(format!("{} has {} parcels, atlas {}", file.display(), trace.num_parcels(), atlas.len())));
        }
        let series = contribution_series(&trace)?;
        for (t, b) in series.timesteps.iter().zip(&series.per_timestep) {
            let s: f64 = b.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("contributions of {id} at t = {t} sum to {s}")));
            }
        }
        write_contributions_csv(&contrib_dir.join(format!("{id}.csv")), &series, &ids)?;
        let labels = rank_and_partition(&series.mean, &ids)?;
        write_partitions_csv(&part_dir.join(format!("{id}.csv")), &ids, &series.mean, &labels)?;
        let mut sorted = series.mean.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        save_png(&bar_chart(&sorted, 64, 3)?, &fig_dir.join(format!("{id}_contributions.png")))?;
        means.push(series.mean.clone());

        if groups.is_empty() {
            continue;
        }
        let base_path = decode_dir.join(SELECTED_DIR).join(format!("{id}.png"));
        let base = if base_path.exists() { Some(load_png(&base_path)?) } else { None };
        let size = match &base {
            Some(img) => (img.dim().0, img.dim().1),
            None => *trace.layer_grids().iter().max().expect("trace has layers"),
        };
        let logged = logged_timesteps(trace.timesteps(), cfg.interpret.heatmap_timesteps);
        let map_dir = run.subdir(&format!("maps/{id}"))?;
        let mut heat_grid = Vec::new();
        let mut overlay_grid = Vec::new();
        for (label, members) in &groups {
            let mut heat_row = Vec::new();
            let mut overlay_row = Vec::new();
            for &t in &logged {
                let map = roi_attention_map(&trace, members, t, size)?.map;
                write_f32_grid(&map, &map_dir.join(format!("{}_t{t:04}_{}x{}.f32", slug(label), size.0, size.1)))?;
                heat_row.push(upscale(&heatmap(&map), FIGURE_SCALE));
                if let Some(img) = &base {
                    overlay_row.push(upscale(&overlay(img, &map, cfg.interpret.overlay_alpha)?, FIGURE_SCALE));
                }
            }
            heat_grid.push(heat_row);
            if !overlay_row.is_empty() {
                overlay_grid.push(overlay_row);
            }
        }
        heatmap_rows = heat_grid.len();
        save_png(&tile(&heat_grid, 1.0)?, &fig_dir.join(format!("{id}_heatmaps.png")))?;
        if !overlay_grid.is_empty() {
            save_png(&tile(&overlay_grid, 1.0)?, &fig_dir.join(format!("{id}_overlays.png")))?;
        }
    }
    let overall = mean_vectors(&means);
    let labels = rank_and_partition(&overall, &ids)?;
    write_partitions_csv(&run.path().join("partitions.csv"), &ids, &overall, &labels)?;
    let mut per_partition = [0.0; PARTITIONS];
    for (m, &l) in overall.iter().zip(&labels) {
        per_partition[l] += m;
    }
    save_png(&upscale(&bar_chart(&per_partition, 32, 6)?, FIGURE_SCALE), &fig_dir.join("partition_mass.png"))?;
    write_snapshot(&run, cfg)?;
    write_json(
        &run.path().join(SUMMARY_FILE),
        &json!({
            "traces": files.len(),
            "roi_rows": heatmap_rows,
            "heatmaps": !groups.is_empty(),
            "notice": if groups.is_empty() { "atlas has no ROI labels; heatmaps skipped" } else { "" },
            "partition_mass": per_partition,
        }),
    )?;
    run.commit()
}

/// Experiments of the `ablate` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    TokenDropout,
    LinearMapper,
    ParcelsP,
    DimF,
    NCandidates,
    RoiMasking,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::TokenDropout,
        Ablation::LinearMapper,
        Ablation::ParcelsP,
        Ablation::DimF,
        Ablation::NCandidates,
        Ablation::RoiMasking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::TokenDropout => "token_dropout",
            Ablation::LinearMapper => "linear_mapper",
            Ablation::ParcelsP => "parcels_p",
            Ablation::DimF => "dim_f",
            Ablation::NCandidates => "n_candidates",
            Ablation::RoiMasking => "roi_masking",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Config {
            field: "ablation".into(),
            reason: format!(
                "unknown ablation `{s}`; valid names: {}",
                Ablation::ALL.map(Ablation::name).join(", ")
            ),
        })
    }
}

/// Parcel ids of `atlas` whose ROI label is in `labels`.
pub fn parcels_labelled(atlas: &ParcelAtlas, labels: &[String]) -> Vec<u32> {
    atlas
        .parcels()
        .iter()
        .filter(|p| p.roi_label.as_ref().is_some_and(|l| labels.contains(l)))
        .map(|p| p.id)
        .collect()
}

fn train_variant(cfg: &ExperimentConfig, run: &RunDir, label: &str) -> Result<(PreparedData, TrainedModel)> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let ckpt = run.subdir(&format!("variants/{}", slug(label)))?;
    let trained = train_model(cfg, &data, Some(&ckpt))?;
    Ok((data, trained))
}

/// `ablate`: one metric table comparing the variants of `which`.
pub fn cmd_ablate(cfg: &ExperimentConfig, which: Ablation, out_root: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let digest = digest_parts(&[cfg.digest().as_bytes(), which.name().as_bytes()]);
    let run = RunDir::create(out_root, &RunDir::name(&format!("ablate-{}", which.name()), cfg.seed, &digest))?;
    let classifier = ShapeClassifier::train()?;
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let mut train_and_decode = |label: String, variant: ExperimentConfig| -> Result<()> {
        let (data, trained) = train_variant(&variant, &run, &label)?;
        let items = decode_samples(&trained, &data.test.samples, &variant.sample)?;
        let selected: Vec<Image> = items.iter().map(|i| i.selected().clone()).collect();
        rows.push((label, evaluate_images(&variant, &trained.encoder, &classifier, &selected, &data.test)?));
        Ok(())
    };
    match which {
        Ablation::TokenDropout => {
            for (label, on) in [("with TD", true), ("without TD", false)] {
                let mut v = cfg.clone();
                v.train.token_dropout = on;
                train_and_decode(label.into(), v)?;
            }
        }
        Ablation::LinearMapper => {
            for (label, shared) in [("with LM", false), ("w/o LM", true)] {
                let mut v = cfg.clone();
                v.model.shared_mapper = shared;
                train_and_decode(label.into(), v)?;
            }
        }
        Ablation::ParcelsP => {
            for &k in &cfg.ablate.parcels_k {
                let mut v = cfg.clone();
                v.k = k;
                train_and_decode(format!("p = {}", 2 * k), v)?;
            }
        }
        Ablation::DimF => {
            for &f in &cfg.ablate.token_dims {
                let mut v = cfg.clone();
                v.model.token_dim = f;
                train_and_decode(format!("f = {f}"), v)?;
            }
        }
        Ablation::NCandidates => {
            let mut v = cfg.clone();
            v.sample.candidates_per_sample = cfg.ablate.candidates.iter().copied().max().unwrap_or(1);
            let (data, trained) = train_variant(&v, &run, "shared")?;
            let items = decode_samples(&trained, &data.test.samples, &v.sample)?;
            for row in candidate_sweep(&v, &trained.encoder, &classifier, &items, &data.test, &cfg.ablate.candidates)? {
                rows.push((format!("{} candidates", row.candidates), row.report));
            }
        }
        Ablation::RoiMasking => {
            let (data, trained) = train_variant(cfg, &run, "shared")?;
            let masks = [
                ("No Masking", Vec::new()),
                ("LL ROI Masking", parcels_labelled(&data.atlas, &cfg.ablate.low_level_rois)),
                ("HL ROI Masking", parcels_labelled(&data.atlas, &cfg.ablate.high_level_rois)),
            ];
            for (label, ids) in masks {
                if label != "No Masking" && ids.is_empty() {
                    return Err(Error::Config {
                        field: "ablate".into(),
                        reason: format!("no selected parcel carries the ROI labels of the `{label}` row"),
                    });
                }
                let sc = SampleConfig { roi_mask: (!ids.is_empty()).then_some(ids), ..cfg.sample.clone() };
                let items = decode_samples(&trained, &data.test.samples, &sc)?;
                let selected: Vec<Image> = items.iter().map(|i| i.selected().clone()).collect();
                rows.push((label.into(), evaluate_images(cfg, &trained.encoder, &classifier, &selected, &data.test)?));
            }
        }
    }
    for (label, report) in &rows {
        report.write_csv(&run.path().join(format!("metrics_{}.csv", slug(label))))?;
    }
    let table: Vec<(&str, &MetricReport)> = rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
    write_text(&run.path().join(ABLATION_TABLE_FILE), &MetricReport::render_table(&table))?;
    write_snapshot(&run, cfg)?;
    run.commit()
}

/// `datagen`: writes the synthetic dataset as an on-disk archive with its
/// ground truth and split.
pub fn cmd_datagen(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::Config { field: "data.source".into(), reason: "datagen needs synthetic data".into() });
    }
    let d = &cfg.data;
    let (full, spec) = synthetic_brain(&d.layout, d.noise_std, d.seed)?;
    let (train, test) = synthetic_stimuli(cfg);
    let stimuli: Vec<Stimulus> = train.iter().chain(&test).cloned().collect();
    let (samples, truth) = generate_synthetic_dataset(&spec, &full, &stimuli, d.repetitions)?;
    let images: Vec<Image> = stimuli.iter().map(|s| s.scene.render()).collect();
    let digest = digest_parts(&[toml::to_string(&cfg.data).expect("data config serializes").as_bytes()]);
    let run = RunDir::create(out_root, &RunDir::name("datagen", d.seed, &digest))?;
    write_archive(run.path(), &full, &samples, Some(&images))?;
    write_json(&run.path().join("ground_truth.json"), &serde_json::to_value(&truth).expect("ground truth serializes"))?;
    write_json(
        &run.path().join("split.json"),
        &json!({
            "train": train.iter().map(|s| &s.id).collect::<Vec<_>>(),
            "test": test.iter().map(|s| &s.id).collect::<Vec<_>>(),
        }),
    )?;
    write_snapshot(&run, cfg)?;
    run.commit()
}

/// Mean row of a `metrics.csv` written by [`MetricReport::write_csv`].
pub fn read_metric_means(path: &Path) -> Result<[f64; 8]> {
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.records() {
        let rec = rec?;
        if rec.get(0) == Some("mean") {
            let vals: Vec<f64> = rec.iter().skip(1).map(|v| v.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(
                |e| Error::Format { path: path.to_path_buf(), reason: e.to_string() },
            )?;
            return vals
                .try_into()
                .map_err(|_| Error::Format { path: path.to_path_buf(), reason: "mean row needs 8 values".into() });
        }
    }
    Err(Error::Format { path: path.to_path_buf(), reason: "no mean row".into() })
}

/// `report`: one Markdown document gathering the metric tables of earlier
/// runs.
pub fn cmd_report(runs: &[PathBuf], out_root: &Path) -> Result<PathBuf> {
    if runs.is_empty() {
        return Err(Error::Config { field: "runs".into(), reason: "name at least one run directory".into() });
    }
    let mut doc = String::from("# Results\n\n");
    let mut parts = Vec::new();
    let mut table_rows = Vec::new();
    for dir in runs {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
        parts.push(name.clone().into_bytes());
        let metrics = dir.join(METRICS_FILE);
        if metrics.exists() {
            table_rows.push((name.clone(), read_metric_means(&metrics)?));
            parts.push(std::fs::read(&metrics).at(&metrics)?);
        }
        for extra in [ABLATION_TABLE_FILE, SWEEP_TABLE_FILE] {
            let path = dir.join(extra);
            if path.exists() {
                let text = std::fs::read_to_string(&path).at(&path)?;
                let _ = write!(doc, "## {name}: {extra}\n\n{text}\n");
                parts.push(text.into_bytes());
            }
        }
    }
    if !table_rows.is_empty() {
        let mut t = format!("## Decoding metrics\n\n| Run | {} |\n|---|{}\n", METRIC_NAMES.join(" | "), "---|".repeat(8));
        for (name, v) in &table_rows {
            let cells: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
            let _ = writeln!(t, "| {name} | {} |", cells.join(" | "));
        }
        doc = format!("{doc}{t}\n");
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    let run = RunDir::create(out_root, &RunDir::name("report", 0, &digest_parts(&refs)))?;
    write_text(&run.path().join(REPORT_FILE), &doc)?;
    run.commit()
}

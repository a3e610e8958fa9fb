//! On-disk dataset archive.
//!
//! An archive is a directory holding
//!
//! * `atlas.tsv`: tab-separated `id, hemisphere, vertex_count, snr, roi_label`
//!   with a header row. An empty `snr` cell means "estimate from
//!   repetitions"; an empty `roi_label` means unlabelled.
//! * `responses.bin`: a sequence of records, one per measurement. Each record
//!   is a little-endian `u32` byte length, the UTF-8 stimulus id, then
//!   `p * v_max` little-endian `f32` values in row-major parcel order. Records
//!   sharing a stimulus id are repetitions and are averaged on load.
//! * `images/<stimulus_id>.png`: the stimulus images (optional).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, IoContext, Result};
use crate::image::{load_png, save_png, Image};
use crate::parcel::{average_repetitions, estimate_parcel_snr, BrainSample, Hemisphere, Parcel, ParcelAtlas};

pub const ATLAS_FILE: &str = "atlas.tsv";
pub const RESPONSES_FILE: &str = "responses.bin";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: u32,
    pub hemisphere: Hemisphere,
    pub vertex_count: usize,
    pub snr: Option<f64>,
    pub roi_label: Option<String>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn read_manifest_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = File::open(path).at(path)?;
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| format_err(path, format!("missing column `{name}`")))
    };
    let (c_id, c_hemi, c_vc, c_snr) = (col("id")?, col("hemisphere")?, col("vertex_count")?, col("snr")?);
    let c_roi = col("roi_label").ok();
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let bad = |what: &str| format_err(path, format!("row {}: bad {what}", line + 2));
        let snr = match field(c_snr) {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("snr"))?),
        };
        rows.push(ManifestRow {
            id: field(c_id).parse().map_err(|_| bad("id"))?,
            hemisphere: field(c_hemi).parse().map_err(|_| bad("hemisphere"))?,
            vertex_count: field(c_vc).parse().map_err(|_| bad("vertex_count"))?,
            snr,
            roi_label: c_roi.map(field).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    Ok(rows)
}

fn atlas_from_rows(rows: &[ManifestRow], snr: Option<&[f64]>) -> Result<ParcelAtlas> {
    ParcelAtlas::new(
        rows.iter()
            .enumerate()
            .map(|(i, r)| Parcel {
                id: r.id,
                hemisphere: r.hemisphere,
                vertex_count: r.vertex_count,
                snr: snr.map(|s| s[i]).or(r.snr).unwrap_or(0.0),
                roi_label: r.roi_label.clone(),
            })
            .collect(),
    )
}

/// Reads a manifest whose SNR column is fully populated.
pub fn read_manifest(path: &Path) -> Result<ParcelAtlas> {
    let rows = read_manifest_rows(path)?;
    if let Some(r) = rows.iter().find(|r| r.snr.is_none()) {
        return Err(format_err(path, format!("parcel {} has no snr", r.id)));
    }
    atlas_from_rows(&rows, None)
}

pub fn write_manifest(atlas: &ParcelAtlas, path: &Path) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(file);
    w.write_record(["id", "hemisphere", "vertex_count", "snr", "roi_label"])?;
    for p in atlas.parcels() {
        w.write_record([
            p.id.to_string(),
            p.hemisphere.to_string(),
            p.vertex_count.to_string(),
            format!("{}", p.snr),
            p.roi_label.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn write_responses(samples: &[BrainSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    for s in samples {
        let id = s.stimulus_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes()).at(path)?;
        w.write_all(id).at(path)?;
        for v in s.responses().iter() {
            w.write_all(&v.to_le_bytes()).at(path)?;
        }
    }
    w.flush().at(path)?;
    Ok(())
}

/// Raw records in file order (repetitions are not merged).
pub fn read_responses(path: &Path, atlas: &ParcelAtlas) -> Result<Vec<BrainSample>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).at(path)?).read_to_end(&mut bytes).at(path)?;
    let (p, v_max) = (atlas.len(), atlas.v_max());
    let payload = p * v_max * 4;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(format_err(path, format!("truncated record header at byte {pos}")));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + len + payload > bytes.len() {
            return Err(format_err(path, format!("truncated record at byte {pos}")));
        }
        let id = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|_| format_err(path, "stimulus id is not UTF-8"))?
            .to_string();
        pos += len;
        let values: Vec<f32> = bytes[pos..pos + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += payload;
        let responses = Array2::from_shape_vec((p, v_max), values).unwrap();
        out.push(BrainSample::from_padded(&id, responses, atlas)?);
    }
    Ok(out)
}

/// Groups records by stimulus id, keeping first-appearance order.
pub fn group_repetitions(records: Vec<BrainSample>) -> Vec<Vec<BrainSample>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<BrainSample>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(&r.stimulus_id) {
            order.push(r.stimulus_id.clone());
        }
        groups.entry(r.stimulus_id.clone()).or_default().push(r);
    }
    order.into_iter().map(|id| groups.remove(&id).unwrap()).collect()
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub atlas: ParcelAtlas,
    /// Repetition-averaged samples, one per stimulus.
    pub samples: Vec<BrainSample>,
    pub images: Option<Vec<Image>>,
}

/// Loads an archive directory. Missing SNR values are estimated from the
/// repetitions in `responses.bin`.
pub fn load_archive(dir: &Path) -> Result<Archive> {
    load_archive_with_manifest(dir, &dir.join(ATLAS_FILE))
}

/// Like [`load_archive`] but reads the atlas from `manifest`.
pub fn load_archive_with_manifest(dir: &Path, manifest: &Path) -> Result<Archive> {
    let manifest = manifest.to_path_buf();
    let rows = read_manifest_rows(&manifest)?;
    let provisional = atlas_from_rows(&rows, None)?;
    let records = read_responses(&dir.join(RESPONSES_FILE), &provisional)?;
    let groups = group_repetitions(records);
    let atlas = if rows.iter().any(|r| r.snr.is_none()) {
        let snr = estimate_parcel_snr(&groups)
            .map_err(|e| format_err(&manifest, format!("snr column incomplete and not estimable: {e}")))?;
        atlas_from_rows(&rows, Some(&snr))?
    } else {
        provisional
    };
    let samples = groups.iter().map(|g| average_repetitions(g)).collect::<Result<Vec<_>>>()?;
    let image_dir = dir.join(IMAGES_DIR);
    let images = if image_dir.is_dir() {
        Some(
            samples
                .iter()
                .map(|s| load_png(&image_path(dir, &s.stimulus_id)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Archive { atlas, samples, images })
}

pub fn image_path(dir: &Path, stimulus_id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{stimulus_id}.png"))
}

/// Writes an archive directory (which must already exist).
pub fn write_archive(dir: &Path, atlas: &ParcelAtlas, records: &[BrainSample], images: Option<&[Image]>) -> Result<()> {
    write_manifest(atlas, &dir.join(ATLAS_FILE))?;
    write_responses(records, &dir.join(RESPONSES_FILE))?;
    if let Some(images) = images {
        let img_dir = dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&img_dir).at(&img_dir)?;
        let mut seen = std::collections::HashSet::new();
        for (r, img) in records.iter().zip(images) {
            if seen.insert(r.stimulus_id.clone()) {
                save_png(img, &image_path(dir, &r.stimulus_id))?;
            }
        }
    }
    Ok(())
}

//! Brain-to-image and image-to-brain attribution from captured attention.
//!
//! Parcel contributions `B^(t)` give the share of all attention mass, with
//! every query in every layer weighted equally, that lands on each parcel.
//! ROI attention maps `I_R^(t)` show where in the image the tokens of a set
//! of parcels are attended to.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{dim, invalid, Error, IoContext, Result};
use crate::trace::AttentionTrace;

/// Number of ranking partitions.
pub const PARTITIONS: usize = 5;

/// `B^(t)` for every recorded timestep plus the uniform average over them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParcelContribution {
    pub timesteps: Vec<usize>,
    /// One length-`p` vector per entry of `timesteps`.
    pub per_timestep: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// `B^(t)_j = 1 / (H * sum_l q^l) * sum_l sum_h sum_i A^(l,h,t)_{i,j}`.
pub fn parcel_contribution(trace: &AttentionTrace, t: usize) -> Result<Vec<f64>> {
    trace.check_complete(t)?;
    let p = trace.num_parcels();
    let mut acc = vec![0.0f64; p];
    let mut queries = 0usize;
    for l in 0..trace.num_layers() {
        queries += trace.queries(l);
        for h in 0..trace.heads() {
            let a = trace.require(t, l, h)?;
            for row in a.rows() {
                for (s, &v) in acc.iter_mut().zip(row.iter()) {
                    *s += v as f64;
                }
            }
        }
    }
    let norm = (trace.heads() * queries) as f64;
    Ok(acc.into_iter().map(|v| v / norm).collect())
}

/// Contributions at every timestep of the trace, in recording order.
pub fn contribution_series(trace: &AttentionTrace) -> Result<ParcelContribution> {
    let timesteps = trace.timesteps().to_vec();
    if timesteps.is_empty() {
        return Err(invalid("trace has no timesteps"));
    }
    let per_timestep = timesteps.iter().map(|&t| parcel_contribution(trace, t)).collect::<Result<Vec<_>>>()?;
    let mean = mean_vectors(&per_timestep);
    Ok(ParcelContribution { timesteps, per_timestep, mean })
}

/// Elementwise mean of equal-length vectors.
pub fn mean_vectors(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let len = vectors.first().map_or(0, Vec::len);
    (0..len).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n).collect()
}

fn roi_set(trace: &AttentionTrace, roi: &[usize]) -> Result<BTreeSet<usize>> {
    let set: BTreeSet<usize> = roi.iter().copied().collect();
    if set.is_empty() {
        return Err(invalid("ROI must contain at least one parcel"));
    }
    if let Some(&bad) = set.iter().find(|&&j| j >= trace.num_parcels()) {
        return Err(invalid(format!("ROI parcel index {bad} outside 0..{}", trace.num_parcels())));
    }
    Ok(set)
}

/// `m_R^(l,t)(i) = 1/H * 1/|R| * sum_h sum_{j in R} A^(l,h,t)_{i,j}`.
pub fn roi_query_profile(trace: &AttentionTrace, roi: &[usize], layer: usize, t: usize) -> Result<Vec<f64>> {
    let set = roi_set(trace, roi)?;
    if layer >= trace.num_layers() {
        return Err(invalid(format!("layer {layer} outside 0..{}", trace.num_layers())));
    }
    let mut m = vec![0.0f64; trace.queries(layer)];
    for h in 0..trace.heads() {
        let a = trace.require(t, layer, h)?;
        for (mi, row) in m.iter_mut().zip(a.rows()) {
            *mi += set.iter().map(|&j| row[j] as f64).sum::<f64>();
        }
    }
    let norm = (trace.heads() * set.len()) as f64;
    Ok(m.into_iter().map(|v| v / norm).collect())
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn bilinear_upsample(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, h, out_h);
        let (x0, x1, fx) = coord(x, w, out_w);
        let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
        let bottom = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Scales a non-negative map to unit L1 mass; a map without mass becomes
/// uniform.
pub fn normalize_l1(map: &mut Array2<f64>) {
    let total: f64 = map.sum();
    if total > 0.0 && total.is_finite() {
        map.mapv_inplace(|v| v / total);
    } else {
        let uniform = 1.0 / map.len() as f64;
        map.fill(uniform);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiAttentionMap {
    pub roi: Vec<usize>,
    pub t: usize,
    /// Probability map over image pixels, `[height, width]`.
    pub map: Array2<f64>,
}

/// Per-layer ROI profiles reshaped to their grids, upsampled to the image,
/// normalized to unit mass and averaged uniformly over layers.
pub fn roi_attention_map(
    trace: &AttentionTrace,
    roi: &[usize],
    t: usize,
    image_size: (usize, usize),
) -> Result<RoiAttentionMap> {
    let (ih, iw) = image_size;
    if let Some(&(gh, gw)) = trace.layer_grids().iter().find(|&&(gh, gw)| gh > ih || gw > iw) {
        return Err(dim(format!("layer grid {gh}x{gw} exceeds image size {ih}x{iw}")));
    }
    let mut total = Array2::<f64>::zeros((ih, iw));
    for (l, &(gh, gw)) in trace.layer_grids().iter().enumerate() {
        let m = roi_query_profile(trace, roi, l, t)?;
        let grid = Array2::from_shape_vec((gh, gw), m).map_err(|e| dim(e.to_string()))?;
        let mut up = bilinear_upsample(&grid, ih, iw);
        normalize_l1(&mut up);
        total += &up;
    }
    total.mapv_inplace(|v| v / trace.num_layers() as f64);
    Ok(RoiAttentionMap { roi: roi_set(trace, roi)?.into_iter().collect(), t, map: total })
}

/// Partition label (0 = highest contribution) for each parcel, in input
/// order. Parcels are ranked by descending contribution with ties broken by
/// ascending id; partition sizes differ by at most one with the larger ones
/// first.
pub fn rank_and_partition(mean: &[f64], parcel_ids: &[u32]) -> Result<Vec<usize>> {
    let p = mean.len();
    if p != parcel_ids.len() {
        return Err(dim(format!("{p} contributions for {} parcel ids", parcel_ids.len())));
    }
    if p < PARTITIONS {
        return Err(invalid(format!("ranking into {PARTITIONS} partitions needs at least {PARTITIONS} parcels, got {p}")));
    }
    if mean.iter().any(|v| v.is_nan()) {
        return Err(invalid("contributions contain NaN"));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(parcel_ids[a].cmp(&parcel_ids[b])));
    let sizes = partition_sizes(p);
    let mut labels = vec![0; p];
    let mut pos = 0;
    for (label, &size) in sizes.iter().enumerate() {
        for &idx in &order[pos..pos + size] {
            labels[idx] = label;
        }
        pos += size;
    }
    Ok(labels)
}

/// Sizes of the five partitions for `p` parcels.
pub fn partition_sizes(p: usize) -> [usize; PARTITIONS] {
    std::array::from_fn(|i| p / PARTITIONS + usize::from(i < p % PARTITIONS))
}

/// Writes `t,parcel_id,contribution` rows.
pub fn write_contributions_csv(path: &Path, series: &ParcelContribution, parcel_ids: &[u32]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["t", "parcel_id", "contribution"]).map_err(|e| csv_error(path, e))?;
    for (t, b) in series.timesteps.iter().zip(&series.per_timestep) {
        for (id, v) in parcel_ids.iter().zip(b) {
            w.write_record([t.to_string(), id.to_string(), format!("{v:.9}")]).map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().at(path)
}

/// Writes `parcel_id,mean_contribution,partition` rows.
pub fn write_partitions_csv(path: &Path, parcel_ids: &[u32], mean: &[f64], labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["parcel_id", "mean_contribution", "partition"]).map_err(|e| csv_error(path, e))?;
    for ((id, v), label) in parcel_ids.iter().zip(mean).zip(labels) {
        w.write_record([id.to_string(), format!("{v:.9}"), label.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), reason: e.to_string() }
}

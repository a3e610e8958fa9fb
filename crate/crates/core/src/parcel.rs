//! Parcel atlas, padded per-parcel responses, and parcel selection.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
}

impl fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hemisphere::Left => f.write_str("left"),
            Hemisphere::Right => f.write_str("right"),
        }
    }
}

impl std::str::FromStr for Hemisphere {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" | "lh" => Ok(Hemisphere::Left),
            "right" | "r" | "rh" => Ok(Hemisphere::Right),
            other => Err(invalid(format!("unknown hemisphere `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parcel {
    pub id: u32,
    pub hemisphere: Hemisphere,
    pub vertex_count: usize,
    pub snr: f64,
    pub roi_label: Option<String>,
}

/// An ordered set of parcels. Row `i` of every [`BrainSample`] built against
/// this atlas belongs to `parcels()[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelAtlas {
    parcels: Vec<Parcel>,
}

impl ParcelAtlas {
    pub fn new(parcels: Vec<Parcel>) -> Result<Self> {
        if parcels.is_empty() {
            return Err(invalid("atlas has no parcels"));
        }
        let mut seen = HashSet::new();
        for p in &parcels {
            if !seen.insert(p.id) {
                return Err(invalid(format!("duplicate parcel id {}", p.id)));
            }
            if p.vertex_count == 0 {
                return Err(invalid(format!("parcel {} has no vertices", p.id)));
            }
            if !(p.snr.is_finite() && p.snr >= 0.0) {
                return Err(invalid(format!("parcel {} has invalid snr {}", p.id, p.snr)));
            }
        }
        Ok(Self { parcels })
    }

    pub fn parcels(&self) -> &[Parcel] {
        &self.parcels
    }

    pub fn len(&self) -> usize {
        self.parcels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parcels.is_empty()
    }

    /// Largest vertex count over parcels; the padded row width.
    pub fn v_max(&self) -> usize {
        self.parcels.iter().map(|p| p.vertex_count).max().unwrap_or(0)
    }

    pub fn total_vertices(&self) -> usize {
        self.parcels.iter().map(|p| p.vertex_count).sum()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.parcels.iter().map(|p| p.id).collect()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.parcels.iter().position(|p| p.id == id)
    }

    /// Row indices for each ROI label present in the atlas.
    pub fn roi_groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.parcels.iter().enumerate() {
            if let Some(label) = &p.roi_label {
                groups.entry(label.clone()).or_default().push(i);
            }
        }
        groups
    }

    pub fn has_roi_labels(&self) -> bool {
        self.parcels.iter().any(|p| p.roi_label.is_some())
    }

    /// Converts parcel ids to row indices, rejecting unknown ids.
    pub fn indices_of(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| self.index_of(id).ok_or_else(|| invalid(format!("unknown parcel id {id}"))))
            .collect()
    }
}

/// Keeps the `k` highest-SNR parcels of each hemisphere.
///
/// Ties are broken by ascending parcel id. The result lists the left
/// hemisphere by descending SNR, then the right hemisphere.
pub fn select_top_k_parcels(atlas: &ParcelAtlas, k: usize) -> Result<ParcelAtlas> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut selected = Vec::with_capacity(2 * k);
    for hemi in [Hemisphere::Left, Hemisphere::Right] {
        let mut side: Vec<&Parcel> = atlas.parcels.iter().filter(|p| p.hemisphere == hemi).collect();
        if side.len() < k {
            return Err(dim(format!("{hemi} hemisphere has {} parcels, fewer than k = {k}", side.len())));
        }
        side.sort_by(|a, b| b.snr.total_cmp(&a.snr).then(a.id.cmp(&b.id)));
        selected.extend(side.into_iter().take(k).cloned());
    }
    ParcelAtlas::new(selected)
}

/// One stimulus's zero-padded `p x v_max` response matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainSample {
    pub stimulus_id: String,
    responses: Array2<f32>,
    valid: Array2<bool>,
    pub repetitions_averaged: usize,
}

impl BrainSample {
    pub fn responses(&self) -> &Array2<f32> {
        &self.responses
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn num_parcels(&self) -> usize {
        self.responses.nrows()
    }

    pub fn v_max(&self) -> usize {
        self.responses.ncols()
    }

    /// Wraps an already padded matrix; padded positions must hold zeros.
    pub fn from_padded(stimulus_id: &str, responses: Array2<f32>, atlas: &ParcelAtlas) -> Result<BrainSample> {
        if responses.dim() != (atlas.len(), atlas.v_max()) {
            return Err(dim(format!(
                "padded responses are {:?}, atlas needs ({}, {})",
                responses.dim(),
                atlas.len(),
                atlas.v_max()
            )));
        }
        let mut valid = Array2::from_elem(responses.dim(), false);
        for (i, parcel) in atlas.parcels().iter().enumerate() {
            valid.row_mut(i).iter_mut().take(parcel.vertex_count).for_each(|v| *v = true);
        }
        if responses.iter().zip(valid.iter()).any(|(&x, &ok)| !ok && x != 0.0) {
            return Err(invalid(format!("stimulus `{stimulus_id}` has non-zero values in padded positions")));
        }
        Ok(BrainSample { stimulus_id: stimulus_id.to_string(), responses, valid, repetitions_averaged: 1 })
    }

    /// Drops the padded tail of every row.
    pub fn unpad(&self) -> Vec<Vec<f32>> {
        self.responses
            .rows()
            .into_iter()
            .zip(self.valid.rows())
            .map(|(r, v)| r.iter().zip(v.iter()).filter(|(_, &ok)| ok).map(|(&x, _)| x).collect())
            .collect()
    }

    /// Concatenation of every valid vertex, in parcel order.
    pub fn valid_vector(&self) -> Vec<f32> {
        self.responses
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, &ok)| ok)
            .map(|(&x, _)| x)
            .collect()
    }

    /// Copy with the rows of `rows` replaced by zeros.
    pub fn with_rows_zeroed(&self, rows: &[usize]) -> BrainSample {
        let mut out = self.clone();
        for &r in rows {
            out.responses.row_mut(r).fill(0.0);
        }
        out
    }

    /// Re-expresses a sample measured on `from` against the parcel subset
    /// `to`, re-padding to the subset's `v_max`.
    pub fn restrict(&self, from: &ParcelAtlas, to: &ParcelAtlas) -> Result<BrainSample> {
        if self.num_parcels() != from.len() {
            return Err(dim(format!("sample has {} parcels, source atlas {}", self.num_parcels(), from.len())));
        }
        let rows = self.unpad();
        let picked = to
            .parcels()
            .iter()
            .map(|p| {
                from.index_of(p.id)
                    .map(|i| rows[i].clone())
                    .ok_or_else(|| invalid(format!("parcel {} is not in the source atlas", p.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = pad_parcel_responses(&self.stimulus_id, &picked, to)?;
        out.repetitions_averaged = self.repetitions_averaged;
        Ok(out)
    }
}

/// Left-aligns each parcel's vertex vector into a `p x v_max` matrix padded
/// with zeros.
pub fn pad_parcel_responses(stimulus_id: &str, raw: &[Vec<f32>], atlas: &ParcelAtlas) -> Result<BrainSample> {
    if raw.len() != atlas.len() {
        return Err(dim(format!("{} response vectors for {} parcels", raw.len(), atlas.len())));
    }
    let v_max = atlas.v_max();
    let mut responses = Array2::<f32>::zeros((atlas.len(), v_max));
    let mut valid = Array2::from_elem((atlas.len(), v_max), false);
    for (i, (values, parcel)) in raw.iter().zip(atlas.parcels()).enumerate() {
        if values.len() != parcel.vertex_count {
            return Err(dim(format!(
                "parcel {} expects {} vertices, got {}",
                parcel.id,
                parcel.vertex_count,
                values.len()
            )));
        }
        for (j, &v) in values.iter().enumerate() {
            responses[[i, j]] = v;
            valid[[i, j]] = true;
        }
    }
    Ok(BrainSample { stimulus_id: stimulus_id.to_string(), responses, valid, repetitions_averaged: 1 })
}

/// Element-wise mean of repeated measurements of one stimulus.
///
/// Values at each vertex are summed in sorted order, so the result does not
/// depend on the order of `samples`.
pub fn average_repetitions(samples: &[BrainSample]) -> Result<BrainSample> {
    let first = samples.first().ok_or_else(|| invalid("no samples to average"))?;
    for s in samples {
        if s.stimulus_id != first.stimulus_id {
            return Err(invalid(format!(
                "cannot average stimuli `{}` and `{}`",
                first.stimulus_id, s.stimulus_id
            )));
        }
        if s.responses.dim() != first.responses.dim() || s.valid != first.valid {
            return Err(dim(format!("sample shapes differ for stimulus `{}`", s.stimulus_id)));
        }
    }
    if samples.len() == 1 {
        return Ok(first.clone());
    }
    let total: usize = samples.iter().map(|s| s.repetitions_averaged).sum();
    let mut responses = Array2::<f32>::zeros(first.responses.dim());
    let mut buf = Vec::with_capacity(samples.len());
    for ((i, j), &ok) in first.valid.indexed_iter() {
        if !ok {
            continue;
        }
        buf.clear();
        buf.extend(samples.iter().map(|s| s.responses[[i, j]] as f64));
        buf.sort_by(|a, b| a.total_cmp(b));
        responses[[i, j]] = (buf.iter().sum::<f64>() / samples.len() as f64) as f32;
    }
    Ok(BrainSample {
        stimulus_id: first.stimulus_id.clone(),
        responses,
        valid: first.valid.clone(),
        repetitions_averaged: total,
    })
}

/// Mean vertex-wise SNR per parcel from repeated measurements.
///
/// `by_stimulus[s]` holds the repetitions of stimulus `s`. For every vertex
/// the signal term is the variance across stimuli of the repetition mean and
/// the noise term is the mean within-stimulus variance across repetitions.
pub fn estimate_parcel_snr(by_stimulus: &[Vec<BrainSample>]) -> Result<Vec<f64>> {
    if by_stimulus.len() < 2 {
        return Err(invalid("SNR estimation needs at least two stimuli"));
    }
    let reference = by_stimulus[0].first().ok_or_else(|| invalid("stimulus without repetitions"))?;
    let (p, v_max) = reference.responses.dim();
    for reps in by_stimulus {
        if reps.len() < 2 {
            return Err(invalid("SNR estimation needs at least two repetitions per stimulus"));
        }
        if reps.iter().any(|r| r.responses.dim() != (p, v_max)) {
            return Err(dim("repetitions have inconsistent shapes"));
        }
    }
    let n_stim = by_stimulus.len() as f64;
    let mut snr = vec![0.0; p];
    for (i, out) in snr.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for j in 0..v_max {
            if !reference.valid[[i, j]] {
                continue;
            }
            let mut means = Vec::with_capacity(by_stimulus.len());
            let mut noise = 0.0;
            for reps in by_stimulus {
                let r = reps.len() as f64;
                let m = reps.iter().map(|s| s.responses[[i, j]] as f64).sum::<f64>() / r;
                let v = reps.iter().map(|s| (s.responses[[i, j]] as f64 - m).powi(2)).sum::<f64>() / (r - 1.0);
                means.push(m);
                noise += v;
            }
            noise /= n_stim;
            let grand = means.iter().sum::<f64>() / n_stim;
            let signal = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n_stim - 1.0);
            acc += if noise > 0.0 { signal / noise } else { 0.0 };
            count += 1;
        }
        *out = if count > 0 { acc / count as f64 } else { 0.0 };
    }
    Ok(snr)
}

/// Assigns each parcel the ROI label covering more than half of its vertices.
///
/// When several ROIs qualify (overlapping ROI definitions) the one with the
/// largest overlap wins, earlier ROIs winning ties.
pub fn assign_roi_labels(parcel_vertices: &[Vec<u32>], rois: &[(String, HashSet<u32>)]) -> Vec<Option<String>> {
    parcel_vertices
        .iter()
        .map(|verts| {
            if verts.is_empty() {
                return None;
            }
            let mut best: Option<(usize, &str)> = None;
            for (label, members) in rois {
                let hits = verts.iter().filter(|v| members.contains(v)).count();
                if 2 * hits > verts.len() && best.is_none_or(|(h, _)| hits > h) {
                    best = Some((hits, label));
                }
            }
            best.map(|(_, l)| l.to_string())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parcel(id: u32, hemisphere: Hemisphere, vertex_count: usize, snr: f64) -> Parcel {
        Parcel { id, hemisphere, vertex_count, snr, roi_label: None }
    }

    #[test]
    fn picks_highest_snr_per_hemisphere() {
        let atlas = ParcelAtlas::new(vec![
            parcel(0, Hemisphere::Left, 2, 0.5),
            parcel(1, Hemisphere::Left, 2, 0.9),
            parcel(2, Hemisphere::Right, 2, 0.1),
            parcel(3, Hemisphere::Right, 2, 0.7),
        ])
        .unwrap();
        let sel = select_top_k_parcels(&atlas, 1).unwrap();
        assert_eq!(sel.ids(), vec![1, 3]);
    }

    #[test]
    fn equal_snr_prefers_low_ids() {
        let atlas = ParcelAtlas::new(
            (0..8).map(|i| parcel(7 - i, if i % 2 == 0 { Hemisphere::Left } else { Hemisphere::Right }, 1, 1.0)).collect(),
        )
        .unwrap();
        // left ids: 7,5,3,1; right ids: 6,4,2,0
        let sel = select_top_k_parcels(&atlas, 2).unwrap();
        assert_eq!(sel.ids(), vec![1, 3, 0, 2]);
    }

    #[test]
    fn k_equal_to_hemisphere_size_keeps_everything() {
        let atlas = ParcelAtlas::new(vec![
            parcel(0, Hemisphere::Left, 1, 0.2),
            parcel(1, Hemisphere::Left, 1, 0.4),
            parcel(2, Hemisphere::Right, 1, 0.3),
            parcel(3, Hemisphere::Right, 1, 0.1),
        ])
        .unwrap();
        let sel = select_top_k_parcels(&atlas, 2).unwrap();
        let mut ids = sel.ids();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(sel.ids(), vec![1, 0, 2, 3]);
    }

    #[test]
    fn too_few_parcels_is_a_dimension_error() {
        let atlas = ParcelAtlas::new(vec![parcel(0, Hemisphere::Left, 1, 0.2), parcel(1, Hemisphere::Right, 1, 0.1)]).unwrap();
        assert!(matches!(select_top_k_parcels(&atlas, 2), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn atlas_rejects_duplicates_and_empty_parcels() {
        assert!(ParcelAtlas::new(vec![parcel(0, Hemisphere::Left, 1, 0.0), parcel(0, Hemisphere::Right, 1, 0.0)]).is_err());
        assert!(ParcelAtlas::new(vec![parcel(0, Hemisphere::Left, 0, 0.0)]).is_err());
    }

    fn small_atlas() -> ParcelAtlas {
        ParcelAtlas::new(vec![parcel(10, Hemisphere::Left, 3, 1.0), parcel(11, Hemisphere::Right, 5, 1.0)]).unwrap()
    }

    #[test]
    fn restrict_keeps_selected_rows_and_repads() {
        let atlas = small_atlas();
        let s = pad_parcel_responses("s", &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0, 8.0]], &atlas).unwrap();
        let sub = ParcelAtlas::new(vec![parcel(10, Hemisphere::Left, 3, 1.0)]).unwrap();
        let r = s.restrict(&atlas, &sub).unwrap();
        assert_eq!(r.v_max(), 3);
        assert_eq!(r.unpad(), vec![vec![1.0, 2.0, 3.0]]);
        let other = ParcelAtlas::new(vec![parcel(99, Hemisphere::Left, 3, 1.0)]).unwrap();
        assert!(s.restrict(&atlas, &other).is_err());
    }

    #[test]
    fn padding_left_aligns_with_zero_tail() {
        let s = pad_parcel_responses("s", &[vec![1.0, 2.0, 3.0], vec![1.0; 5]], &small_atlas()).unwrap();
        assert_eq!(s.responses().row(0).to_vec(), vec![1.0, 2.0, 3.0, 0.0, 0.0]);
        assert_eq!(s.valid().row(0).to_vec(), vec![true, true, true, false, false]);
        assert!(s.valid().row(1).iter().all(|&v| v));
    }

    #[test]
    fn padding_rejects_wrong_lengths() {
        assert!(pad_parcel_responses("s", &[vec![], vec![1.0; 5]], &small_atlas()).is_err());
        assert!(pad_parcel_responses("s", &[vec![1.0; 3]], &small_atlas()).is_err());
    }

    #[test]
    fn averaging_examples() {
        let atlas = ParcelAtlas::new(vec![parcel(0, Hemisphere::Left, 1, 1.0)]).unwrap();
        let mk = |v: f32| pad_parcel_responses("s", &[vec![v]], &atlas).unwrap();
        let single = average_repetitions(&[mk(4.0)]).unwrap();
        assert_eq!(single, mk(4.0));
        let sym = average_repetitions(&[mk(2.5), mk(-2.5)]).unwrap();
        assert_eq!(sym.responses()[[0, 0]], 0.0);
        let three = average_repetitions(&[mk(1.0), mk(2.0), mk(3.0)]).unwrap();
        assert_eq!(three.responses()[[0, 0]], 2.0);
        assert_eq!(three.repetitions_averaged, 3);
        let mut other = mk(1.0);
        other.stimulus_id = "t".into();
        assert!(matches!(average_repetitions(&[mk(1.0), other]), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn snr_estimator_separates_signal_from_noise() {
        use rand::{Rng, SeedableRng};
        let atlas = ParcelAtlas::new(vec![parcel(0, Hemisphere::Left, 4, 0.0), parcel(1, Hemisphere::Right, 4, 0.0)]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Vec<BrainSample>> = (0..200)
            .map(|s| {
                let signal: f32 = rng.random_range(-2.0..2.0);
                (0..4)
                    .map(|_| {
                        let sig: Vec<f32> = (0..4).map(|_| signal + rng.random_range(-0.5..0.5)).collect();
                        let noise: Vec<f32> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
                        pad_parcel_responses(&s.to_string(), &[sig, noise], &atlas).unwrap()
                    })
                    .collect()
            })
            .collect();
        let snr = estimate_parcel_snr(&data).unwrap();
        assert!(snr[0] > 10.0, "{snr:?}");
        assert!(snr[1] < 0.5, "{snr:?}");
    }

    #[test]
    fn roi_label_needs_strict_majority() {
        let rois = vec![("V1".to_string(), [1u32, 2, 3].into_iter().collect()), ("LOC".to_string(), [4u32, 5].into_iter().collect())];
        let labels = assign_roi_labels(&[vec![1, 2, 9], vec![1, 9], vec![4, 5, 1, 2], vec![]], &rois);
        assert_eq!(labels, vec![Some("V1".to_string()), None, None, None]);
    }

    fn arb_atlas() -> impl Strategy<Value = (ParcelAtlas, usize)> {
        (1usize..6, 0usize..5, 0usize..5).prop_flat_map(|(k, extra_l, extra_r)| {
            let n = 2 * k + extra_l + extra_r;
            (proptest::collection::vec((0u8..4, 1usize..6), n), Just((k, extra_l)))
        })
        .prop_map(|(specs, (k, extra_l))| {
            let left = k + extra_l;
            let parcels = specs
                .into_iter()
                .enumerate()
                .map(|(i, (snr, vc))| {
                    let hemi = if i < left { Hemisphere::Left } else { Hemisphere::Right };
                    parcel(i as u32, hemi, vc, snr as f64 * 0.25)
                })
                .collect();
            (ParcelAtlas::new(parcels).unwrap(), k)
        })
    }

    proptest! {
        #[test]
        fn selection_keeps_the_best_k((atlas, k) in arb_atlas()) {
            let sel = select_top_k_parcels(&atlas, k).unwrap();
            prop_assert_eq!(sel.len(), 2 * k);
            let chosen: HashSet<u32> = sel.ids().into_iter().collect();
            for hemi in [Hemisphere::Left, Hemisphere::Right] {
                let side: Vec<&Parcel> = atlas.parcels().iter().filter(|p| p.hemisphere == hemi).collect();
                for out in side.iter().filter(|p| !chosen.contains(&p.id)) {
                    for inn in side.iter().filter(|p| chosen.contains(&p.id)) {
                        prop_assert!(out.snr < inn.snr || (out.snr == inn.snr && out.id > inn.id));
                    }
                }
            }
        }

        #[test]
        fn pad_then_unpad_is_identity(lens in proptest::collection::vec(1usize..7, 1..6), seed in 0u64..1000) {
            let parcels = lens.iter().enumerate().map(|(i, &n)| parcel(i as u32, Hemisphere::Left, n, 0.0)).collect();
            let atlas = ParcelAtlas::new(parcels).unwrap();
            let raw: Vec<Vec<f32>> = lens.iter().enumerate()
                .map(|(i, &n)| (0..n).map(|j| ((seed as usize + 31 * i + 7 * j) % 13) as f32 - 6.0).collect())
                .collect();
            let s = pad_parcel_responses("x", &raw, &atlas).unwrap();
            prop_assert_eq!(s.unpad(), raw);
        }

        #[test]
        fn averaging_ignores_input_order(values in proptest::collection::vec(-100.0f32..100.0, 2..8), rot in 0usize..8) {
            let atlas = ParcelAtlas::new(vec![parcel(0, Hemisphere::Left, 1, 1.0)]).unwrap();
            let samples: Vec<BrainSample> = values.iter().map(|&v| pad_parcel_responses("s", &[vec![v]], &atlas).unwrap()).collect();
            let mut rotated = samples.clone();
            rotated.rotate_left(rot % samples.len());
            rotated.reverse();
            prop_assert_eq!(average_repetitions(&samples).unwrap(), average_repetitions(&rotated).unwrap());
        }
    }
}

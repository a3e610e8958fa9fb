//! Parcel-wise linear maps from padded vertex responses to token embeddings,
//! and token dropout.
//!
//! The maps live in a [`ParamStore`] under [`WEIGHT`] (`[p, v_max, f]`, or
//! `[v_max, f]` for the shared variant) and [`BIAS`] (`[p, f]`).

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Float, Var};
use crate::error::{dim, invalid, Error, Result};
use crate::params::{Graph, ParamStore};
use crate::parcel::BrainSample;

pub const WEIGHT: &str = "tokenizer.weight";
pub const BIAS: &str = "tokenizer.bias";
pub const PREFIX: &str = "tokenizer.";

/// Adds freshly initialized maps to `store`: weights `N(0, 1/v_max)`, bias 0.
pub fn init_maps(store: &mut ParamStore<f32>, p: usize, v_max: usize, f: usize, shared: bool, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, (1.0 / v_max as f64).sqrt()).unwrap();
    let shape: Vec<usize> = if shared { vec![v_max, f] } else { vec![p, v_max, f] };
    let w = ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(rng) as f32);
    store.insert(WEIGHT, w);
    store.insert(BIAS, ArrayD::zeros(IxDyn(&[p, f])));
}

/// `(p, v_max, f, shared)` of the maps in `store`.
pub fn map_dims<F: Float>(store: &ParamStore<F>) -> Result<(usize, usize, usize, bool)> {
    let w = store.get(WEIGHT)?.shape().to_vec();
    let b = store.get(BIAS)?.shape().to_vec();
    match (w.as_slice(), b.as_slice()) {
        ([p, v, f], [pb, fb]) if p == pb && f == fb => Ok((*p, *v, *f, false)),
        ([v, f], [p, fb]) if f == fb => Ok((*p, *v, *f, true)),
        _ => Err(Error::Checkpoint(format!("inconsistent tokenizer shapes {w:?} / {b:?}"))),
    }
}

/// Stacks padded responses into `[n, p, v_max]`.
pub fn responses_tensor(batch: &[BrainSample]) -> Result<Array3<f32>> {
    let first = batch.first().ok_or_else(|| invalid("empty batch"))?;
    let (p, v) = (first.num_parcels(), first.v_max());
    let mut out = Array3::zeros((batch.len(), p, v));
    for (i, s) in batch.iter().enumerate() {
        if s.responses().dim() != (p, v) {
            return Err(dim(format!("sample {} has shape {:?}, expected {:?}", s.stimulus_id, s.responses().dim(), (p, v))));
        }
        out.index_axis_mut(Axis(0), i).assign(s.responses());
    }
    Ok(out)
}

/// `E[s, i, :] = R[s, i, :] . w_i + bias_i` on the tape. `responses` is
/// `[n, p, v_max]`.
pub fn encode_graph<F: Float>(g: &mut Graph<'_, F>, responses: Var) -> Result<Var> {
    let w = g.param(WEIGHT)?;
    let b = g.param(BIAS)?;
    let rs = g.tape.shape(responses).to_vec();
    let ws = g.tape.shape(w).to_vec();
    let bs = g.tape.shape(b).to_vec();
    if rs.len() != 3 {
        return Err(dim(format!("responses must be [n, p, v_max], got {rs:?}")));
    }
    let (n, p, v) = (rs[0], rs[1], rs[2]);
    let mapped = if ws.len() == 2 {
        if ws[0] != v || bs[0] != p {
            return Err(dim(format!("responses {rs:?} do not match shared map {ws:?} / bias {bs:?}")));
        }
        g.tape.linear(responses, w)
    } else {
        if ws[0] != p || ws[1] != v {
            return Err(dim(format!("responses {rs:?} do not match maps {ws:?}")));
        }
        let f = ws[2];
        let by_parcel = g.tape.permute(responses, &[1, 0, 2]);
        let prod = g.tape.bmm(by_parcel, w, false);
        let prod = g.tape.permute(prod, &[1, 0, 2]);
        debug_assert_eq!(g.tape.shape(prod), &[n, p, f]);
        prod
    };
    Ok(g.tape.add(mapped, b))
}

/// Token embeddings `[n, p, f]` for a batch (no gradient tracking).
pub fn encode(store: &ParamStore<f32>, batch: &[BrainSample]) -> Result<Array3<f32>> {
    let r = responses_tensor(batch)?;
    let mut g = Graph::inference(store);
    let rv = g.tape.constant(r.into_dyn());
    let e = encode_graph(&mut g, rv)?;
    Ok(g.tape.value(e).clone().into_dimensionality().unwrap())
}

/// Token-level binary mask `[n, p, 1]` and the retention rate of each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub mask: Array3<f32>,
    pub rates: Vec<f64>,
}

impl DropoutMask {
    pub fn keep_all(n: usize, p: usize) -> Self {
        Self { mask: Array3::ones((n, p, 1)), rates: vec![1.0; n] }
    }

    /// Zeroes the listed parcel rows in every sample.
    pub fn zero_rows(n: usize, p: usize, rows: &[usize]) -> Result<Self> {
        let mut m = Self::keep_all(n, p);
        for &r in rows {
            if r >= p {
                return Err(invalid(format!("parcel row {r} out of range for p = {p}")));
            }
            m.mask.slice_mut(ndarray::s![.., r, ..]).fill(0.0);
        }
        Ok(m)
    }

    /// Per sample `r ~ U(0, 1)` (or `forced_rate`), then each token kept with
    /// probability `r`.
    pub fn draw(n: usize, p: usize, forced_rate: Option<f64>, rng: &mut impl Rng) -> Self {
        let mut mask = Array3::zeros((n, p, 1));
        let mut rates = Vec::with_capacity(n);
        for s in 0..n {
            let r = forced_rate.unwrap_or_else(|| rng.random::<f64>());
            rates.push(r);
            for i in 0..p {
                if rng.random::<f64>() < r {
                    mask[[s, i, 0]] = 1.0;
                }
            }
        }
        Self { mask, rates }
    }

    pub fn kept_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as f64).sum::<f64>() / self.mask.len().max(1) as f64
    }

    pub fn apply(&self, e: &Array3<f32>) -> Result<Array3<f32>> {
        let (n, p, _) = e.dim();
        if self.mask.dim() != (n, p, 1) {
            return Err(dim(format!("mask {:?} does not match embeddings {:?}", self.mask.dim(), e.dim())));
        }
        Ok(e * &self.mask)
    }
}

/// Training-time dropout: draws a mask and applies it.
pub fn apply_token_dropout(
    e: &Array3<f32>,
    forced_rate: Option<f64>,
    rng: &mut impl Rng,
) -> Result<(Array3<f32>, DropoutMask)> {
    let (n, p, _) = e.dim();
    let mask = DropoutMask::draw(n, p, forced_rate, rng);
    Ok((mask.apply(e)?, mask))
}

/// Splits the maps into per-parcel tensors keyed `maps.{id}.weight` and
/// `maps.{id}.bias` (shared variant: `maps.shared.weight`).
pub fn export_maps(store: &ParamStore<f32>, parcel_ids: &[u32]) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let (p, _, _, shared) = map_dims(store)?;
    if parcel_ids.len() != p {
        return Err(dim(format!("{} parcel ids for {p} maps", parcel_ids.len())));
    }
    let w = store.get(WEIGHT)?;
    let b = store.get(BIAS)?;
    let mut out = BTreeMap::new();
    if shared {
        out.insert("maps.shared.weight".to_string(), w.clone());
    }
    for (i, id) in parcel_ids.iter().enumerate() {
        if !shared {
            out.insert(format!("maps.{id}.weight"), w.index_axis(Axis(0), i).to_owned());
        }
        out.insert(format!("maps.{id}.bias"), b.index_axis(Axis(0), i).to_owned());
    }
    Ok(out)
}

/// Inverse of [`export_maps`]; removes the consumed entries from `tensors`.
pub fn import_maps(tensors: &mut BTreeMap<String, ArrayD<f32>>, parcel_ids: &[u32], store: &mut ParamStore<f32>) -> Result<()> {
    let mut take = |k: String| tensors.remove(&k).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{k}`")));
    let shared = take("maps.shared.weight".to_string()).ok();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for id in parcel_ids {
        if shared.is_none() {
            weights.push(take(format!("maps.{id}.weight"))?);
        }
        biases.push(take(format!("maps.{id}.bias"))?);
    }
    let stack = |parts: &[ArrayD<f32>]| -> Result<ArrayD<f32>> {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Checkpoint(format!("parcel maps differ in shape: {e}")))
    };
    store.insert(WEIGHT, match shared {
        Some(w) => w,
        None => stack(&weights)?,
    });
    store.insert(BIAS, stack(&biases)?);
    map_dims(store)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_gradients;
    use crate::parcel::{pad_parcel_responses, Hemisphere, Parcel, ParcelAtlas};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn atlas(counts: &[usize]) -> ParcelAtlas {
        ParcelAtlas::new(
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| Parcel {
                    id: 10 + i as u32,
                    hemisphere: if i % 2 == 0 { Hemisphere::Left } else { Hemisphere::Right },
                    vertex_count: c,
                    snr: 1.0,
                    roi_label: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_batch(atlas: &ParcelAtlas, n: usize, rng: &mut ChaCha8Rng) -> Vec<BrainSample> {
        (0..n)
            .map(|s| {
                let raw: Vec<Vec<f32>> = atlas
                    .parcels()
                    .iter()
                    .map(|p| (0..p.vertex_count).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                pad_parcel_responses(&format!("s{s}"), &raw, atlas).unwrap()
            })
            .collect()
    }

    fn store(p: usize, v: usize, f: usize, shared: bool, seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_maps(&mut s, p, v, f, shared, &mut rng);
        let b = ArrayD::from_shape_simple_fn(IxDyn(&[p, f]), || rng.random_range(-0.5..0.5));
        s.insert(BIAS, b);
        s
    }

    #[test]
    fn zero_responses_give_zero_tokens() {
        let a = atlas(&[3, 5, 2]);
        let mut s = store(3, 5, 4, false, 1);
        s.insert(BIAS, ArrayD::zeros(IxDyn(&[3, 4])));
        let batch = vec![pad_parcel_responses("z", &[vec![0.0; 3], vec![0.0; 5], vec![0.0; 2]], &a).unwrap()];
        assert!(encode(&s, &batch).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_maps_reproduce_padded_rows() {
        let a = atlas(&[3, 5, 2]);
        let mut s = ParamStore::new();
        let eye = Array2::<f32>::eye(5);
        let w = ndarray::stack(Axis(0), &[eye.view(), eye.view(), eye.view()]).unwrap();
        s.insert(WEIGHT, w.into_dyn());
        s.insert(BIAS, ArrayD::zeros(IxDyn(&[3, 5])));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&a, 2, &mut rng);
        let e = encode(&s, &batch).unwrap();
        for (i, b) in batch.iter().enumerate() {
            assert_eq!(e.index_axis(Axis(0), i), b.responses());
        }
    }

    #[test]
    fn matches_naive_per_parcel_loop() {
        let a = atlas(&[3, 5, 2, 4]);
        let (p, v, f) = (4, 5, 6);
        for shared in [false, true] {
            let s = store(p, v, f, shared, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let batch = random_batch(&a, 3, &mut rng);
            let e = encode(&s, &batch).unwrap();
            let w = s.get(WEIGHT).unwrap();
            let b = s.get(BIAS).unwrap();
            for (n, sample) in batch.iter().enumerate() {
                for i in 0..p {
                    for k in 0..f {
                        let mut acc = b[[i, k]] as f64;
                        for j in 0..v {
                            let wij = if shared { w[[j, k]] } else { w[[i, j, k]] };
                            acc += sample.responses()[[i, j]] as f64 * wij as f64;
                        }
                        assert!((e[[n, i, k]] as f64 - acc).abs() < 1e-5, "shared={shared}");
                    }
                }
            }
        }
    }

    #[test]
    fn mismatched_batch_is_a_dimension_error() {
        let s = store(3, 5, 4, false, 1);
        let a = atlas(&[3, 4]);
        let batch = random_batch(&a, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(encode(&s, &batch), Err(Error::Dimension(_))));
    }

    #[test]
    fn dropout_boundaries_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = Array3::from_shape_fn((2, 7, 3), |(a, b, c)| (a + b + c) as f32 + 1.0);
        let (kept, m) = apply_token_dropout(&e, Some(1.0), &mut rng).unwrap();
        assert_eq!(kept, e);
        assert!(m.mask.iter().all(|&v| v == 1.0));
        let (dropped, m) = apply_token_dropout(&e, Some(0.0), &mut rng).unwrap();
        assert!(dropped.iter().all(|&v| v == 0.0));
        assert!(m.mask.iter().all(|&v| v == 0.0));
        let m = DropoutMask::draw(100, 100, Some(0.3), &mut rng);
        assert!((0.28..=0.32).contains(&m.kept_fraction()), "{}", m.kept_fraction());
    }

    #[test]
    fn dropout_is_constant_across_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let e = Array3::from_elem((8, 12, 5), 2.0f32);
        let (out, m) = apply_token_dropout(&e, None, &mut rng).unwrap();
        for s in 0..8 {
            assert!((0.0..1.0).contains(&m.rates[s]));
            for i in 0..12 {
                let row = out.slice(ndarray::s![s, i, ..]);
                let expect = 2.0 * m.mask[[s, i, 0]];
                assert!(row.iter().all(|&v| v == expect));
            }
        }
    }

    #[test]
    fn mapper_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, p, v, f) = (2, 3, 4, 5);
        let mut rnd = |shape: &[usize]| ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0));
        let r = rnd(&[n, p, v]);
        let target = rnd(&[n, p, f]);
        let params = vec![rnd(&[p, v, f]), rnd(&[p, f])];
        let report = check_gradients(
            &params,
            |tape, vars| {
                let empty = ParamStore::<f64>::new();
                let mut g = Graph::inference(&empty);
                std::mem::swap(&mut g.tape, tape);
                g.bind(WEIGHT, vars[0]);
                g.bind(BIAS, vars[1]);
                let rv = g.tape.constant(r.clone());
                let e = encode_graph(&mut g, rv).unwrap();
                let t = g.tape.constant(target.clone());
                let d = g.tape.sub(e, t);
                let sq = g.tape.mul(d, d);
                let out = g.tape.mean_all(sq);
                std::mem::swap(&mut g.tape, tape);
                out
            },
            1e-6,
            1e-8,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn export_import_round_trip() {
        for shared in [false, true] {
            let s = store(3, 4, 2, shared, 5);
            let ids = [7, 3, 11];
            let mut t = export_maps(&s, &ids).unwrap();
            if !shared {
                assert_eq!(t["maps.3.weight"], s.get(WEIGHT).unwrap().index_axis(Axis(0), 1).to_owned());
            }
            let mut back = ParamStore::new();
            import_maps(&mut t, &ids, &mut back).unwrap();
            assert!(t.is_empty());
            assert_eq!(back, s);
        }
    }

    proptest! {
        #[test]
        fn encode_is_linear_without_bias(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let at = atlas(&[2, 4, 3]);
            let mut s = store(3, 4, 3, false, seed);
            s.insert(BIAS, ArrayD::zeros(IxDyn(&[3, 3])));
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = random_batch(&at, 2, &mut rng);
            let y = random_batch(&at, 2, &mut rng);
            let combo: Vec<BrainSample> = x
                .iter()
                .zip(&y)
                .map(|(xs, ys)| {
                    let raw: Vec<Vec<f32>> = xs
                        .unpad()
                        .iter()
                        .zip(ys.unpad())
                        .map(|(u, w)| u.iter().zip(w).map(|(u, w)| a * u + b * w).collect())
                        .collect();
                    pad_parcel_responses("c", &raw, &at).unwrap()
                })
                .collect();
            let lhs = encode(&s, &combo).unwrap();
            let rhs = encode(&s, &x).unwrap() * a + encode(&s, &y).unwrap() * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-4);
            }
        }

        #[test]
        fn padded_positions_are_inert(seed in 0u64..1000, junk in -5.0f32..5.0) {
            let at = atlas(&[2, 4, 3]);
            let mut s = store(3, 4, 3, false, seed);
            // Perturb map rows that only ever meet padding.
            let w = s.get_mut(WEIGHT).unwrap();
            w[[0, 3, 1]] += junk;
            w[[2, 3, 0]] -= junk;
            let batch = random_batch(&at, 2, &mut ChaCha8Rng::seed_from_u64(seed));
            let before = encode(&store(3, 4, 3, false, seed), &batch).unwrap();
            let after = encode(&s, &batch).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}

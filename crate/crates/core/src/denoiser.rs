//! Small U-Net noise predictor with brain-token cross-attention after every
//! residual block.
//!
//! Tensors are channels-last `[batch, height, width, channels]`. With
//! `depth = D` the network has `2D + 1` cross-attention layers, visited in
//! the order down-0 .. down-(D-1), middle, up-(D-1) .. up-0; that visiting
//! order is the layer index used in attention traces.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Var};
use crate::error::{dim, invalid, Error, Result};
use crate::params::{Graph, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { image_size: 32, base_channels: 32, depth: 2, heads: 4, head_dim: 64, time_dim: 64 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: format!("denoiser.{field}"), reason: reason.into() });
        if self.depth == 0 {
            return bad("depth", "must be at least 1");
        }
        if self.image_size == 0 || self.image_size % (1 << self.depth) != 0 {
            return bad("image_size", "must be a positive multiple of 2^depth");
        }
        if self.base_channels == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("heads", "channel, head and head-dim counts must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim", "must be a positive even number");
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        2 * self.depth + 1
    }

    pub fn attention_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Spatial grid `(height, width)` of every cross-attention layer.
    pub fn layer_grids(&self) -> Vec<(usize, usize)> {
        let s = self.image_size;
        let mut g: Vec<(usize, usize)> = (0..self.depth).map(|l| (s >> l, s >> l)).collect();
        g.push((s >> self.depth, s >> self.depth));
        g.extend((0..self.depth).rev().map(|l| (s >> l, s >> l)));
        g
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(self.depth - 1)
    }
}

/// Result of one forward pass on a graph.
pub struct Forward {
    /// Predicted noise `[b, h, w, 3]`.
    pub eps: Var,
    /// Post-softmax attention per layer, each `[b * heads, q, p]`.
    pub attention: Vec<Var>,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> ArrayD<f32> {
    let n = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || n.sample(rng) as f32)
}

fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

fn init_linear(store: &mut ParamStore<f32>, name: &str, fan_in: usize, out: usize, bias: bool, rng: &mut impl Rng) {
    store.insert(format!("{name}.w"), normal_tensor(&[fan_in, out], (1.0 / fan_in as f64).sqrt(), rng));
    if bias {
        store.insert(format!("{name}.b"), zeros(&[out]));
    }
}

fn init_conv(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    init_linear(store, name, 9 * cin, cout, true, rng);
}

fn init_res(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut impl Rng) {
    init_conv(store, &format!("{name}.conv1"), cin, cout, rng);
    init_linear(store, &format!("{name}.temb"), tdim, cout, true, rng);
    init_conv(store, &format!("{name}.conv2"), cout, cout, rng);
    if cin != cout {
        init_linear(store, &format!("{name}.skip"), cin, cout, false, rng);
    }
}

pub fn attention_prefix(layer: usize) -> String {
    format!("attn{layer}")
}

/// Initializes the cross-attention projections of one layer.
pub fn init_cross_attention(
    store: &mut ParamStore<f32>,
    prefix: &str,
    channels: usize,
    token_dim: usize,
    heads: usize,
    head_dim: usize,
    rng: &mut impl Rng,
) {
    let width = heads * head_dim;
    init_linear(store, &format!("{prefix}.q"), channels, width, false, rng);
    init_linear(store, &format!("{prefix}.k"), token_dim, width, false, rng);
    init_linear(store, &format!("{prefix}.v"), token_dim, width, false, rng);
    init_linear(store, &format!("{prefix}.o"), width, channels, true, rng);
}

/// Adds every denoiser parameter to `store`. The output convolution starts at
/// zero.
pub fn init_denoiser(store: &mut ParamStore<f32>, cfg: &DenoiserConfig, token_dim: usize, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let t = cfg.time_dim;
    init_linear(store, "time.l1", t, t, true, rng);
    init_linear(store, "time.l2", t, t, true, rng);
    init_conv(store, "in", 3, cfg.base_channels, rng);
    let mut layer = 0;
    let mut cin = cfg.base_channels;
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        init_res(store, &format!("down{l}"), cin, c, t, rng);
        init_cross_attention(store, &attention_prefix(layer), c, token_dim, cfg.heads, cfg.head_dim, rng);
        layer += 1;
        cin = c;
    }
    init_res(store, "mid", cin, cin, t, rng);
    init_cross_attention(store, &attention_prefix(layer), cin, token_dim, cfg.heads, cfg.head_dim, rng);
    layer += 1;
    for l in (0..cfg.depth).rev() {
        let c = cfg.channels(l);
        init_res(store, &format!("up{l}"), cin + c, c, t, rng);
        init_cross_attention(store, &attention_prefix(layer), c, token_dim, cfg.heads, cfg.head_dim, rng);
        layer += 1;
        cin = c;
    }
    store.insert("out.w", zeros(&[9 * cfg.base_channels, 3]));
    store.insert("out.b", zeros(&[3]));
    Ok(())
}

/// Sinusoidal embedding `[n, dim]` of integer timesteps.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((t.len(), dim), |(i, j)| {
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t[i] as f64 * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

fn affine<F: Float>(g: &mut Graph<'_, F>, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let y = g.tape.linear(x, w);
    if bias {
        let b = g.param(&format!("{name}.b"))?;
        Ok(g.tape.add(y, b))
    } else {
        Ok(y)
    }
}

fn conv<F: Float>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.tape.conv3x3(x, w);
    Ok(g.tape.add(y, b))
}

fn norm_act<F: Float>(g: &mut Graph<'_, F>, x: Var) -> Var {
    let n = g.tape.layer_norm(x, LN_EPS);
    g.tape.silu(n)
}

fn ensure_finite<F: Float>(g: &Graph<'_, F>, v: Var, what: &str) -> Result<()> {
    if g.tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activations after {what}")))
    }
}

fn res_block<F: Float>(g: &mut Graph<'_, F>, x: Var, temb: Var, name: &str) -> Result<Var> {
    let h = norm_act(g, x);
    let h = conv(g, h, &format!("{name}.conv1"))?;
    let cout = *g.tape.shape(h).last().unwrap();
    let b = g.tape.shape(h)[0];
    let t = affine(g, temb, &format!("{name}.temb"), true)?;
    let t = g.tape.reshape(t, &[b, 1, 1, cout]);
    let h = g.tape.add(h, t);
    let h = norm_act(g, h);
    let h = conv(g, h, &format!("{name}.conv2"))?;
    let skip_name = format!("{name}.skip.w");
    let skip = if *g.tape.shape(x).last().unwrap() != cout {
        let w = g.param(&skip_name)?;
        g.tape.linear(x, w)
    } else {
        x
    };
    let out = g.tape.add(skip, h);
    ensure_finite(g, out, name)?;
    Ok(out)
}

/// Cross-attention of spatial tokens `x` (`[b, h, w, c]`) over brain tokens
/// (`[b, p, f]`): `A = softmax(Q K^T / sqrt(d))` per head, output
/// `x + (A V) W_o + b_o`. Returns the output and `A` as `[b * heads, q, p]`.
pub fn cross_attention<F: Float>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    x: Var,
    tokens: Var,
    heads: usize,
    head_dim: usize,
) -> Result<(Var, Var)> {
    let xs = g.tape.shape(x).to_vec();
    let ts = g.tape.shape(tokens).to_vec();
    if xs.len() != 4 || ts.len() != 3 || xs[0] != ts[0] {
        return Err(dim(format!("cross-attention inputs {xs:?} and {ts:?}")));
    }
    let (b, hh, ww, c) = (xs[0], xs[1], xs[2], xs[3]);
    let p = ts[1];
    if p == 0 {
        return Err(invalid("cross-attention needs at least one brain token"));
    }
    let (q, hd) = (hh * ww, heads * head_dim);
    let split = |g: &mut Graph<'_, F>, v: Var, n: usize| {
        let v = g.tape.reshape(v, &[b, n, heads, head_dim]);
        let v = g.tape.permute(v, &[0, 2, 1, 3]);
        g.tape.reshape(v, &[b * heads, n, head_dim])
    };
    let normed = g.tape.layer_norm(x, LN_EPS);
    let normed = g.tape.reshape(normed, &[b, q, c]);
    let qv = affine(g, normed, &format!("{prefix}.q"), false)?;
    let kv = affine(g, tokens, &format!("{prefix}.k"), false)?;
    let vv = affine(g, tokens, &format!("{prefix}.v"), false)?;
    if g.tape.shape(qv)[2] != hd || g.tape.shape(kv)[2] != hd {
        return Err(dim(format!("{prefix}: projections are not {heads} x {head_dim} wide")));
    }
    let qh = split(g, qv, q);
    let kh = split(g, kv, p);
    let vh = split(g, vv, p);
    let logits = g.tape.bmm(qh, kh, true);
    let logits = g.tape.scale(logits, F::from_f64(1.0 / (head_dim as f64).sqrt()));
    let attn = g.tape.softmax(logits);
    let mixed = g.tape.bmm(attn, vh, false);
    let mixed = g.tape.reshape(mixed, &[b, heads, q, head_dim]);
    let mixed = g.tape.permute(mixed, &[0, 2, 1, 3]);
    let mixed = g.tape.reshape(mixed, &[b, q, hd]);
    let out = affine(g, mixed, &format!("{prefix}.o"), true)?;
    let out = g.tape.reshape(out, &[b, hh, ww, c]);
    let out = g.tape.add(x, out);
    ensure_finite(g, out, prefix)?;
    Ok((out, attn))
}

/// Noise prediction for `x_t` (`[b, s, s, 3]`) at timesteps `t` given brain
/// tokens (`[b, p, f]`).
pub fn denoiser_forward<F: Float>(
    g: &mut Graph<'_, F>,
    cfg: &DenoiserConfig,
    x: Var,
    t: &[usize],
    tokens: Var,
) -> Result<Forward> {
    let xs = g.tape.shape(x).to_vec();
    if xs != [t.len(), cfg.image_size, cfg.image_size, 3] {
        return Err(dim(format!("input {xs:?} for {} timesteps at image size {}", t.len(), cfg.image_size)));
    }
    let temb = timestep_embedding(t, cfg.time_dim).mapv(F::from_f64).into_dyn();
    let temb = g.tape.constant(temb);
    let temb = affine(g, temb, "time.l1", true)?;
    let temb = g.tape.silu(temb);
    let temb = affine(g, temb, "time.l2", true)?;
    let temb = g.tape.silu(temb);

    let mut attention = Vec::with_capacity(cfg.num_layers());
    let mut layer = 0;
    let mut attend = |g: &mut Graph<'_, F>, h: Var| -> Result<Var> {
        let (out, a) = cross_attention(g, &attention_prefix(layer), h, tokens, cfg.heads, cfg.head_dim)?;
        attention.push(a);
        layer += 1;
        Ok(out)
    };

    let mut h = conv(g, x, "in")?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        if l > 0 {
            h = g.tape.avg_pool2(h);
        }
        h = res_block(g, h, temb, &format!("down{l}"))?;
        h = attend(g, h)?;
        skips.push(h);
    }
    h = g.tape.avg_pool2(h);
    h = res_block(g, h, temb, "mid")?;
    h = attend(g, h)?;
    for l in (0..cfg.depth).rev() {
        h = g.tape.upsample2(h);
        h = g.tape.concat_last(h, skips[l]);
        h = res_block(g, h, temb, &format!("up{l}"))?;
        h = attend(g, h)?;
    }
    let h = norm_act(g, h);
    let eps = conv(g, h, "out")?;
    ensure_finite(g, eps, "output convolution")?;
    Ok(Forward { eps, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig { image_size: 8, base_channels: 4, depth: 2, heads: 2, head_dim: 3, time_dim: 8 }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    fn attn_store(c: usize, f: usize, heads: usize, d: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_cross_attention(&mut s, "a", c, f, heads, d, &mut rng);
        let mut s = s.cast::<f64>();
        s.insert("a.o.b", random(&[c], &mut rng));
        s
    }

    fn run_attention(s: &ParamStore<f64>, x: &ArrayD<f64>, e: &ArrayD<f64>, heads: usize, d: usize) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let mut g = Graph::inference(s);
        let xv = g.tape.constant(x.clone());
        let ev = g.tape.constant(e.clone());
        let (o, a) = cross_attention(&mut g, "a", xv, ev, heads, d)?;
        Ok((g.tape.value(o).clone(), g.tape.value(a).clone()))
    }

    #[test]
    fn layer_grids_follow_the_unet() {
        let cfg = DenoiserConfig::default();
        assert_eq!(cfg.layer_grids(), vec![(32, 32), (16, 16), (8, 8), (16, 16), (32, 32)]);
        assert_eq!(cfg.num_layers(), 5);
        assert!(DenoiserConfig { depth: 0, ..cfg.clone() }.validate().is_err());
        assert!(DenoiserConfig { image_size: 30, ..cfg }.validate().is_err());
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = attn_store(4, 5, 2, 3, 2);
        let x = random(&[1, 2, 3, 4], &mut rng);
        let row = random(&[5], &mut rng);
        let e = ArrayD::from_shape_fn(IxDyn(&[1, 6, 5]), |i| row[i[2]]);
        let (_, a) = run_attention(&s, &x, &e, 2, 3).unwrap();
        assert_eq!(a.shape(), &[2, 6, 6]);
        assert!(a.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn single_parcel_attends_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, f, heads, d) = (4, 5, 2, 3);
        let s = attn_store(c, f, heads, d, 4);
        let x = random(&[1, 2, 2, c], &mut rng);
        let e = random(&[1, 1, f], &mut rng);
        let (o, a) = run_attention(&s, &x, &e, heads, d).unwrap();
        assert!(a.iter().all(|&v| v == 1.0));
        // Every query receives x + (e W_v) W_o + b_o.
        let v = e.to_shape((1, f)).unwrap().dot(&s.get("a.v.w").unwrap().view().into_dimensionality::<ndarray::Ix2>().unwrap());
        let proj = v.dot(&s.get("a.o.w").unwrap().view().into_dimensionality::<ndarray::Ix2>().unwrap());
        for y in 0..2 {
            for xx in 0..2 {
                for k in 0..c {
                    let expect = x[[0, y, xx, k]] + proj[[0, k]] + s.get("a.o.b").unwrap()[k];
                    assert!((o[[0, y, xx, k]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_matches_naive_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, f, heads, d, p) = (4, 6, 2, 3, 5);
        let s = attn_store(c, f, heads, d, 6);
        let x = random(&[2, 2, 3, c], &mut rng);
        let e = random(&[2, p, f], &mut rng);
        let (_, a) = run_attention(&s, &x, &e, heads, d).unwrap();
        let wq = s.get("a.q.w").unwrap();
        let wk = s.get("a.k.w").unwrap();
        for b in 0..2 {
            for i in 0..6 {
                let (yy, xx) = (i / 3, i % 3);
                let xrow: Vec<f64> = (0..c).map(|k| x[[b, yy, xx, k]]).collect();
                let mean = xrow.iter().sum::<f64>() / c as f64;
                let var = xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let xn: Vec<f64> = xrow.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect();
                for h in 0..heads {
                    let qv: Vec<f64> = (0..d).map(|j| (0..c).map(|k| xn[k] * wq[[k, h * d + j]]).sum()).collect();
                    let logits: Vec<f64> = (0..p)
                        .map(|pp| {
                            let kv: Vec<f64> = (0..d).map(|j| (0..f).map(|k| e[[b, pp, k]] * wk[[k, h * d + j]]).sum()).collect();
                            qv.iter().zip(&kv).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    let mut row_sum = 0.0;
                    for pp in 0..p {
                        let expect = (logits[pp] - m).exp() / z;
                        let got = a[[b * heads + h, i, pp]];
                        assert!((got - expect).abs() < 1e-5);
                        row_sum += got;
                    }
                    assert!((row_sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_token_set_is_rejected() {
        let s = attn_store(4, 5, 2, 3, 2);
        let x = ArrayD::zeros(IxDyn(&[1, 2, 2, 4]));
        let e = ArrayD::zeros(IxDyn(&[1, 0, 5]));
        assert!(run_attention(&s, &x, &e, 2, 3).is_err());
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, f, heads, d, p) = (3, 4, 2, 2, 2);
        let names = ["a.q.w", "a.k.w", "a.v.w", "a.o.w", "a.o.b"];
        let base = attn_store(c, f, heads, d, 8);
        let mut params: Vec<ArrayD<f64>> = names.iter().map(|n| base.get(n).unwrap().clone()).collect();
        // Two parcels and four queries; inputs are differentiated too.
        params.push(random(&[1, 2, 2, c], &mut rng));
        params.push(random(&[1, p, f], &mut rng));
        let target = random(&[1, 2, 2, c], &mut rng);
        let probe = random(&[heads, 4, p], &mut rng);
        let report = check_gradients(
            &params,
            |tape, vars| {
                let empty = ParamStore::<f64>::new();
                let mut g = Graph::inference(&empty);
                std::mem::swap(&mut g.tape, tape);
                for (n, v) in names.iter().zip(vars) {
                    g.bind(n, *v);
                }
                let (o, a) = cross_attention(&mut g, "a", vars[5], vars[6], heads, d).unwrap();
                let t = g.tape.constant(target.clone());
                let diff = g.tape.sub(o, t);
                let sq = g.tape.mul(diff, diff);
                let l1 = g.tape.mean_all(sq);
                let pr = g.tape.constant(probe.clone());
                let ap = g.tape.mul(a, pr);
                let l2 = g.tape.mean_all(ap);
                let out = g.tape.add(l1, l2);
                std::mem::swap(&mut g.tape, tape);
                out
            },
            1e-6,
            1e-8,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn tiny_forward(store: &ParamStore<f64>, x: &ArrayD<f64>, t: &[usize], e: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let cfg = tiny();
        let mut g = Graph::inference(store);
        let xv = g.tape.constant(x.clone());
        let ev = g.tape.constant(e.clone());
        let out = denoiser_forward(&mut g, &cfg, xv, t, ev).unwrap();
        (g.tape.value(out.eps).clone(), out.attention.iter().map(|a| g.tape.value(*a).clone()).collect())
    }

    fn tiny_store(f: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_denoiser(&mut s, &tiny(), f, &mut rng).unwrap();
        let mut s = s.cast::<f64>();
        s.insert("out.w", random(&[9 * 4, 3], &mut rng) * 0.3);
        s
    }

    #[test]
    fn forward_shapes_and_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = tiny_store(5, 10);
        let x = random(&[2, 8, 8, 3], &mut rng);
        let e = ArrayD::zeros(IxDyn(&[2, 3, 5]));
        let (eps, attn) = tiny_forward(&s, &x, &[10, 900], &e);
        assert_eq!(eps.shape(), &[2, 8, 8, 3]);
        assert!(eps.iter().all(|v| v.is_finite()));
        let grids = tiny().layer_grids();
        assert_eq!(attn.len(), grids.len());
        for (a, (h, w)) in attn.iter().zip(grids) {
            assert_eq!(a.shape(), &[4, h * w, 3]);
            assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn parcel_order_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = tiny_store(5, 12);
        let x = random(&[1, 8, 8, 3], &mut rng);
        let e = random(&[1, 4, 5], &mut rng);
        let perm = [2, 0, 3, 1];
        let ep = ArrayD::from_shape_fn(IxDyn(&[1, 4, 5]), |i| e[[0, perm[i[1]], i[2]]]);
        let (eps, attn) = tiny_forward(&s, &x, &[500], &e);
        let (eps_p, attn_p) = tiny_forward(&s, &x, &[500], &ep);
        for (a, b) in eps.iter().zip(eps_p.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, ap) in attn.iter().zip(&attn_p) {
            for h in 0..a.shape()[0] {
                for i in 0..a.shape()[1] {
                    for j in 0..4 {
                        assert!((ap[[h, i, j]] - a[[h, i, perm[j]]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = tiny_store(3, 14);
        let x = random(&[1, 8, 8, 3], &mut rng);
        let e = random(&[1, 2, 3], &mut rng);
        let target = random(&[1, 8, 8, 3], &mut rng);
        let names = ["attn2.k.w", "mid.conv1.w", "up0.skip.w", "time.l1.w", "out.w", "in.b"];
        let params: Vec<ArrayD<f64>> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
        let report = check_gradients(
            &params,
            |tape, vars| {
                let mut g = Graph::inference(&s);
                std::mem::swap(&mut g.tape, tape);
                for (n, v) in names.iter().zip(vars) {
                    g.bind(n, *v);
                }
                let xv = g.tape.constant(x.clone());
                let ev = g.tape.constant(e.clone());
                let out = denoiser_forward(&mut g, &tiny(), xv, &[300], ev).unwrap();
                let t = g.tape.constant(target.clone());
                let d = g.tape.sub(out.eps, t);
                let sq = g.tape.mul(d, d);
                let l = g.tape.mean_all(sq);
                std::mem::swap(&mut g.tape, tape);
                l
            },
            1e-6,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

//! Captured cross-attention over a sampling run and its on-disk dump format.
//!
//! The dump is little-endian: the magic `NDTRACE1`, then `u32` values for
//! the parcel count `p`, layer count `L` and head count `H`, `L` pairs of
//! `u32` grid dimensions `(height, width)`, a `u32` timestep count followed by
//! the timesteps in sampling order, and finally one `q^l x p` block of `f32`
//! per `(t, l, h)` in that nested order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{dim, invalid, Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"NDTRACE1";

/// Tolerance on the row sums of stored attention matrices.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    num_parcels: usize,
    heads: usize,
    layer_grids: Vec<(usize, usize)>,
    timesteps: Vec<usize>,
    records: BTreeMap<(usize, usize, usize), Array2<f32>>,
}

impl AttentionTrace {
    pub fn new(num_parcels: usize, heads: usize, layer_grids: Vec<(usize, usize)>) -> Result<Self> {
        if num_parcels == 0 || heads == 0 || layer_grids.is_empty() {
            return Err(invalid("a trace needs at least one parcel, head and layer"));
        }
        if layer_grids.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(invalid("layer grids must be non-empty"));
        }
        Ok(Self { num_parcels, heads, layer_grids, timesteps: Vec::new(), records: BTreeMap::new() })
    }

    pub fn num_parcels(&self) -> usize {
        self.num_parcels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_layers(&self) -> usize {
        self.layer_grids.len()
    }

    pub fn layer_grids(&self) -> &[(usize, usize)] {
        &self.layer_grids
    }

    /// Query count `q^l` of layer `l`.
    pub fn queries(&self, layer: usize) -> usize {
        let (h, w) = self.layer_grids[layer];
        h * w
    }

    /// Timesteps in the order they were recorded.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stores `A^(l,h,t)`, shape `q^l x p`.
    pub fn insert(&mut self, t: usize, layer: usize, head: usize, attention: Array2<f32>) -> Result<()> {
        if layer >= self.num_layers() || head >= self.heads {
            return Err(invalid(format!("layer {layer} / head {head} outside the trace layout")));
        }
        let expect = (self.queries(layer), self.num_parcels);
        if attention.dim() != expect {
            return Err(dim(format!("attention at layer {layer} is {:?}, expected {expect:?}", attention.dim())));
        }
        if !self.timesteps.contains(&t) {
            self.timesteps.push(t);
        }
        self.records.insert((t, layer, head), attention);
        Ok(())
    }

    pub fn get(&self, t: usize, layer: usize, head: usize) -> Option<&Array2<f32>> {
        self.records.get(&(t, layer, head))
    }

    /// The matrix for `(t, l, h)`, or an error naming the missing key.
    pub fn require(&self, t: usize, layer: usize, head: usize) -> Result<ArrayView2<'_, f32>> {
        self.get(t, layer, head)
            .map(|a| a.view())
            .ok_or_else(|| invalid(format!("trace has no attention for t={t}, layer {layer}, head {head}")))
    }

    /// Fails unless every `(l, h)` pair is present at `t`.
    pub fn check_complete(&self, t: usize) -> Result<()> {
        for l in 0..self.num_layers() {
            for h in 0..self.heads {
                self.require(t, l, h)?;
            }
        }
        Ok(())
    }

    /// Checks completeness at every timestep, strictly decreasing timesteps
    /// and row-stochastic attention.
    pub fn validate(&self) -> Result<()> {
        if self.timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("trace timesteps are not strictly decreasing"));
        }
        for &t in &self.timesteps {
            self.check_complete(t)?;
        }
        for (&(t, l, h), a) in &self.records {
            for (i, row) in a.rows().into_iter().enumerate() {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
                    return Err(invalid(format!("attention row {i} at t={t}, layer {l}, head {h} sums to {sum}")));
                }
            }
        }
        Ok(())
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        for &t in &self.timesteps {
            self.check_complete(t)?;
        }
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        let mut fields = vec![self.num_parcels, self.num_layers(), self.heads];
        fields.extend(self.layer_grids.iter().flat_map(|&(h, w)| [h, w]));
        fields.push(self.timesteps.len());
        fields.extend_from_slice(&self.timesteps);
        for v in fields {
            let v = u32::try_from(v).map_err(|_| invalid("trace dimension exceeds u32"))?;
            header.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = BufWriter::new(File::create(path).at(path)?);
        out.write_all(&header).at(path)?;
        for &t in &self.timesteps {
            for l in 0..self.num_layers() {
                for h in 0..self.heads {
                    for v in self.records[&(t, l, h)].iter() {
                        out.write_all(&v.to_le_bytes()).at(path)?;
                    }
                }
            }
        }
        out.flush().at(path)
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path).at(path)?);
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not an attention trace dump"));
        }
        let mut get = || -> Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let (p, layers, heads) = (get()?, get()?, get()?);
        if layers > 1 << 16 {
            return Err(bad("implausible layer count"));
        }
        let grids = (0..layers).map(|_| Ok((get()?, get()?))).collect::<Result<Vec<_>>>()?;
        let n_t = get()?;
        if n_t > 1 << 20 {
            return Err(bad("implausible timestep count"));
        }
        let timesteps = (0..n_t).map(|_| get()).collect::<Result<Vec<_>>>()?;
        let mut trace = Self::new(p, heads, grids).map_err(|e| bad(&e.to_string()))?;
        for &t in &timesteps {
            for l in 0..layers {
                let q = trace.queries(l);
                for h in 0..heads {
                    let mut bytes = vec![0u8; q * p * 4];
                    input.read_exact(&mut bytes).map_err(|_| bad("truncated attention data"))?;
                    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    trace.insert(t, l, h, Array2::from_shape_vec((q, p), values).unwrap())?;
                }
            }
        }
        if input.read(&mut [0u8; 1]).at(path)? != 0 {
            return Err(bad("trailing bytes after attention data"));
        }
        Ok(trace)
    }
}

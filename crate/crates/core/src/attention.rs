//! Duo-causal attention: depth-tagged ragged KV caches, 2-D mask
//! construction over (position, depth) coordinates, and masked scaled
//! dot-product attention.
//!
//! A key at (position j, depth k) is attendable from a query at
//! (position i, depth d) iff it was actually materialized and `j <= i` and
//! `k <= d`. When every token sits at depth 1 this reduces to standard
//! causal attention.

use crate::error::{bail_contract, bail_dim, Result, TahError};
use crate::tensor::{concat_rows, Scalar, Tensor};

/// (token position, iteration depth) coordinate of a cache entry or query.
/// Depths are 1-indexed; depth 1 is the standard forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttnCoord {
    pub position: usize,
    pub depth: usize,
}

impl AttnCoord {
    pub fn new(position: usize, depth: usize) -> Self {
        AttnCoord { position, depth }
    }
}

/// The duo-causal accessibility rule.
pub fn accessible(query: AttnCoord, key: AttnCoord, key_exists: bool) -> bool {
    key_exists && key.position <= query.position && key.depth <= query.depth
}

/// Additive attention mask: 0 where the key is accessible, -inf otherwise.
/// `cache_index` must list exactly the materialized entries, so existence is
/// implied by membership.
pub fn build_mask<T: Scalar>(queries: &[AttnCoord], cache_index: &[AttnCoord]) -> Tensor<T> {
    let nq = queries.len();
    let nk = cache_index.len();
    let mut data = vec![T::neg_infinity(); nq * nk];
    for (qi, &q) in queries.iter().enumerate() {
        for (ki, &k) in cache_index.iter().enumerate() {
            if accessible(q, k, true) {
                data[qi * nk + ki] = T::zero();
            }
        }
    }
    Tensor::from_vec(&[nq, nk], data, false).expect("mask shape")
}

struct DepthSegment<T: Scalar> {
    positions: Vec<usize>,
    chunks: Vec<(Tensor<T>, Tensor<T>)>,
    rows: usize,
}

impl<T: Scalar> DepthSegment<T> {
    fn new() -> Self {
        DepthSegment {
            positions: Vec::new(),
            chunks: Vec::new(),
            rows: 0,
        }
    }
}

struct LayerCache<T: Scalar> {
    depths: Vec<DepthSegment<T>>,
}

/// Ragged per-layer key/value store tagged with (position, depth).
/// Entries are laid out depth-major (all depth-1 keys, then depth-2, ...)
/// so the visible K/V for a depth-d query is a contiguous concatenation of
/// the shallower-to-current segments.
pub struct KvCache2D<T: Scalar> {
    num_layers: usize,
    d_max: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> KvCache2D<T> {
    pub fn new(num_layers: usize, d_max: usize) -> Self {
        let layers = (0..num_layers)
            .map(|_| LayerCache {
                depths: (0..d_max).map(|_| DepthSegment::new()).collect(),
            })
            .collect();
        KvCache2D {
            num_layers,
            d_max,
            layers,
        }
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    /// Number of materialized entries at `depth` for a layer.
    pub fn len_at(&self, layer: usize, depth: usize) -> usize {
        self.layers[layer].depths[depth - 1].rows
    }

    /// Appends key/value rows for `positions` at `depth`. Positions must be
    /// strictly increasing and extend the segment; entries at depth k > 1
    /// require the same position at depth k-1 to already exist.
    pub fn append(
        &mut self,
        layer: usize,
        depth: usize,
        positions: &[usize],
        keys: Tensor<T>,
        values: Tensor<T>,
    ) -> Result<()> {
        if depth == 0 || depth > self.d_max {
            bail_contract!("depth {depth} outside 1..={}", self.d_max);
        }
        if layer >= self.num_layers {
            bail_contract!("layer {layer} outside 0..{}", self.num_layers);
        }
        let (kr, _) = keys.dims2()?;
        let (vr, _) = values.dims2()?;
        if kr != positions.len() || vr != positions.len() {
            bail_dim!(
                "append: {} positions vs {kr} key rows / {vr} value rows",
                positions.len()
            );
        }
        {
            let seg = &self.layers[layer].depths[depth - 1];
            let mut last = seg.positions.last().copied();
            for &p in positions {
                if let Some(prev) = last {
                    if p <= prev {
                        return Err(TahError::Cache(format!(
                            "positions at depth {depth} must be strictly increasing: {p} after {prev}"
                        )));
                    }
                }
                last = Some(p);
            }
            if depth > 1 {
                let below = &self.layers[layer].depths[depth - 2];
                for &p in positions {
                    if below.positions.binary_search(&p).is_err() {
                        return Err(TahError::Cache(format!(
                            "entry ({p},{depth}) appended without ({p},{})",
                            depth - 1
                        )));
                    }
                }
            }
        }
        let seg = &mut self.layers[layer].depths[depth - 1];
        seg.positions.extend_from_slice(positions);
        seg.rows += positions.len();
        seg.chunks.push((keys, values));
        Ok(())
    }

    /// Depth-major flattened coordinates of all entries with depth <= `max_depth`.
    pub fn coords(&self, layer: usize, max_depth: usize) -> Vec<AttnCoord> {
        let mut out = Vec::new();
        for d in 1..=max_depth.min(self.d_max) {
            for &p in &self.layers[layer].depths[d - 1].positions {
                out.push(AttnCoord::new(p, d));
            }
        }
        out
    }

    /// Concatenated key and value matrices for depths 1..=`max_depth`,
    /// in the same order as [`coords`](Self::coords). Depth-d computation
    /// reads only segments with depth <= d, which keeps the depth-major
    /// pass free of forward references.
    pub fn concat_kv(&self, layer: usize, max_depth: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for d in 1..=max_depth.min(self.d_max) {
            for (k, v) in &self.layers[layer].depths[d - 1].chunks {
                ks.push(k.clone());
                vs.push(v.clone());
            }
        }
        if ks.is_empty() {
            bail_contract!("concat_kv on an empty cache");
        }
        Ok((concat_rows(&ks)?, concat_rows(&vs)?))
    }

    /// True when every queried position has entries at all depths below `depth`.
    pub fn has_shallower(&self, layer: usize, depth: usize, positions: &[usize]) -> bool {
        for d in 1..depth {
            let seg = &self.layers[layer].depths[d - 1];
            for &p in positions {
                if seg.positions.binary_search(&p).is_err() {
                    return false;
                }
            }
        }
        true
    }
}

/// One head's attention probabilities, reported to an observer.
pub struct AttnObservation<'a, T: Scalar> {
    pub head: usize,
    pub queries: &'a [AttnCoord],
    pub keys: &'a [AttnCoord],
    /// Row-major [num_queries, num_keys] probabilities.
    pub probs: &'a [T],
}

/// Masked multi-head scaled dot-product attention.
///
/// `q`, `k`, `v` are `[rows, num_heads*head_dim]`; `mask` is additive
/// `[nq, nk]` built from the same cache snapshot. Every query row must have
/// at least one accessible key.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<T>,
    num_heads: usize,
    queries: &[AttnCoord],
    keys: &[AttnCoord],
    mut observer: Option<&mut dyn FnMut(AttnObservation<'_, T>)>,
) -> Result<Tensor<T>> {
    let (nq, width) = q.dims2()?;
    let (nk, kw) = k.dims2()?;
    if kw != width {
        bail_dim!("attend: query width {width} != key width {kw}");
    }
    if mask.shape() != [nq, nk] {
        bail_dim!("attend: mask shape {:?} vs [{nq},{nk}]", mask.shape());
    }
    if width % num_heads != 0 {
        bail_dim!("attend: width {width} not divisible by {num_heads} heads");
    }
    {
        let md = mask.data();
        for r in 0..nq {
            if !md[r * nk..(r + 1) * nk].iter().any(|&x| x == T::zero()) {
                bail_contract!("query row {r} has zero allowed keys");
            }
        }
    }
    let head_dim = width / num_heads;
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = q.narrow_cols(h * head_dim, head_dim)?;
        let kh = k.narrow_cols(h * head_dim, head_dim)?;
        let vh = v.narrow_cols(h * head_dim, head_dim)?;
        let scores = qh.matmul_nt(&kh)?.affine(scale, T::zero()).add(mask)?;
        let probs = scores.softmax_rows()?;
        if let Some(obs) = observer.as_mut() {
            let pd = probs.data();
            obs(AttnObservation {
                head: h,
                queries,
                keys,
                probs: &pd,
            });
        }
        heads.push(probs.matmul(&vh)?);
    }
    crate::tensor::concat_cols(&heads)
}

/// Accumulates, per (layer, head), the attention mass that depth-2 queries
/// place on depth-1 keys.
#[derive(Debug, Clone, Default)]
pub struct DepthMassAccumulator {
    /// [layer][head] -> (sum of depth-1 mass fractions, observation count)
    sums: Vec<Vec<(f64, usize)>>,
}

impl DepthMassAccumulator {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        DepthMassAccumulator {
            sums: vec![vec![(0.0, 0); num_heads]; num_layers],
        }
    }

    pub fn record<T: Scalar>(&mut self, layer: usize, obs: &AttnObservation<'_, T>) {
        let nk = obs.keys.len();
        for (qi, qc) in obs.queries.iter().enumerate() {
            if qc.depth != 2 {
                continue;
            }
            let mut shallow = 0.0;
            let mut total = 0.0;
            for (ki, kc) in obs.keys.iter().enumerate() {
                let p = obs.probs[qi * nk + ki].to_f64();
                total += p;
                if kc.depth == 1 {
                    shallow += p;
                }
            }
            if total > 0.0 {
                let cell = &mut self.sums[layer][obs.head];
                cell.0 += shallow / total;
                cell.1 += 1;
            }
        }
    }

    /// Mean fraction per (layer, head) in [0,1]; `None` when a head saw no
    /// depth-2 queries.
    pub fn fractions(&self) -> Vec<Vec<Option<f64>>> {
        self.sums
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&(s, n)| if n == 0 { None } else { Some(s / n as f64) })
                    .collect()
            })
            .collect()
    }

    /// Per-layer mean and standard deviation over heads.
    pub fn layer_stats(&self) -> Vec<(f64, f64)> {
        self.fractions()
            .iter()
            .map(|heads| {
                let vals: Vec<f64> = heads.iter().filter_map(|&x| x).collect();
                if vals.is_empty() {
                    return (f64::NAN, f64::NAN);
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                (mean, var.sqrt())
            })
            .collect()
    }
}

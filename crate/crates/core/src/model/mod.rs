//! The shared transformer backbone with depth-specific parameters: base
//! weights at depth 1, base plus low-rank deltas at depths > 1, the
//! language-model head, the logit-weighted embedding recurrence, and
//! sampling.

mod sample;

pub use sample::{argmax, sample, SampleRule, SamplerConfig};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attend, build_mask, AttnCoord, AttnObservation, KvCache2D};
use crate::error::{bail_config, bail_contract, bail_dim, Result};
use crate::tensor::{rope, weighted_embed, Scalar, Tensor};

/// Which projection families receive low-rank deltas at depths > 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraTargets {
    pub attention: bool,
    pub mlp: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets {
            attention: true,
            mlp: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    /// Maximum iteration depth; 1 degenerates to a standard transformer.
    pub max_depth: usize,
    /// Low-rank delta rank; 0 disables the adapters entirely.
    pub lora_rank: usize,
    pub lora_targets: LoraTargets,
    /// Top-K truncation of the logit-weighted embedding update.
    pub lwe_top_k: usize,
    pub tie_embeddings: bool,
    pub max_position: usize,
    /// Adds x^(d) to the logit-weighted embedding when forming x^(d+1).
    pub cross_iteration_residual: bool,
    pub use_rotary: bool,
    pub rope_base: f64,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            hidden_dim: 64,
            num_layers: 3,
            num_heads: 4,
            head_dim: 16,
            mlp_dim: 128,
            max_depth: 2,
            lora_rank: 8,
            lora_targets: LoraTargets::default(),
            lwe_top_k: 8,
            tie_embeddings: true,
            max_position: 512,
            cross_iteration_residual: true,
            use_rotary: true,
            rope_base: 10_000.0,
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads * self.head_dim != self.hidden_dim {
            bail_config!(
                "num_heads {} x head_dim {} != hidden_dim {}",
                self.num_heads,
                self.head_dim,
                self.hidden_dim
            );
        }
        if self.lwe_top_k < 1 {
            bail_config!("lwe_top_k must be >= 1");
        }
        if self.lwe_top_k > self.vocab_size {
            bail_config!(
                "lwe_top_k {} exceeds vocab_size {}",
                self.lwe_top_k,
                self.vocab_size
            );
        }
        if self.lora_rank > self.hidden_dim {
            bail_config!(
                "lora_rank {} exceeds hidden_dim {}",
                self.lora_rank,
                self.hidden_dim
            );
        }
        if self.max_depth < 1 {
            bail_config!("max_depth must be >= 1");
        }
        if self.use_rotary && !self.head_dim.is_multiple_of(2) {
            bail_config!("rotary encoding requires even head_dim");
        }
        if self.num_layers < 1 || self.vocab_size < 2 || self.max_position < 2 {
            bail_config!("degenerate model extents");
        }
        Ok(())
    }

    /// Indices (1-based) of the decider's tapped layers: shallow, middle, final.
    pub fn tap_layers(&self) -> [usize; 3] {
        [1, self.num_layers.div_ceil(2), self.num_layers]
    }
}

pub struct LayerParams<T: Scalar> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// One low-rank delta: effective weight is `W + a gemm b` with `a: [in, r]`
/// and `b: [r, out]`. `b` starts at zero so depth-d>1 forwards initially
/// equal the base forward.
pub struct LoraPair<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

/// Base transformer weights plus the per-target low-rank deltas.
pub struct BackboneParams<T: Scalar> {
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// Output head `[h, v]`; `None` when tied to the embedding.
    pub w_out: Option<Tensor<T>>,
    /// Keyed by the target weight's parameter name.
    pub lora: BTreeMap<String, LoraPair<T>>,
}

pub struct Backbone<T: Scalar> {
    pub config: ModelConfig,
    pub params: BackboneParams<T>,
}

/// Per-token input to a depth pass.
pub struct DepthInput<T: Scalar> {
    pub position: usize,
    pub depth: usize,
    /// `[1, h]` embedding row: `E[t]` at depth 1, the recurrence output deeper.
    pub embedding: Tensor<T>,
}

pub struct DepthOutput<T: Scalar> {
    /// Normalized last-layer hidden states `[n, h]`, ready for the head.
    pub hidden: Tensor<T>,
    /// Post-block outputs of the shallow/middle/final tapped layers.
    pub tapped: [Tensor<T>; 3],
}

/// Callback receiving per-layer attention probabilities during a pass.
pub type AttnObserverFn<'a, T> = &'a mut dyn FnMut(usize, &AttnObservation<'_, T>);

impl<T: Scalar> Backbone<T> {
    /// Fresh parameters, deterministically seeded.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let attn_width = config.num_heads * config.head_dim;
        let std = 0.02;
        // residual-branch outputs scaled down per depth of the network
        let out_std = std / (2.0 * config.num_layers as f64).sqrt();
        let mut normal = |shape: &[usize], std: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, std).expect("normal");
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n)
                .map(|_| T::from_f64(dist.sample(&mut rng)))
                .collect();
            Tensor::from_vec(shape, data, true).expect("init shape")
        };
        let embedding = normal(&[config.vocab_size, h], std);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                attn_norm: Tensor::full(&[h], T::one()).requires_grad_leaf(),
                wq: normal(&[h, attn_width], std),
                wk: normal(&[h, attn_width], std),
                wv: normal(&[h, attn_width], std),
                wo: normal(&[attn_width, h], out_std),
                mlp_norm: Tensor::full(&[h], T::one()).requires_grad_leaf(),
                w_gate: normal(&[h, config.mlp_dim], std),
                w_up: normal(&[h, config.mlp_dim], std),
                w_down: normal(&[config.mlp_dim, h], out_std),
            });
        }
        let final_norm = Tensor::full(&[h], T::one()).requires_grad_leaf();
        let w_out = if config.tie_embeddings {
            None
        } else {
            Some(normal(&[h, config.vocab_size], std))
        };
        let mut lora = BTreeMap::new();
        if config.max_depth > 1 && config.lora_rank > 0 {
            let r = config.lora_rank;
            for (name, (fan_in, fan_out)) in lora_target_shapes(&config) {
                let a = normal(&[fan_in, r], std);
                let b = Tensor::zeros(&[r, fan_out], true);
                lora.insert(name, LoraPair { a, b });
            }
        }
        Ok(Backbone {
            config,
            params: BackboneParams {
                embedding,
                layers,
                final_norm,
                w_out,
                lora,
            },
        })
    }

    pub fn cache(&self) -> KvCache2D<T> {
        KvCache2D::new(self.config.num_layers, self.config.max_depth)
    }

    /// All parameters in deterministic name order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), self.params.embedding.clone()));
        out.push(("final_norm".to_string(), self.params.final_norm.clone()));
        for (i, l) in self.params.layers.iter().enumerate() {
            for (field, t) in [
                ("attn_norm", &l.attn_norm),
                ("mlp_norm", &l.mlp_norm),
                ("w_down", &l.w_down),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("wk", &l.wk),
                ("wo", &l.wo),
                ("wq", &l.wq),
                ("wv", &l.wv),
            ] {
                out.push((format!("layers.{i}.{field}"), t.clone()));
            }
        }
        for (name, pair) in &self.params.lora {
            out.push((format!("lora.{name}.a"), pair.a.clone()));
            out.push((format!("lora.{name}.b"), pair.b.clone()));
        }
        if let Some(w) = &self.params.w_out {
            out.push(("w_out".to_string(), w.clone()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// The low-rank delta parameters only (the adapter Δ).
    pub fn lora_params(&self) -> Vec<(String, Tensor<T>)> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("lora."))
            .collect()
    }

    fn proj(&self, x: &Tensor<T>, name: &str, w: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
        let base = x.matmul(w)?;
        if depth > 1 {
            if let Some(pair) = self.params.lora.get(name) {
                let delta = x.matmul(&pair.a)?.matmul(&pair.b)?;
                return base.add(&delta);
            }
        }
        Ok(base)
    }

    /// Runs one iteration-depth pass for a batch of token positions under
    /// duo-causal attention, appending this pass's K/V entries to the cache.
    ///
    /// Positions must be strictly increasing and already hold cache entries
    /// at every depth below `depth`. At depths > 1 each targeted weight W is
    /// applied as W plus its low-rank delta.
    pub fn forward_depth(
        &self,
        x: &Tensor<T>,
        positions: &[usize],
        depth: usize,
        cache: &mut KvCache2D<T>,
        mut observer: Option<AttnObserverFn<'_, T>>,
    ) -> Result<DepthOutput<T>> {
        let cfg = &self.config;
        if depth == 0 || depth > cfg.max_depth {
            bail_contract!("depth {depth} outside 1..={}", cfg.max_depth);
        }
        let (n, w) = x.dims2()?;
        if w != cfg.hidden_dim {
            bail_dim!("forward_depth: input width {w} != hidden {}", cfg.hidden_dim);
        }
        if n != positions.len() {
            bail_dim!("forward_depth: {n} rows vs {} positions", positions.len());
        }
        if let Some(&p) = positions.iter().max() {
            if p >= cfg.max_position {
                return Err(crate::error::TahError::Length(format!(
                    "position {p} exceeds max_position {}",
                    cfg.max_position
                )));
            }
        }
        let queries: Vec<AttnCoord> = positions
            .iter()
            .map(|&p| AttnCoord::new(p, depth))
            .collect();
        let taps = cfg.tap_layers();
        let mut tapped: Vec<Option<Tensor<T>>> = vec![None, None, None];
        let mut h = x.clone();
        for (li, lp) in self.params.layers.iter().enumerate() {
            if !cache.has_shallower(li, depth, positions) {
                return Err(crate::error::TahError::Cache(format!(
                    "layer {li}: missing shallower entries for a depth-{depth} pass"
                )));
            }
            let xn = h.rms_norm(&lp.attn_norm, T::from_f64(cfg.rms_eps))?;
            let mut q = self.proj(&xn, &format!("layers.{li}.wq"), &lp.wq, depth)?;
            let mut k = self.proj(&xn, &format!("layers.{li}.wk"), &lp.wk, depth)?;
            let v = self.proj(&xn, &format!("layers.{li}.wv"), &lp.wv, depth)?;
            if cfg.use_rotary {
                // the rotary index is the token position, reused at every depth
                q = rope(&q, positions, cfg.num_heads, cfg.head_dim, cfg.rope_base)?;
                k = rope(&k, positions, cfg.num_heads, cfg.head_dim, cfg.rope_base)?;
            }
            cache.append(li, depth, positions, k, v)?;
            let (k_all, v_all) = cache.concat_kv(li, depth)?;
            let key_coords = cache.coords(li, depth);
            let mask = build_mask::<T>(&queries, &key_coords);
            let mut layer_obs = observer.as_mut().map(|f| {
                move |obs: AttnObservation<'_, T>| {
                    f(li, &obs);
                }
            });
            let attn = attend(
                &q,
                &k_all,
                &v_all,
                &mask,
                cfg.num_heads,
                &queries,
                &key_coords,
                layer_obs
                    .as_mut()
                    .map(|f| f as &mut dyn FnMut(AttnObservation<'_, T>)),
            )?;
            let attn_out = self.proj(&attn, &format!("layers.{li}.wo"), &lp.wo, depth)?;
            h = h.add(&attn_out)?;
            let xn2 = h.rms_norm(&lp.mlp_norm, T::from_f64(cfg.rms_eps))?;
            let gate = self
                .proj(&xn2, &format!("layers.{li}.w_gate"), &lp.w_gate, depth)?
                .silu();
            let up = self.proj(&xn2, &format!("layers.{li}.w_up"), &lp.w_up, depth)?;
            let mlp = self.proj(
                &gate.mul(&up)?,
                &format!("layers.{li}.w_down"),
                &lp.w_down,
                depth,
            )?;
            h = h.add(&mlp)?;
            for (ti, &tl) in taps.iter().enumerate() {
                if tl == li + 1 {
                    tapped[ti] = Some(h.clone());
                }
            }
        }
        let hidden = h.rms_norm(&self.params.final_norm, T::from_f64(cfg.rms_eps))?;
        let tapped: Vec<Tensor<T>> = tapped
            .into_iter()
            .map(|t| t.expect("tap layer within 1..=L"))
            .collect();
        let tapped: [Tensor<T>; 3] = tapped.try_into().expect("three tap layers");
        Ok(DepthOutput { hidden, tapped })
    }

    /// Convenience wrapper over per-token inputs.
    pub fn forward_depth_inputs(
        &self,
        inputs: &[DepthInput<T>],
        cache: &mut KvCache2D<T>,
    ) -> Result<DepthOutput<T>> {
        if inputs.is_empty() {
            bail_contract!("forward_depth_inputs: empty batch");
        }
        let depth = inputs[0].depth;
        if inputs.iter().any(|i| i.depth != depth) {
            bail_contract!("forward_depth_inputs: mixed depths in one pass");
        }
        let rows: Vec<Tensor<T>> = inputs.iter().map(|i| i.embedding.clone()).collect();
        let x = crate::tensor::concat_rows(&rows)?;
        let positions: Vec<usize> = inputs.iter().map(|i| i.position).collect();
        self.forward_depth(&x, &positions, depth, cache, None)
    }

    /// Head projection: logits = W_out^T y (tied: E y).
    pub fn lm_head(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.params.w_out {
            Some(w) => y.matmul(w),
            None => y.matmul_nt(&self.params.embedding),
        }
    }

    /// Logit-weighted embedding recurrence: softmax over the top-K logits
    /// (renormalized over the retained set), weighted sum of embedding rows,
    /// plus the cross-iteration residual when enabled.
    pub fn next_depth_input(&self, y: &Tensor<T>, x_prev: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.config.lwe_top_k;
        if k < 1 {
            bail_config!("lwe_top_k must be >= 1");
        }
        let logits = self.lm_head(y)?;
        let (m, v) = logits.dims2()?;
        let k = k.min(v);
        // per-row top-K column indices; ties resolve to the lower token id
        let mut ids: Vec<Vec<u32>> = Vec::with_capacity(m);
        {
            let ld = logits.data();
            for r in 0..m {
                let row = &ld[r * v..(r + 1) * v];
                let mut idx: Vec<usize> = (0..v).collect();
                idx.sort_by(|&a, &b| {
                    row[b]
                        .partial_cmp(&row[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                ids.push(idx[..k].iter().map(|&i| i as u32).collect());
            }
        }
        // gather the selected logits column-by-column, then renormalize
        let mut cols = Vec::with_capacity(k);
        for kk in 0..k {
            let col_idx: Vec<usize> = ids.iter().map(|row| row[kk] as usize).collect();
            cols.push(logits.select_cols(&col_idx)?);
        }
        let sel = crate::tensor::concat_cols(&cols)?;
        let probs = sel.softmax_rows()?;
        let lwe = weighted_embed(&probs, &ids, &self.params.embedding)?;
        if self.config.cross_iteration_residual {
            lwe.add(x_prev)
        } else {
            Ok(lwe)
        }
    }

    /// Embeds verbal tokens: x^(1) = E[t].
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor<T>> {
        crate::tensor::embed(&self.params.embedding, ids)
    }

    /// Total scalar parameter count (backbone plus deltas).
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Shapes (fan_in, fan_out) of every delta-targeted weight, keyed by name.
fn lora_target_shapes(config: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    let h = config.hidden_dim;
    let aw = config.num_heads * config.head_dim;
    for i in 0..config.num_layers {
        if config.lora_targets.attention {
            out.insert(format!("layers.{i}.wq"), (h, aw));
            out.insert(format!("layers.{i}.wk"), (h, aw));
            out.insert(format!("layers.{i}.wv"), (h, aw));
            out.insert(format!("layers.{i}.wo"), (aw, h));
        }
        if config.lora_targets.mlp {
            out.insert(format!("layers.{i}.w_gate"), (h, config.mlp_dim));
            out.insert(format!("layers.{i}.w_up"), (h, config.mlp_dim));
            out.insert(format!("layers.{i}.w_down"), (config.mlp_dim, h));
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Rebuilds a constant tensor as a trainable leaf.
    fn requires_grad_leaf(&self) -> Tensor<T> {
        Tensor::from_vec(self.shape(), self.to_vec(), true).expect("same shape")
    }
}

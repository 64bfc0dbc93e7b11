//! Independent reference implementation used as the test oracle: plain
//! nested-loop math over flat f64/f32 buffers, no tensors, no autodiff, no
//! incremental cache. It materializes every (position, depth) state, builds
//! the full two-dimensional mask explicitly, and runs attention one query at
//! a time. Shapes and math mirror the engine's contract; the code paths
//! share nothing.

use std::collections::BTreeMap;

use tah_core::model::{Backbone, ModelConfig};
use tah_core::tensor::Scalar;

pub struct RefWeights<T> {
    pub map: BTreeMap<String, (Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> RefWeights<T> {
    pub fn from_backbone(model: &Backbone<T>) -> Self {
        let map = model
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, (t.shape().to_vec(), t.to_vec())))
            .collect();
        RefWeights { map }
    }

    fn get(&self, name: &str) -> (&[usize], &[T]) {
        let (shape, data) = self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("reference weights missing {name}"));
        (shape, data)
    }

    /// Materializes W + A*B when a delta exists for `name` and depth > 1.
    fn effective(&self, name: &str, depth: usize) -> (usize, usize, Vec<T>) {
        let (shape, w) = self.get(name);
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = w.to_vec();
        if depth > 1 {
            if let Some((ashape, a)) = self.map.get(&format!("lora.{name}.a")) {
                let (_, b) = self.get(&format!("lora.{name}.b"));
                let r = ashape[1];
                for i in 0..rows {
                    for j in 0..cols {
                        let mut delta = T::zero();
                        for k in 0..r {
                            delta += a[i * r + k] * b[k * cols + j];
                        }
                        out[i * cols + j] += delta;
                    }
                }
            }
        }
        (rows, cols, out)
    }
}

fn matvec<T: Scalar>(x: &[T], w: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(x.len(), rows);
    let mut y = vec![T::zero(); cols];
    for i in 0..rows {
        for j in 0..cols {
            y[j] += x[i] * w[i * cols + j];
        }
    }
    y
}

fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> Vec<T> {
    let n = x.len();
    let mut ssq = T::zero();
    for &v in x {
        ssq += v * v;
    }
    let inv = T::one() / (ssq / T::from_f64(n as f64) + T::from_f64(eps)).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| v * inv * g)
        .collect()
}

fn apply_rope<T: Scalar>(v: &mut [T], pos: usize, heads: usize, head_dim: usize, base: f64) {
    let half = head_dim / 2;
    for h in 0..heads {
        for p in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * p as f64 / head_dim as f64);
            let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
            let i = h * head_dim + 2 * p;
            let (a, b) = (v[i], v[i + 1]);
            v[i] = a * cos - b * sin;
            v[i + 1] = a * sin + b * cos;
        }
    }
}

fn softmax_f64(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-token, per-depth normalized last-layer hidden states:
/// `out[pos][d-1]` exists for every executed depth d <= depths[pos].
pub fn reference_forward<T: Scalar>(
    cfg: &ModelConfig,
    weights: &RefWeights<T>,
    tokens: &[u32],
    depths: &[usize],
) -> Vec<Vec<Vec<T>>> {
    let n = tokens.len();
    let h = cfg.hidden_dim;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim;
    let d_top = depths.iter().copied().max().unwrap_or(1);
    let (_, emb) = weights.get("embedding");
    let (_, final_norm) = weights.get("final_norm");

    // inputs[pos][d-1], outputs y[pos][d-1]
    let mut inputs: Vec<Vec<Option<Vec<T>>>> = vec![vec![None; d_top]; n];
    let mut outputs: Vec<Vec<Option<Vec<T>>>> = vec![vec![None; d_top]; n];
    for (p, &t) in tokens.iter().enumerate() {
        inputs[p][0] = Some(emb[t as usize * h..(t as usize + 1) * h].to_vec());
    }

    // kv[layer] maps (pos, depth) -> (k, v); the full 2-D mask is enforced
    // by explicit (j <= i && kdepth <= d) checks over materialized entries
    let mut kv: Vec<BTreeMap<(usize, usize), (Vec<T>, Vec<T>)>> =
        vec![BTreeMap::new(); cfg.num_layers];

    for d in 1..=d_top {
        let active: Vec<usize> = (0..n).filter(|&p| depths[p] >= d).collect();
        if active.is_empty() {
            break;
        }
        // layer input per active position
        let mut state: BTreeMap<usize, Vec<T>> = active
            .iter()
            .map(|&p| (p, inputs[p][d - 1].clone().expect("input materialized")))
            .collect();
        for layer in 0..cfg.num_layers {
            // projections for every active query, then attention
            let (_, attn_gain) = weights.get(&format!("layers.{layer}.attn_norm"));
            let (_, mlp_gain) = weights.get(&format!("layers.{layer}.mlp_norm"));
            let (wq_r, wq_c, wq) = weights.effective(&format!("layers.{layer}.wq"), d);
            let (wk_r, wk_c, wk) = weights.effective(&format!("layers.{layer}.wk"), d);
            let (wv_r, wv_c, wv) = weights.effective(&format!("layers.{layer}.wv"), d);
            let (wo_r, wo_c, wo) = weights.effective(&format!("layers.{layer}.wo"), d);
            let (wg_r, wg_c, wg) = weights.effective(&format!("layers.{layer}.w_gate"), d);
            let (wu_r, wu_c, wu) = weights.effective(&format!("layers.{layer}.w_up"), d);
            let (wd_r, wd_c, wd) = weights.effective(&format!("layers.{layer}.w_down"), d);
            let mut queries: BTreeMap<usize, Vec<T>> = BTreeMap::new();
            for &p in &active {
                let xn = rms_norm(&state[&p], attn_gain, cfg.rms_eps);
                let mut q = matvec(&xn, &wq, wq_r, wq_c);
                let mut k = matvec(&xn, &wk, wk_r, wk_c);
                let v = matvec(&xn, &wv, wv_r, wv_c);
                if cfg.use_rotary {
                    apply_rope(&mut q, p, heads, hd, cfg.rope_base);
                    apply_rope(&mut k, p, heads, hd, cfg.rope_base);
                }
                kv[layer].insert((p, d), (k, v));
                queries.insert(p, q);
            }
            // attention per query over the materialized accessible set
            let mut attn_out: BTreeMap<usize, Vec<T>> = BTreeMap::new();
            for &p in &active {
                let q = queries.remove(&p).unwrap();
                let mut out = vec![T::zero(); heads * hd];
                for head in 0..heads {
                    let qh = &q[head * hd..(head + 1) * hd];
                    // enumerate every computed (j, kdepth) entry and apply
                    // the accessibility rule
                    let mut allowed: Vec<(&Vec<T>, &Vec<T>)> = Vec::new();
                    for (&(j, kdepth), (kvec, vvec)) in kv[layer].iter() {
                        if j <= p && kdepth <= d {
                            allowed.push((kvec, vvec));
                        }
                    }
                    let scale = 1.0 / (hd as f64).sqrt();
                    let scores: Vec<f64> = allowed
                        .iter()
                        .map(|(kvec, _)| {
                            let kh = &kvec[head * hd..(head + 1) * hd];
                            let mut dot = 0.0;
                            for i in 0..hd {
                                dot += qh[i].to_f64() * kh[i].to_f64();
                            }
                            dot * scale
                        })
                        .collect();
                    let probs = softmax_f64(&scores);
                    for (w, (_, vvec)) in probs.iter().zip(&allowed) {
                        let vh = &vvec[head * hd..(head + 1) * hd];
                        for i in 0..hd {
                            out[head * hd + i] += T::from_f64(*w) * vh[i];
                        }
                    }
                }
                attn_out.insert(p, matvec(&out, &wo, wo_r, wo_c));
            }
            for &p in &active {
                let mut x = state[&p].clone();
                for i in 0..h {
                    x[i] += attn_out[&p][i];
                }
                let xn2 = rms_norm(&x, mlp_gain, cfg.rms_eps);
                let gate = matvec(&xn2, &wg, wg_r, wg_c);
                let up = matvec(&xn2, &wu, wu_r, wu_c);
                let act: Vec<T> = gate
                    .iter()
                    .zip(&up)
                    .map(|(&g, &u)| {
                        let s = T::one() / (T::one() + (-g).exp());
                        g * s * u
                    })
                    .collect();
                let down = matvec(&act, &wd, wd_r, wd_c);
                for i in 0..h {
                    x[i] += down[i];
                }
                state.insert(p, x);
            }
        }
        for &p in &active {
            let y = rms_norm(&state[&p], final_norm, cfg.rms_eps);
            outputs[p][d - 1] = Some(y.clone());
            // next-depth input via the logit-weighted embedding recurrence
            if depths[p] > d {
                let x_next = lwe_update(cfg, weights, &y, &inputs[p][d - 1].clone().unwrap());
                inputs[p][d] = Some(x_next);
            }
        }
    }
    outputs
        .into_iter()
        .map(|per_depth| per_depth.into_iter().flatten().collect())
        .collect()
}

/// Head logits for one hidden state.
pub fn reference_logits<T: Scalar>(
    cfg: &ModelConfig,
    weights: &RefWeights<T>,
    y: &[T],
) -> Vec<T> {
    if cfg.tie_embeddings {
        let (_, emb) = weights.get("embedding");
        let v = cfg.vocab_size;
        let h = cfg.hidden_dim;
        (0..v)
            .map(|t| {
                let mut dot = T::zero();
                for i in 0..h {
                    dot += emb[t * h + i] * y[i];
                }
                dot
            })
            .collect()
    } else {
        let (shape, w) = weights.get("w_out");
        matvec(y, w, shape[0], shape[1])
    }
}

fn lwe_update<T: Scalar>(
    cfg: &ModelConfig,
    weights: &RefWeights<T>,
    y: &[T],
    x_prev: &[T],
) -> Vec<T> {
    let logits = reference_logits(cfg, weights, y);
    let v = cfg.vocab_size;
    let h = cfg.hidden_dim;
    let k = cfg.lwe_top_k.min(v);
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let kept = &order[..k];
    let sel: Vec<f64> = kept.iter().map(|&i| logits[i].to_f64()).collect();
    let probs = softmax_f64(&sel);
    let (_, emb) = weights.get("embedding");
    let mut x = vec![T::zero(); h];
    for (w, &tok) in probs.iter().zip(kept) {
        for i in 0..h {
            x[i] += T::from_f64(*w) * emb[tok * h + i];
        }
    }
    if cfg.cross_iteration_residual {
        for i in 0..h {
            x[i] += x_prev[i];
        }
    }
    x
}

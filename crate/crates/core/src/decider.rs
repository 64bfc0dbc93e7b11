//! The lightweight neural gate that decides continue-vs-verbalize per token
//! per depth: a small MLP over concatenated tapped hidden states, thresholded
//! at inference time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail_config, bail_contract, bail_dim, Result};
use crate::tensor::{concat_cols, Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeciderConfig {
    /// Backbone hidden dim; the decider input is 3x this (shallow/middle/final taps).
    pub hidden_dim: usize,
    /// Widths of the hidden layers.
    pub mlp_dims: Vec<usize>,
    pub c_threshold: f64,
}

impl Default for DeciderConfig {
    fn default() -> Self {
        DeciderConfig {
            hidden_dim: 64,
            mlp_dims: vec![64, 64],
            c_threshold: 0.9,
        }
    }
}

impl DeciderConfig {
    pub fn input_dim(&self) -> usize {
        3 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.mlp_dims.contains(&0) {
            bail_config!("decider dims must be positive");
        }
        if !(0.0..=1.0).contains(&self.c_threshold) {
            bail_config!("c_threshold must lie in [0,1]");
        }
        Ok(())
    }
}

/// Cloning shares the underlying weight buffers; clones are cheap views
/// used to evaluate the same gate at alternative thresholds.
#[derive(Clone)]
pub struct Decider<T: Scalar> {
    pub config: DeciderConfig,
    /// (weight [in, out], bias [out]) per layer; final layer outputs 1 logit.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateAction {
    Continue,
    Verbalize,
}

#[derive(Debug, Clone, Copy)]
pub struct GateDecision {
    /// Continuation probability in (0,1).
    pub c_hat: f64,
    pub action: GateAction,
    pub depth: usize,
}

impl<T: Scalar> Decider<T> {
    pub fn init(config: DeciderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = config.input_dim();
        let dims: Vec<usize> = config.mlp_dims.iter().copied().chain([1]).collect();
        for out in dims {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("normal");
            let data: Vec<T> = (0..fan_in * out)
                .map(|_| T::from_f64(dist.sample(&mut rng)))
                .collect();
            let w = Tensor::from_vec(&[fan_in, out], data, true)?;
            let b = Tensor::zeros(&[out], true);
            layers.push((w, b));
            fan_in = out;
        }
        Ok(Decider { config, layers })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), w.clone()));
            out.push((format!("mlp.{i}.bias"), b.clone()));
        }
        out
    }

    /// Continuation probabilities for a batch of feature rows `[n, 3h]`.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, w) = features.dims2()?;
        if w != self.config.input_dim() {
            bail_dim!(
                "decider input width {w} != 3x{}",
                self.config.hidden_dim
            );
        }
        let mut h = features.clone();
        let last = self.layers.len() - 1;
        for (i, (wt, bt)) in self.layers.iter().enumerate() {
            h = h.matmul(wt)?.add_row(bt)?;
            if i < last {
                h = h.silu();
            }
        }
        Ok(h.sigmoid())
    }

    /// Assembles the decider input from the three tapped hidden states and
    /// scores it; rows align with the tapped token positions.
    pub fn score_taps(&self, tapped: &[Tensor<T>; 3]) -> Result<Tensor<T>> {
        let features = concat_cols(&[tapped[0].clone(), tapped[1].clone(), tapped[2].clone()])?;
        self.forward(&features)
    }

    /// The inference rule: continue iff c_hat exceeds the threshold and the
    /// token has not reached maximum depth. Equality verbalizes.
    pub fn decide(&self, c_hat: f64, depth: usize, d_max: usize) -> GateDecision {
        let action = if c_hat > self.config.c_threshold && depth < d_max {
            GateAction::Continue
        } else {
            GateAction::Verbalize
        };
        GateDecision {
            c_hat,
            action,
            depth,
        }
    }
}

/// Class-reweighted binary cross-entropy over gate decisions:
/// `-sum_i [ w_i * c_i * log c_hat_i + (1 - c_i) * log(1 - c_hat_i) ]`.
/// Predictions are epsilon-clamped so saturated probabilities stay finite.
pub fn decider_loss<T: Scalar>(
    predictions: &Tensor<T>,
    labels: &[bool],
    weights: &[f64],
) -> Result<Tensor<T>> {
    let n = predictions.numel();
    if labels.len() != n || weights.len() != n {
        bail_dim!(
            "decider_loss: {n} predictions vs {} labels / {} weights",
            labels.len(),
            weights.len()
        );
    }
    if n == 0 {
        bail_contract!("decider_loss: empty batch");
    }
    let eps = T::from_f64(1e-7);
    let one = T::one();
    let p = predictions.clamp(eps, one - eps);
    let shape = [n, 1];
    let pos_w: Vec<T> = labels
        .iter()
        .zip(weights)
        .map(|(&c, &w)| if c { T::from_f64(w) } else { T::zero() })
        .collect();
    let neg_w: Vec<T> = labels
        .iter()
        .map(|&c| if c { T::zero() } else { T::one() })
        .collect();
    let pos_w = Tensor::from_vec(&shape, pos_w, false)?;
    let neg_w = Tensor::from_vec(&shape, neg_w, false)?;
    let p2 = p.affine(-T::one(), one); // 1 - p
    let view = |t: &Tensor<T>| Tensor::reshape_rows(t, n);
    let pos_term = view(&p).ln().mul(&pos_w)?;
    let neg_term = view(&p2).ln().mul(&neg_w)?;
    Ok(pos_term.add(&neg_term)?.sum_all().affine(-T::one(), T::zero()))
}

impl<T: Scalar> Tensor<T> {
    /// Views a length-n tensor as an [n,1] column without copying semantics
    /// concerns (data is cloned; gradient flows through).
    fn reshape_rows(t: &Tensor<T>, n: usize) -> Tensor<T> {
        if t.shape() == [n, 1] {
            return t.clone();
        }
        // all decider tensors are [n,1] already or [n]
        let src = t.clone();
        Tensor::from_op(
            vec![n, 1],
            t.to_vec(),
            vec![t.clone()],
            Box::new(move |g| {
                if src.requires_grad() {
                    src.accumulate_grad(g);
                }
            }),
        )
    }
}

/// Raw/balanced accuracy and confusion counts of thresholded predictions
/// against oracle labels. Overthink counts false continues, underthink false
/// stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeciderAccuracy {
    pub raw: f64,
    pub balanced: f64,
    pub true_continue: usize,
    pub true_stop: usize,
    pub overthink: usize,
    pub underthink: usize,
}

pub fn decider_accuracy(predictions: &[f64], labels: &[bool], threshold: f64) -> Result<DeciderAccuracy> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        bail_contract!(
            "decider_accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        );
    }
    let (mut tc, mut ts, mut over, mut under) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &c) in predictions.iter().zip(labels) {
        let said_continue = p > threshold;
        match (said_continue, c) {
            (true, true) => tc += 1,
            (false, false) => ts += 1,
            (true, false) => over += 1,
            (false, true) => under += 1,
        }
    }
    let n = predictions.len() as f64;
    let raw = (tc + ts) as f64 / n;
    let pos = (tc + under) as f64;
    let neg = (ts + over) as f64;
    let tpr = if pos > 0.0 { tc as f64 / pos } else { 1.0 };
    let tnr = if neg > 0.0 { ts as f64 / neg } else { 1.0 };
    Ok(DeciderAccuracy {
        raw,
        balanced: 0.5 * (tpr + tnr),
        true_continue: tc,
        true_stop: ts,
        overthink: over,
        underthink: under,
    })
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_config, Result, TahError};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SampleRule {
    Greedy,
    Temperature { temperature: f64 },
    Nucleus { temperature: f64, top_p: f64 },
}

/// Sampler settings as they appear in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub rule: SampleRule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            rule: SampleRule::Temperature { temperature: 0.6 },
        }
    }
}

/// Draws a token id from a logit row. Greedy breaks ties toward the lowest
/// index; stochastic rules draw from the temperature-scaled (optionally
/// nucleus-truncated) distribution using the seeded generator.
pub fn sample<T: Scalar>(logits: &[T], rule: SampleRule, rng: &mut ChaCha8Rng) -> Result<u32> {
    if logits.is_empty() {
        bail_config!("sample: empty logits");
    }
    for &x in logits {
        if !x.to_f64().is_finite() {
            return Err(TahError::Numeric(format!("sample: non-finite logit {x}")));
        }
    }
    match rule {
        SampleRule::Greedy => Ok(argmax(logits) as u32),
        SampleRule::Temperature { temperature } => {
            let probs = scaled_softmax(logits, temperature)?;
            Ok(draw(&probs, rng))
        }
        SampleRule::Nucleus { temperature, top_p } => {
            if !(0.0..=1.0).contains(&top_p) || top_p <= 0.0 {
                bail_config!("nucleus top_p must be in (0, 1], got {top_p}");
            }
            let probs = scaled_softmax(logits, temperature)?;
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| {
                probs[b]
                    .partial_cmp(&probs[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut kept = Vec::new();
            let mut cum = 0.0;
            for &i in &order {
                kept.push(i);
                cum += probs[i];
                if cum >= top_p {
                    break;
                }
            }
            let total: f64 = kept.iter().map(|&i| probs[i]).sum();
            let mut trunc = vec![0.0; probs.len()];
            for &i in &kept {
                trunc[i] = probs[i] / total;
            }
            Ok(draw(&trunc, rng))
        }
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn scaled_softmax<T: Scalar>(logits: &[T], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        bail_config!("temperature must be > 0, got {temperature}");
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x.to_f64() / temperature).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let r: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if r < cum {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

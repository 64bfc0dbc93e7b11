//! Oracle difficulty labeling: binary hard/easy depths, quantile-binned
//! multi-depth halting, continuation labels, class weights, and noise
//! perturbation for sensitivity studies. Labeling is a pure function of
//! (reference-model outputs, gold tokens, config, seed).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_config, bail_contract, Result, TahError};

/// One labeled gate site: position `index` of sequence `seq`, predicting the
/// token at `index + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLabel {
    pub seq: usize,
    pub index: usize,
    pub gold: u32,
    pub ref_top1: u32,
    pub ref_ce: f64,
    /// Oracle depth d^pi in 1..=d_max.
    pub depth: usize,
    /// Continuation bits c^(d) for d in 1..=d_max-1; c^(d) = 1 iff a
    /// depth-(d+1) pass occurs, i.e. d < depth. Monotone nonincreasing.
    pub continuation: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub d_max: usize,
    pub labels: Vec<TokenLabel>,
}

impl LabelSet {
    /// Fast lookup table: (seq, index) -> label position.
    pub fn by_site(&self) -> std::collections::BTreeMap<(usize, usize), usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| ((l.seq, l.index), i))
            .collect()
    }

    pub fn mean_depth(&self) -> f64 {
        if self.labels.is_empty() {
            return f64::NAN;
        }
        self.labels.iter().map(|l| l.depth as f64).sum::<f64>() / self.labels.len() as f64
    }
}

/// Binary oracle rule for d_max = 2: depth 1 when the reference's top-1
/// matches the gold next token, depth 2 otherwise.
pub fn oracle_depth_binary(ref_top1: u32, gold: u32) -> usize {
    1 + usize::from(ref_top1 != gold)
}

/// Quantile-binned halting for d_max >= 2: the empirical CDF of the
/// reference cross-entropy over the labeling corpus, floored into d_max
/// bins and clamped into [1, d_max]. Monotone nondecreasing in the loss.
pub fn oracle_depth_quantile(ref_ce_losses: &[f64], d_max: usize) -> Result<Vec<usize>> {
    if ref_ce_losses.is_empty() {
        bail_contract!("quantile labeling over an empty corpus");
    }
    if d_max < 2 {
        bail_config!("quantile rule requires d_max >= 2");
    }
    if ref_ce_losses.iter().any(|l| !l.is_finite()) {
        return Err(TahError::Numeric("non-finite reference loss".into()));
    }
    let mut sorted = ref_ce_losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    Ok(ref_ce_losses
        .iter()
        .map(|&l| {
            // inclusive empirical CDF: fraction of losses <= l
            let rank = upper_bound(&sorted, l) as f64 / n;
            let h = (rank * d_max as f64).floor() as usize;
            h.clamp(1, d_max)
        })
        .collect())
}

fn upper_bound(sorted: &[f64], x: f64) -> usize {
    let mut lo = 0;
    let mut hi = sorted.len();
    while lo < hi {
        let mid = (lo + hi) / 2;
        if sorted[mid] <= x {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Per-depth continuation bits for an oracle depth.
pub fn continuation_labels(depth: usize, d_max: usize) -> Vec<bool> {
    (1..d_max).map(|d| d < depth).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassWeights {
    /// Weight w^(d) for the continue term at depth d (index d-1):
    /// stop count divided by continue count among tokens gated at d.
    pub weights: Vec<f64>,
    /// Depths whose continue class was empty; their weight was clamped.
    pub degenerate_depths: Vec<usize>,
}

/// Occurrence ratio of stop over continue labels per gate depth. A depth
/// with zero continue labels is degenerate: it is reported and its weight
/// clamped to `max_weight`.
pub fn class_weights(labels: &LabelSet, max_weight: f64) -> Result<ClassWeights> {
    if labels.labels.is_empty() {
        bail_contract!("class_weights over an empty label set");
    }
    let mut weights = Vec::new();
    let mut degenerate = Vec::new();
    for d in 1..labels.d_max {
        // tokens that evaluate the gate at depth d reached depth d
        let gated = labels.labels.iter().filter(|l| l.depth >= d);
        let (mut stop, mut cont) = (0usize, 0usize);
        for l in gated {
            if l.depth > d {
                cont += 1;
            } else {
                stop += 1;
            }
        }
        if cont == 0 {
            degenerate.push(d);
            weights.push(max_weight);
        } else {
            weights.push((stop as f64 / cont as f64).min(max_weight));
        }
    }
    Ok(ClassWeights {
        weights,
        degenerate_depths: degenerate,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbReport {
    pub requested_overthink: f64,
    pub requested_underthink: f64,
    pub realized_overthink: f64,
    pub realized_underthink: f64,
    pub decisions: usize,
}

/// Flips oracle gate decisions with per-class probabilities calibrated so
/// the realized overthink (false continue) and underthink (false stop)
/// fractions over all decisions approximate the requested rates.
/// Deterministic under `seed`; depth monotonicity holds by construction
/// because flips are applied along each token's sequential gate walk.
pub fn perturb_policy(
    labels: &LabelSet,
    overthink_rate: f64,
    underthink_rate: f64,
    seed: u64,
) -> Result<(LabelSet, PerturbReport)> {
    if !(0.0..=1.0).contains(&overthink_rate) || !(0.0..=1.0).contains(&underthink_rate) {
        bail_contract!("noise rates must lie in [0,1]");
    }
    let d_max = labels.d_max;
    // decision census under the unperturbed oracle
    let mut stops = 0usize;
    let mut conts = 0usize;
    for l in &labels.labels {
        for d in 1..=(d_max - 1).min(l.depth) {
            if d < l.depth {
                conts += 1;
            } else {
                stops += 1;
            }
        }
    }
    let total = stops + conts;
    if total == 0 {
        bail_contract!("label set has no gate decisions (d_max = 1?)");
    }
    let p_overthink = if overthink_rate == 0.0 {
        0.0
    } else {
        if stops == 0 {
            bail_contract!("no stop decisions available to overthink");
        }
        overthink_rate * total as f64 / stops as f64
    };
    let p_underthink = if underthink_rate == 0.0 {
        0.0
    } else {
        if conts == 0 {
            bail_contract!("no continue decisions available to underthink");
        }
        underthink_rate * total as f64 / conts as f64
    };
    if p_overthink > 1.0 {
        bail_contract!(
            "overthink rate {overthink_rate} infeasible: needs flip probability {p_overthink:.3}"
        );
    }
    if p_underthink > 1.0 {
        bail_contract!(
            "underthink rate {underthink_rate} infeasible: needs flip probability {p_underthink:.3}"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(labels.labels.len());
    let mut realized_over = 0usize;
    let mut realized_under = 0usize;
    let mut realized_total = 0usize;
    for l in &labels.labels {
        let mut d = 1;
        let new_depth = loop {
            if d > d_max - 1 {
                break d_max;
            }
            realized_total += 1;
            let oracle_continue = d < l.depth;
            let said_continue = if oracle_continue {
                if p_underthink > 0.0 && rng.gen_bool(p_underthink) {
                    realized_under += 1;
                    false
                } else {
                    true
                }
            } else if p_overthink > 0.0 && rng.gen_bool(p_overthink) {
                realized_over += 1;
                true
            } else {
                false
            };
            if !said_continue {
                break d;
            }
            d += 1;
        };
        out.push(TokenLabel {
            depth: new_depth,
            continuation: continuation_labels(new_depth, d_max),
            ..l.clone()
        });
    }
    let report = PerturbReport {
        requested_overthink: overthink_rate,
        requested_underthink: underthink_rate,
        realized_overthink: realized_over as f64 / realized_total as f64,
        realized_underthink: realized_under as f64 / realized_total as f64,
        decisions: realized_total,
    };
    Ok((
        LabelSet {
            d_max,
            labels: out,
        },
        report,
    ))
}

/// Built-in sensitivity-analysis noise grid as (underthink, overthink) fractions.
pub const PRESET_NOISE_GRID: [(f64, f64); 6] = [
    (0.0, 0.0),
    (0.015, 0.085),
    (0.021, 0.129),
    (0.028, 0.0),
    (0.0, 0.221),
    (0.025, 0.175),
];

#[derive(Debug, Serialize, Deserialize)]
struct LabelHeader {
    d_max: usize,
    count: usize,
}

/// Writes the label file: a JSON header line, then one JSON record per line.
pub fn save_labels<P: AsRef<Path>>(path: P, labels: &LabelSet) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let header = LabelHeader {
        d_max: labels.d_max,
        count: labels.labels.len(),
    };
    writeln!(
        file,
        "{}",
        serde_json::to_string(&header).map_err(|e| TahError::Format(e.to_string()))?
    )?;
    for l in &labels.labels {
        writeln!(
            file,
            "{}",
            serde_json::to_string(l).map_err(|e| TahError::Format(e.to_string()))?
        )?;
    }
    Ok(())
}

pub fn load_labels<P: AsRef<Path>>(path: P) -> Result<LabelSet> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let hdr: LabelHeader = serde_json::from_str(
        &lines
            .next()
            .ok_or_else(|| TahError::Format("empty label file".into()))??,
    )
    .map_err(|e| TahError::Format(format!("label header: {e}")))?;
    let mut labels = Vec::with_capacity(hdr.count);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        labels.push(
            serde_json::from_str(&line)
                .map_err(|e| TahError::Format(format!("label record: {e}")))?,
        );
    }
    if labels.len() != hdr.count {
        return Err(TahError::Format(format!(
            "label file has {} records, header says {}",
            labels.len(),
            hdr.count
        )));
    }
    Ok(LabelSet {
        d_max: hdr.d_max,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_labels(depths: &[usize], d_max: usize) -> LabelSet {
        LabelSet {
            d_max,
            labels: depths
                .iter()
                .enumerate()
                .map(|(i, &d)| TokenLabel {
                    seq: 0,
                    index: i,
                    gold: 0,
                    ref_top1: 0,
                    ref_ce: 0.0,
                    depth: d,
                    continuation: continuation_labels(d, d_max),
                })
                .collect(),
        }
    }

    #[test]
    fn binary_rule_indicator() {
        assert_eq!(oracle_depth_binary(3, 3), 1);
        assert_eq!(oracle_depth_binary(3, 4), 2);
    }

    #[test]
    fn mean_depth_from_match_rate() {
        // 85% of tokens matched by the reference -> mean depth 1.15
        let depths: Vec<usize> = (0..100).map(|i| if i < 85 { 1 } else { 2 }).collect();
        let set = synthetic_labels(&depths, 2);
        assert!((set.mean_depth() - 1.15).abs() < 1e-12);
    }

    #[test]
    fn quantile_rejects_empty_or_degenerate_inputs() {
        assert!(matches!(
            oracle_depth_quantile(&[], 3),
            Err(TahError::Contract(_))
        ));
        assert!(matches!(
            oracle_depth_quantile(&[1.0], 1),
            Err(TahError::Config(_))
        ));
        assert!(matches!(
            oracle_depth_quantile(&[f64::NAN], 2),
            Err(TahError::Numeric(_))
        ));
    }

    #[test]
    fn quantile_degenerate_cdf_all_equal() {
        let depths = oracle_depth_quantile(&[0.7; 50], 3).unwrap();
        assert!(depths.iter().all(|&d| d == depths[0]));
        // all ranks are 1.0 -> H = 3
        assert_eq!(depths[0], 3);
    }

    #[test]
    fn quantile_formula_spot_values() {
        // rank 0.99 -> floor(2.97) = 2; rank 1.0 -> 3
        let mut losses: Vec<f64> = (0..100).map(|i| i as f64).collect();
        losses.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let depths = oracle_depth_quantile(&losses, 3).unwrap();
        // the 99th percentile loss (second largest) has rank 0.99
        let second_largest = losses
            .iter()
            .position(|&l| (l - 98.0).abs() < 1e-12)
            .unwrap();
        assert_eq!(depths[second_largest], 2);
        let largest = losses.iter().position(|&l| (l - 99.0).abs() < 1e-12).unwrap();
        assert_eq!(depths[largest], 3);
    }

    #[test]
    fn quantile_matches_brute_force_binning() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let losses: Vec<f64> = (0..1000)
            .map(|_| (rng.gen_range(0.0..6.0f64) * 4.0).round() / 4.0) // many ties
            .collect();
        let d_max = 4;
        let got = oracle_depth_quantile(&losses, d_max).unwrap();
        // brute force: O(n^2) counting of <= pairs
        let n = losses.len() as f64;
        let want: Vec<usize> = losses
            .iter()
            .map(|&l| {
                let cnt = losses.iter().filter(|&&x| x <= l).count() as f64;
                (((cnt / n) * d_max as f64).floor() as usize).clamp(1, d_max)
            })
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn quantile_is_monotone() {
        let losses = [0.5, 1.5, 1.5, 3.0, 0.1, 2.9];
        let depths = oracle_depth_quantile(&losses, 3).unwrap();
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] <= losses[j] {
                    assert!(depths[i] <= depths[j]);
                }
            }
        }
    }

    #[test]
    fn continuation_bit_patterns() {
        assert_eq!(continuation_labels(1, 2), vec![false]);
        assert_eq!(continuation_labels(2, 2), vec![true]);
        assert_eq!(continuation_labels(3, 3), vec![true, true]);
        // monotone and consistent with depth = 1 + sum(bits)
        for d_max in 2..5 {
            for depth in 1..=d_max {
                let bits = continuation_labels(depth, d_max);
                let ones = bits.iter().filter(|&&b| b).count();
                assert_eq!(depth, 1 + ones);
                for w in bits.windows(2) {
                    assert!(w[0] || !w[1], "bits must be nonincreasing");
                }
            }
        }
    }

    #[test]
    fn binary_rule_equivalence_with_continuation() {
        for (r, g) in [(1u32, 1u32), (1, 2)] {
            let depth = oracle_depth_binary(r, g);
            let bits = continuation_labels(depth, 2);
            assert_eq!(depth, 1 + usize::from(bits[0]));
        }
    }

    #[test]
    fn class_weight_ratios() {
        let mut depths = vec![1usize; 90];
        depths.extend(vec![2usize; 10]);
        let set = synthetic_labels(&depths, 2);
        let w = class_weights(&set, 100.0).unwrap();
        assert!((w.weights[0] - 9.0).abs() < 1e-12);
        assert!(w.degenerate_depths.is_empty());

        let balanced = synthetic_labels(&[1, 2, 1, 2], 2);
        let w = class_weights(&balanced, 100.0).unwrap();
        assert!((w.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_weight_degenerate_clamped() {
        let set = synthetic_labels(&[1, 1, 1], 2);
        let w = class_weights(&set, 50.0).unwrap();
        assert_eq!(w.degenerate_depths, vec![1]);
        assert_eq!(w.weights[0], 50.0);
    }

    #[test]
    fn perturb_zero_rates_is_identity() {
        let set = synthetic_labels(&[1, 2, 1, 1, 2], 2);
        let (noisy, report) = perturb_policy(&set, 0.0, 0.0, 9).unwrap();
        assert_eq!(noisy, set);
        assert_eq!(report.realized_overthink, 0.0);
        assert_eq!(report.realized_underthink, 0.0);
    }

    #[test]
    fn perturb_realized_rate_close_to_requested() {
        // 10^4 decisions (d_max=2 -> one per token), 70% stops
        let depths: Vec<usize> = (0..10_000).map(|i| if i % 10 < 7 { 1 } else { 2 }).collect();
        let set = synthetic_labels(&depths, 2);
        let (noisy, report) = perturb_policy(&set, 0.10, 0.0, 1234).unwrap();
        assert!(
            (report.realized_overthink - 0.10).abs() <= 0.01,
            "realized {}",
            report.realized_overthink
        );
        // monotone bits preserved
        for l in &noisy.labels {
            for w in l.continuation.windows(2) {
                assert!(w[0] || !w[1]);
            }
            assert_eq!(l.depth, 1 + l.continuation.iter().filter(|&&b| b).count());
        }
        // deterministic under seed
        let (noisy2, _) = perturb_policy(&set, 0.10, 0.0, 1234).unwrap();
        assert_eq!(noisy, noisy2);
    }

    #[test]
    fn perturb_infeasible_rate_rejected() {
        // all tokens continue: no stop decisions to flip
        let set = synthetic_labels(&[2, 2, 2], 2);
        assert!(matches!(
            perturb_policy(&set, 0.5, 0.0, 0),
            Err(TahError::Contract(_))
        ));
    }

    #[test]
    fn preset_noise_grid_is_runnable() {
        let depths: Vec<usize> = (0..1000).map(|i| if i % 4 == 0 { 2 } else { 1 }).collect();
        let set = synthetic_labels(&depths, 2);
        for &(under, over) in PRESET_NOISE_GRID.iter() {
            let (_, report) = perturb_policy(&set, over, under, 7).unwrap();
            assert_eq!(report.requested_overthink, over);
            assert_eq!(report.requested_underthink, under);
        }
    }

    #[test]
    fn label_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = LabelSet {
            d_max: 2,
            labels: vec![TokenLabel {
                seq: 3,
                index: 7,
                gold: 2,
                ref_top1: 5,
                ref_ce: 1.25,
                depth: 2,
                continuation: vec![true],
            }],
        };
        let p = dir.path().join("labels.jsonl");
        save_labels(&p, &set).unwrap();
        let loaded = load_labels(&p).unwrap();
        assert_eq!(loaded, set);
    }
}

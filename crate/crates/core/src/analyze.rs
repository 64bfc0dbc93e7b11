//! Teacher-forced evaluation and diagnostics: per-policy next-token
//! accuracy, latent-overthinking transition counts, token-alternation
//! statistics, continuation-threshold sweeps, attention depth-mass analysis,
//! and the noise-sensitivity harness with its linear fit.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DepthMassAccumulator;
use crate::data::TokenizedCorpus;
use crate::decider::Decider;
use crate::error::{bail_contract, Result, TahError};
use crate::execute::{execute_sequence, IterationRule};
use crate::generate::FlopsModel;
use crate::model::Backbone;
use crate::tensor::{no_grad, Scalar};

/// Teacher-forced evaluation policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    Standard,
    AlwaysThink,
    /// Iterate while the current depth's top-1 differs from the gold token.
    TahOracle,
    /// Iterate while the decider's continuation probability clears the
    /// threshold.
    TahDecider,
}

/// Transition counts between the depth-1 prediction and the final-depth
/// prediction, judged against gold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transitions {
    pub kept_correct: usize,
    pub wrong_to_right: usize,
    pub right_to_wrong: usize,
    pub kept_wrong: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub policy: EvalPolicy,
    /// Final-depth next-token accuracy.
    pub accuracy: f64,
    pub depth1_accuracy: f64,
    pub mean_iterations: f64,
    /// Fraction of tokens iterated beyond depth 1.
    pub continue_fraction: f64,
    pub transitions: Transitions,
    pub tokens: usize,
    pub flops_per_token: f64,
    /// Accuracy restricted to answer-key computation positions, when known.
    pub computation_accuracy: Option<f64>,
}

/// Runs a teacher-forced pass over `indices` of the corpus under `policy`.
pub fn evaluate_policy<T: Scalar>(
    model: &Backbone<T>,
    decider: Option<&Decider<T>>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    policy: EvalPolicy,
    threshold_override: Option<f64>,
    max_len: usize,
) -> Result<EvalOutcome> {
    let decider_over = match (policy, decider, threshold_override) {
        (EvalPolicy::TahDecider, None, _) => {
            return Err(TahError::Config(
                "tah_decider evaluation requires a decider".into(),
            ))
        }
        (EvalPolicy::TahDecider, Some(d), Some(th)) => {
            let mut cfg = d.config.clone();
            cfg.c_threshold = th;
            Some(Decider {
                config: cfg,
                layers: d.layers.clone(),
            })
        }
        _ => None,
    };
    no_grad(|| {
        let d_max = model.config.max_depth;
        let fm = FlopsModel::new(&model.config);
        let mut t = Transitions::default();
        let mut tokens = 0usize;
        let mut iterated = 0usize;
        let mut iter_sum = 0usize;
        let mut correct = 0usize;
        let mut d1_correct = 0usize;
        let mut flops = 0u64;
        let mut comp_total = 0usize;
        let mut comp_correct = 0usize;
        for &i in indices {
            let seq = &corpus.sequences[i];
            if seq.len() < 2 || seq.len() > max_len {
                continue;
            }
            let inputs = &seq[..seq.len() - 1];
            let targets = &seq[1..];
            let mut rule: IterationRule<'_, T> = match policy {
                EvalPolicy::Standard => IterationRule::FixedDepths(vec![1; inputs.len()]),
                EvalPolicy::AlwaysThink => IterationRule::FixedDepths(vec![d_max; inputs.len()]),
                EvalPolicy::TahOracle => IterationRule::OracleMismatch {
                    targets: targets.to_vec(),
                },
                EvalPolicy::TahDecider => IterationRule::DeciderGate {
                    decider: decider_over
                        .as_ref()
                        .or(decider)
                        .expect("decider presence checked"),
                },
            };
            let mut cache = model.cache();
            let exec = execute_sequence(model, inputs, &mut rule, &mut cache, None)?;
            for pass in &exec.passes {
                flops += pass.positions.len() as u64
                    * fm.pass_flops(pass.depth, pass.visible_keys as u64);
            }
            for p in 0..inputs.len() {
                let gold = targets[p];
                let d1 = exec.top1_depth1[p] == gold;
                let fin = exec.top1_final[p] == gold;
                tokens += 1;
                iter_sum += exec.final_depth[p];
                if exec.final_depth[p] > 1 {
                    iterated += 1;
                }
                if d1 {
                    d1_correct += 1;
                }
                if fin {
                    correct += 1;
                }
                match (d1, fin) {
                    (true, true) => t.kept_correct += 1,
                    (false, true) => t.wrong_to_right += 1,
                    (true, false) => t.right_to_wrong += 1,
                    (false, false) => t.kept_wrong += 1,
                }
                // answer keys flag the predicted (next) character
                if corpus.computation[i][p + 1] {
                    comp_total += 1;
                    if fin {
                        comp_correct += 1;
                    }
                }
            }
        }
        if tokens == 0 {
            return Err(TahError::EmptyCorpus("no evaluable tokens".into()));
        }
        Ok(EvalOutcome {
            policy,
            accuracy: correct as f64 / tokens as f64,
            depth1_accuracy: d1_correct as f64 / tokens as f64,
            mean_iterations: iter_sum as f64 / tokens as f64,
            continue_fraction: iterated as f64 / tokens as f64,
            transitions: t,
            tokens,
            flops_per_token: flops as f64 / tokens as f64,
            computation_accuracy: if comp_total > 0 {
                Some(comp_correct as f64 / comp_total as f64)
            } else {
                None
            },
        })
    })
}

/// Latent-overthinking report: transition counts per policy.
pub fn overthink_report<T: Scalar>(
    model: &Backbone<T>,
    decider: Option<&Decider<T>>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    max_len: usize,
) -> Result<Vec<EvalOutcome>> {
    let mut policies = vec![EvalPolicy::Standard];
    if model.config.max_depth >= 2 {
        policies.push(EvalPolicy::AlwaysThink);
        policies.push(EvalPolicy::TahOracle);
        if decider.is_some() {
            policies.push(EvalPolicy::TahDecider);
        }
    }
    policies
        .into_iter()
        .map(|p| evaluate_policy(model, decider, corpus, indices, p, None, max_len))
        .collect()
}

/// Continuation-rate and next-token-alternation statistics per token type,
/// conditioned on the depth-1 top-1 prediction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TypeStats {
    pub occurrences: usize,
    pub continued: usize,
    pub continue_rate: f64,
    /// Final-depth top-1 distribution for continued tokens.
    pub transitions: BTreeMap<u32, usize>,
}

pub fn token_alternation_stats<T: Scalar>(
    model: &Backbone<T>,
    decider: Option<&Decider<T>>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    policy: EvalPolicy,
    max_len: usize,
) -> Result<BTreeMap<u32, TypeStats>> {
    if !matches!(policy, EvalPolicy::TahOracle | EvalPolicy::TahDecider) {
        bail_contract!("alternation stats need a decider or oracle policy");
    }
    no_grad(|| {
        let mut stats: BTreeMap<u32, TypeStats> = BTreeMap::new();
        for &i in indices {
            let seq = &corpus.sequences[i];
            if seq.len() < 2 || seq.len() > max_len {
                continue;
            }
            let inputs = &seq[..seq.len() - 1];
            let targets = &seq[1..];
            let mut rule: IterationRule<'_, T> = match policy {
                EvalPolicy::TahOracle => IterationRule::OracleMismatch {
                    targets: targets.to_vec(),
                },
                EvalPolicy::TahDecider => IterationRule::DeciderGate {
                    decider: decider.ok_or_else(|| {
                        TahError::Config("alternation stats with decider policy needs one".into())
                    })?,
                },
                _ => unreachable!(),
            };
            let mut cache = model.cache();
            let exec = execute_sequence(model, inputs, &mut rule, &mut cache, None)?;
            for p in 0..inputs.len() {
                let t1 = exec.top1_depth1[p];
                let entry = stats.entry(t1).or_default();
                entry.occurrences += 1;
                if exec.final_depth[p] > 1 {
                    entry.continued += 1;
                    *entry.transitions.entry(exec.top1_final[p]).or_default() += 1;
                }
            }
        }
        for s in stats.values_mut() {
            s.continue_rate = if s.occurrences > 0 {
                s.continued as f64 / s.occurrences as f64
            } else {
                0.0
            };
        }
        Ok(stats)
    })
}

/// One point of a continuation-threshold sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub continue_fraction: f64,
    pub accuracy: f64,
}

/// Evaluates the decider policy across thresholds; the continue fraction is
/// monotone nonincreasing in the threshold.
pub fn threshold_sweep<T: Scalar>(
    model: &Backbone<T>,
    decider: &Decider<T>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    thresholds: &[f64],
    max_len: usize,
) -> Result<Vec<ThresholdPoint>> {
    let mut out = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let o = evaluate_policy(
            model,
            Some(decider),
            corpus,
            indices,
            EvalPolicy::TahDecider,
            Some(th),
            max_len,
        )?;
        out.push(ThresholdPoint {
            threshold: th,
            continue_fraction: o.continue_fraction,
            accuracy: o.accuracy,
        });
    }
    Ok(out)
}

/// Attention mass on depth-1 keys for depth-2 queries, per layer and head;
/// runs the batch at full depth so depth-2 queries exist.
pub fn attention_depth_mass<T: Scalar>(
    model: &Backbone<T>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    max_len: usize,
) -> Result<DepthMassAccumulator> {
    if model.config.max_depth < 2 {
        bail_contract!("attention depth-mass analysis requires max_depth >= 2");
    }
    no_grad(|| {
        let mut acc = DepthMassAccumulator::new(model.config.num_layers, model.config.num_heads);
        for &i in indices {
            let seq = &corpus.sequences[i];
            if seq.len() < 2 || seq.len() > max_len {
                continue;
            }
            let inputs = &seq[..seq.len() - 1];
            let depths = vec![model.config.max_depth; inputs.len()];
            let mut cache = model.cache();
            let mut observe = |layer: usize, obs: &crate::attention::AttnObservation<'_, T>| {
                acc.record(layer, obs);
            };
            execute_sequence(
                model,
                inputs,
                &mut IterationRule::FixedDepths(depths),
                &mut cache,
                Some(&mut observe),
            )?;
        }
        Ok(acc)
    })
}

/// Least-squares fit of `acc ~ a*underthink + b*overthink + c`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearFit {
    pub underthink_coeff: f64,
    pub overthink_coeff: f64,
    pub intercept: f64,
    pub max_residual: f64,
}

/// Solves the 3x3 normal equations; a singular design matrix is a fit error.
pub fn linear_fit(points: &[(f64, f64, f64)]) -> Result<LinearFit> {
    if points.len() < 3 {
        return Err(TahError::Fit(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for &(u, o, acc) in points {
        let row = [u, o, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * acc;
        }
    }
    let x = solve3(ata, atb).ok_or_else(|| TahError::Fit("singular design matrix".into()))?;
    let max_residual = points
        .iter()
        .map(|&(u, o, acc)| (x[0] * u + x[1] * o + x[2] - acc).abs())
        .fold(0.0f64, f64::max);
    Ok(LinearFit {
        underthink_coeff: x[0],
        overthink_coeff: x[1],
        intercept: x[2],
        max_residual,
    })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..3 {
            if row == col {
                continue;
            }
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub requested_underthink: f64,
    pub requested_overthink: f64,
    pub realized_underthink: f64,
    pub realized_overthink: f64,
    pub accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub points: Vec<SensitivityPoint>,
    pub fit: LinearFit,
    /// Accuracy of the unperturbed oracle policy.
    pub clean_accuracy: f64,
}

/// Runs the teacher-forced oracle policy under calibrated gate noise at each
/// (underthink, overthink) grid point and fits a linear accuracy model.
/// The zero-noise point reproduces the unperturbed oracle accuracy exactly.
pub fn sensitivity_sweep<T: Scalar>(
    model: &Backbone<T>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    grid: &[(f64, f64)],
    seeds: &[u64],
    max_len: usize,
) -> Result<SensitivityReport> {
    if model.config.max_depth < 2 {
        bail_contract!("sensitivity analysis requires max_depth >= 2");
    }
    let clean = evaluate_policy(
        model,
        None,
        corpus,
        indices,
        EvalPolicy::TahOracle,
        None,
        max_len,
    )?;
    // decision census under the clean oracle, for flip-probability calibration
    let (census_stop, census_cont) = no_grad(|| -> Result<(usize, usize)> {
        let mut stops = 0usize;
        let mut conts = 0usize;
        for &i in indices {
            let seq = &corpus.sequences[i];
            if seq.len() < 2 || seq.len() > max_len {
                continue;
            }
            let inputs = &seq[..seq.len() - 1];
            let targets = &seq[1..];
            let mut rule = IterationRule::OracleMismatch {
                targets: targets.to_vec(),
            };
            let mut cache = model.cache();
            let exec = execute_sequence(model, inputs, &mut rule, &mut cache, None)?;
            for pass in &exec.passes {
                if pass.depth >= model.config.max_depth {
                    continue;
                }
                for (row, &p) in pass.positions.iter().enumerate() {
                    let (_, v) = pass.logits.dims2()?;
                    let top1 =
                        crate::model::argmax(&pass.logits.data()[row * v..(row + 1) * v]) as u32;
                    if top1 == targets[p] {
                        stops += 1;
                    } else {
                        conts += 1;
                    }
                }
            }
        }
        Ok((stops, conts))
    })?;
    let total = (census_stop + census_cont) as f64;
    if total == 0.0 {
        bail_contract!("no gate decisions in the evaluation split");
    }

    let mut points = Vec::new();
    for &(under, over) in grid {
        for &seed in seeds {
            let p_over = if over == 0.0 {
                0.0
            } else {
                if census_stop == 0 {
                    bail_contract!("no stop decisions available to overthink");
                }
                over * total / census_stop as f64
            };
            let p_under = if under == 0.0 {
                0.0
            } else {
                if census_cont == 0 {
                    bail_contract!("no continue decisions available to underthink");
                }
                under * total / census_cont as f64
            };
            if p_over > 1.0 || p_under > 1.0 {
                bail_contract!("noise grid point ({under},{over}) infeasible for this census");
            }
            let point = no_grad(|| -> Result<SensitivityPoint> {
                let mut correct = 0usize;
                let mut tokens = 0usize;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut flipped_cont = 0usize;
                let mut flipped_stop = 0usize;
                let mut decisions = 0usize;
                for &i in indices {
                    let seq = &corpus.sequences[i];
                    if seq.len() < 2 || seq.len() > max_len {
                        continue;
                    }
                    let inputs = &seq[..seq.len() - 1];
                    let targets = &seq[1..];
                    let mut rule = IterationRule::NoisyOracle {
                        targets: targets.to_vec(),
                        p_overthink: p_over,
                        p_underthink: p_under,
                        rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
                        flipped_to_continue: 0,
                        flipped_to_stop: 0,
                        decisions: 0,
                    };
                    let mut cache = model.cache();
                    let exec = execute_sequence(model, inputs, &mut rule, &mut cache, None)?;
                    if let IterationRule::NoisyOracle {
                        flipped_to_continue,
                        flipped_to_stop,
                        decisions: d,
                        ..
                    } = rule
                    {
                        flipped_cont += flipped_to_continue;
                        flipped_stop += flipped_to_stop;
                        decisions += d;
                    }
                    for p in 0..inputs.len() {
                        tokens += 1;
                        if exec.top1_final[p] == targets[p] {
                            correct += 1;
                        }
                    }
                }
                Ok(SensitivityPoint {
                    requested_underthink: under,
                    requested_overthink: over,
                    realized_underthink: flipped_stop as f64 / decisions.max(1) as f64,
                    realized_overthink: flipped_cont as f64 / decisions.max(1) as f64,
                    accuracy: correct as f64 / tokens.max(1) as f64,
                    seed,
                })
            })?;
            points.push(point);
        }
    }
    let fit_points: Vec<(f64, f64, f64)> = points
        .iter()
        .map(|p| (p.realized_underthink, p.realized_overthink, p.accuracy))
        .collect();
    let fit = linear_fit(&fit_points)?;
    Ok(SensitivityReport {
        points,
        fit,
        clean_accuracy: clean.accuracy,
    })
}

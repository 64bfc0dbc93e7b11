//! Depth-major execution of one sequence under an iteration rule: all tokens
//! run depth 1 in parallel, the rule selects which continue to depth 2, and
//! so on. This is the training/prefill path; its outputs are bit-compatible
//! with incremental decoding over the same depth assignment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::KvCache2D;
use crate::decider::Decider;
use crate::error::{bail_contract, Result};
use crate::model::{argmax, AttnObserverFn, Backbone};
use crate::tensor::{Scalar, Tensor};

/// Decides, after each depth pass, which tokens keep iterating.
pub enum IterationRule<'a, T: Scalar> {
    /// Preassigned per-position depths (standard, always-think, or oracle
    /// labels), clamped to the model's maximum depth.
    FixedDepths(Vec<usize>),
    /// The learned gate: continue while c_hat exceeds the threshold.
    DeciderGate { decider: &'a Decider<T> },
    /// Continue while this depth's top-1 differs from `targets[p]` (gold
    /// tokens for teacher-forced evaluation, a reference model's top-1
    /// predictions during generation).
    OracleMismatch { targets: Vec<u32> },
    /// The oracle-mismatch rule with calibrated decision noise; flips are
    /// drawn per decision and realized counts accumulate in the rule.
    NoisyOracle {
        targets: Vec<u32>,
        p_overthink: f64,
        p_underthink: f64,
        rng: ChaCha8Rng,
        flipped_to_continue: usize,
        flipped_to_stop: usize,
        decisions: usize,
    },
}

/// Outputs of one depth pass over the positions still iterating.
pub struct DepthPass<T: Scalar> {
    pub depth: usize,
    /// Token positions processed in this pass (strictly increasing).
    pub positions: Vec<usize>,
    /// Normalized last-layer hidden states, one row per position.
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
    pub tapped: [Tensor<T>; 3],
    /// Keys visible to each query row of this pass.
    pub visible_keys: usize,
}

pub struct SequenceExecution<T: Scalar> {
    pub passes: Vec<DepthPass<T>>,
    /// Realized final depth per input position.
    pub final_depth: Vec<usize>,
    /// Decider scores per position, one entry per gate evaluated (empty for
    /// non-decider rules).
    pub c_hat: Vec<Vec<f64>>,
    /// Depth-1 top-1 prediction per position.
    pub top1_depth1: Vec<u32>,
    /// Final-depth top-1 prediction per position.
    pub top1_final: Vec<u32>,
}

impl<T: Scalar> SequenceExecution<T> {
    /// Row index of `position` within the pass at `depth`.
    pub fn row_of(&self, depth: usize, position: usize) -> Option<usize> {
        self.passes
            .get(depth - 1)
            .and_then(|p| p.positions.iter().position(|&q| q == position))
    }
}

fn row_top1<T: Scalar>(logits: &Tensor<T>, row: usize) -> u32 {
    let (_, v) = logits.dims2().expect("logits 2-D");
    let data = logits.data();
    argmax(&data[row * v..(row + 1) * v]) as u32
}

/// Runs a full teacher-forced sequence depth-major under `rule`, filling
/// `cache` (which must be empty). `inputs[p]` is the token consumed at
/// position p; gates fire after every pass below the maximum depth.
pub fn execute_sequence<T: Scalar>(
    model: &Backbone<T>,
    inputs: &[u32],
    rule: &mut IterationRule<'_, T>,
    cache: &mut KvCache2D<T>,
    mut observer: Option<AttnObserverFn<'_, T>>,
) -> Result<SequenceExecution<T>> {
    if inputs.is_empty() {
        bail_contract!("execute_sequence: empty input");
    }
    let d_max = model.config.max_depth;
    let m = inputs.len();
    if let IterationRule::FixedDepths(d) = rule {
        if d.len() != m {
            bail_contract!("execute_sequence: {} depths for {m} inputs", d.len());
        }
    }
    let mut final_depth = vec![1usize; m];
    let mut c_hat: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut passes: Vec<DepthPass<T>> = Vec::new();
    let mut top1_depth1 = vec![0u32; m];
    let mut top1_final = vec![0u32; m];

    let mut x = model.embed_tokens(inputs)?;
    let mut positions: Vec<usize> = (0..m).collect();
    let mut depth = 1usize;
    loop {
        let reborrow: Option<AttnObserverFn<'_, T>> = observer.as_mut().map(|f| &mut **f as _);
        let out = model.forward_depth(&x, &positions, depth, cache, reborrow)?;
        let logits = model.lm_head(&out.hidden)?;
        let visible_keys = (0..model.config.num_layers)
            .map(|l| (1..=depth).map(|d| cache.len_at(l, d)).sum::<usize>())
            .next()
            .unwrap_or(0);
        for (row, &p) in positions.iter().enumerate() {
            let t = row_top1(&logits, row);
            if depth == 1 {
                top1_depth1[p] = t;
            }
            top1_final[p] = t;
            final_depth[p] = depth;
        }
        // gate decisions for the next depth
        let mut continuing_rows: Vec<usize> = Vec::new();
        if depth < d_max {
            let scores: Option<Vec<f64>> = match rule {
                IterationRule::DeciderGate { decider } => Some(
                    decider
                        .score_taps(&out.tapped)?
                        .to_vec()
                        .into_iter()
                        .map(|s| s.to_f64())
                        .collect(),
                ),
                _ => None,
            };
            for (row, &p) in positions.iter().enumerate() {
                let cont = match rule {
                    IterationRule::FixedDepths(depths) => depths[p].min(d_max) > depth,
                    IterationRule::DeciderGate { decider } => {
                        let s = scores.as_ref().expect("scores computed")[row];
                        c_hat[p].push(s);
                        decider.decide(s, depth, d_max).action
                            == crate::decider::GateAction::Continue
                    }
                    IterationRule::OracleMismatch { targets } => {
                        row_top1(&logits, row) != targets[p]
                    }
                    IterationRule::NoisyOracle {
                        targets,
                        p_overthink,
                        p_underthink,
                        rng,
                        flipped_to_continue,
                        flipped_to_stop,
                        decisions,
                    } => {
                        *decisions += 1;
                        let oracle_continue = row_top1(&logits, row) != targets[p];
                        if oracle_continue {
                            if *p_underthink > 0.0 && rng.gen_bool(*p_underthink) {
                                *flipped_to_stop += 1;
                                false
                            } else {
                                true
                            }
                        } else if *p_overthink > 0.0 && rng.gen_bool(*p_overthink) {
                            *flipped_to_continue += 1;
                            true
                        } else {
                            false
                        }
                    }
                };
                if cont {
                    continuing_rows.push(row);
                }
            }
        }
        let done = continuing_rows.is_empty();
        let hidden = out.hidden.clone();
        passes.push(DepthPass {
            depth,
            positions: positions.clone(),
            hidden: out.hidden,
            logits,
            tapped: out.tapped,
            visible_keys,
        });
        if done {
            break;
        }
        // build the next depth's inputs from the continuing rows
        let next_positions: Vec<usize> = continuing_rows.iter().map(|&r| positions[r]).collect();
        let y_sel = hidden.select_rows(&continuing_rows)?;
        let x_sel = x.select_rows(&continuing_rows)?;
        x = model.next_depth_input(&y_sel, &x_sel)?;
        positions = next_positions;
        depth += 1;
    }
    Ok(SequenceExecution {
        passes,
        final_depth,
        c_hat,
        top1_depth1,
        top1_final,
    })
}

/// Gate sites of an oracle-labeled sequence: (position, gate depth) pairs
/// with depth in `1..=min(d_max-1, label_depth)`, i.e. the decisions the
/// stage-2 loss sums over.
pub fn gate_sites(depths: &[usize], d_max: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (p, &dp) in depths.iter().enumerate() {
        for d in 1..=(d_max.saturating_sub(1)).min(dp) {
            out.push((p, d));
        }
    }
    out
}

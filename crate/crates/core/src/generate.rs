//! Autoregressive generation under any iteration policy, with per-depth
//! verbalized candidates for overthinking diagnostics and analytic FLOPs
//! accounting.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::KvCache2D;
use crate::decider::Decider;
use crate::error::{bail_contract, Result, TahError};
use crate::execute::{execute_sequence, IterationRule};
use crate::model::{argmax, sample, Backbone, ModelConfig, SampleRule};
use crate::tensor::{no_grad, Scalar, Tensor};

/// Analytic per-pass FLOP counts derived from the model shape.
///
/// Counting rule: 2 FLOPs per multiply-accumulate in weight matmuls (the
/// seven per-layer projections plus the head), the low-rank delta factors at
/// depths > 1, and the attention score/value matmuls at 2 FLOPs per MAC over
/// the actual visible key count: `4 * width * visible_keys` per query per
/// layer. Embedding lookups, norms, and elementwise work are free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    /// Weight-matmul FLOPs for one token passing once through the model.
    pub weight_flops_per_pass: u64,
    /// Additional low-rank delta FLOPs per pass at depths > 1.
    pub lora_flops_per_pass: u64,
    /// Attention FLOPs per visible key per query: `4 * width * num_layers`.
    pub attn_flops_per_key: u64,
}

impl FlopsModel {
    pub fn new(config: &ModelConfig) -> Self {
        let h = config.hidden_dim as u64;
        let aw = (config.num_heads * config.head_dim) as u64;
        let mlp = config.mlp_dim as u64;
        let v = config.vocab_size as u64;
        let per_layer = 2 * (3 * h * aw + aw * h + 2 * h * mlp + mlp * h);
        let weight = config.num_layers as u64 * per_layer + 2 * h * v;
        let r = config.lora_rank as u64;
        let mut lora = 0u64;
        if r > 0 && config.max_depth > 1 {
            if config.lora_targets.attention {
                lora += 2 * (3 * (h * r + r * aw) + (aw * r + r * h));
            }
            if config.lora_targets.mlp {
                lora += 2 * (2 * (h * r + r * mlp) + (mlp * r + r * h));
            }
            lora *= config.num_layers as u64;
        }
        FlopsModel {
            weight_flops_per_pass: weight,
            lora_flops_per_pass: lora,
            attn_flops_per_key: 4 * aw * config.num_layers as u64,
        }
    }

    /// FLOPs for one token's pass at `depth` seeing `visible_keys` keys.
    pub fn pass_flops(&self, depth: usize, visible_keys: u64) -> u64 {
        let mut f = self.weight_flops_per_pass + self.attn_flops_per_key * visible_keys;
        if depth > 1 {
            f += self.lora_flops_per_pass;
        }
        f
    }
}

/// One executed pass of one token: its depth and how many keys it saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassStat {
    pub depth: usize,
    pub visible_keys: u64,
}

/// Per-token record of an emitted token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 0-based index over emitted tokens.
    pub index: usize,
    /// Position of the consumed input token.
    pub position: usize,
    /// The emitted (sampled) token id.
    pub token: u32,
    /// Depths executed: contiguous 1..=d.
    pub depths: usize,
    /// Decider scores per evaluated gate (decider policy only).
    pub c_hat: Vec<f64>,
    /// Greedy verbalization of every depth's hidden state (diagnostics only;
    /// never affects generation).
    pub per_depth_top1: Vec<u32>,
    pub passes: Vec<PassStat>,
    /// Cumulative FLOPs including prefill, after this token.
    pub flops: u64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt_len: usize,
    /// Pass stats of the prompt prefill (one entry per token per depth).
    pub prefill_passes: Vec<PassStat>,
    pub prefill_depths: Vec<usize>,
    pub entries: Vec<TraceEntry>,
    pub total_flops: u64,
}

impl GenerationTrace {
    pub fn tokens(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.token).collect()
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.entries.is_empty() {
            return f64::NAN;
        }
        self.entries.iter().map(|e| e.depths as f64).sum::<f64>() / self.entries.len() as f64
    }
}

/// Iteration policy during generation.
pub enum GenPolicy<'a, T: Scalar> {
    Standard,
    AlwaysThink,
    Decider(&'a Decider<T>),
    /// Continue while the trace model's depth-d top-1 differs from the
    /// frozen reference model's top-1 at the same position.
    Oracle(&'a Backbone<T>),
}

/// Incremental decoder owning a duo-causal cache. Feed one token at a time;
/// the gate closure sees each pass and decides whether to keep iterating.
pub struct DecodeSession<'m, T: Scalar> {
    model: &'m Backbone<T>,
    pub cache: KvCache2D<T>,
    next_position: usize,
    flops_model: FlopsModel,
    pub flops: u64,
}

/// What the gate closure sees after each pass.
pub struct StepPass<'a, T: Scalar> {
    pub depth: usize,
    pub top1: u32,
    pub logits: &'a Tensor<T>,
    pub tapped: &'a [Tensor<T>; 3],
}

pub struct StepOutcome<T: Scalar> {
    pub position: usize,
    /// Final-depth logits row [1, v].
    pub logits: Tensor<T>,
    /// Hidden state per executed depth.
    pub hiddens: Vec<Tensor<T>>,
    pub per_depth_top1: Vec<u32>,
    pub passes: Vec<PassStat>,
}

impl<'m, T: Scalar> DecodeSession<'m, T> {
    pub fn new(model: &'m Backbone<T>) -> Self {
        DecodeSession {
            model,
            cache: model.cache(),
            next_position: 0,
            flops_model: FlopsModel::new(&model.config),
            flops: 0,
        }
    }

    /// Adopts a cache already filled by a depth-major prefill.
    pub fn resume_at(model: &'m Backbone<T>, cache: KvCache2D<T>, next_position: usize) -> Self {
        DecodeSession {
            model,
            cache,
            next_position,
            flops_model: FlopsModel::new(&model.config),
            flops: 0,
        }
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    /// Consumes one input token, iterating while `gate` returns true (the
    /// gate is only consulted below the maximum depth).
    pub fn step(
        &mut self,
        token: u32,
        gate: &mut dyn FnMut(&StepPass<'_, T>) -> bool,
    ) -> Result<StepOutcome<T>> {
        let position = self.next_position;
        if position >= self.model.config.max_position {
            return Err(TahError::Length(format!(
                "position {position} exceeds max_position {}",
                self.model.config.max_position
            )));
        }
        let d_max = self.model.config.max_depth;
        let mut x = self.model.embed_tokens(&[token])?;
        let mut hiddens = Vec::new();
        let mut per_depth_top1 = Vec::new();
        let mut passes = Vec::new();
        let mut depth = 1usize;
        let mut logits;
        loop {
            let out = self
                .model
                .forward_depth(&x, &[position], depth, &mut self.cache, None)?;
            logits = self.model.lm_head(&out.hidden)?;
            let visible = (1..=depth).map(|d| self.cache.len_at(0, d)).sum::<usize>() as u64;
            self.flops += self.flops_model.pass_flops(depth, visible);
            passes.push(PassStat {
                depth,
                visible_keys: visible,
            });
            let top1 = argmax(&logits.data()[..]) as u32;
            per_depth_top1.push(top1);
            hiddens.push(out.hidden.clone());
            let cont = depth < d_max
                && gate(&StepPass {
                    depth,
                    top1,
                    logits: &logits,
                    tapped: &out.tapped,
                });
            if !cont {
                break;
            }
            x = self.model.next_depth_input(&out.hidden, &x)?;
            depth += 1;
        }
        self.next_position += 1;
        Ok(StepOutcome {
            position,
            logits,
            hiddens,
            per_depth_top1,
            passes,
        })
    }
}

/// Autoregressive generation: prefill the prompt depth-major under the
/// policy, then decode token by token, verbalizing via the sampler at each
/// token's final depth.
pub fn generate<T: Scalar>(
    prompt: &[u32],
    model: &Backbone<T>,
    policy: &GenPolicy<'_, T>,
    sampler: SampleRule,
    max_new_tokens: usize,
    seed: u64,
) -> Result<GenerationTrace> {
    if prompt.is_empty() {
        bail_contract!("generate: prompt must be nonempty");
    }
    if prompt.len() + max_new_tokens > model.config.max_position {
        return Err(TahError::Length(format!(
            "prompt {} + new {} exceeds max_position {}",
            prompt.len(),
            max_new_tokens,
            model.config.max_position
        )));
    }
    no_grad(|| generate_inner(prompt, model, policy, sampler, max_new_tokens, seed))
}

fn generate_inner<T: Scalar>(
    prompt: &[u32],
    model: &Backbone<T>,
    policy: &GenPolicy<'_, T>,
    sampler: SampleRule,
    max_new_tokens: usize,
    seed: u64,
) -> Result<GenerationTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flops_model = FlopsModel::new(&model.config);
    let d_max = model.config.max_depth;

    // reference session for the generation-time oracle: it consumes the
    // same token stream at depth 1
    let mut ref_session: Option<DecodeSession<'_, T>> = match policy {
        GenPolicy::Oracle(reference) => Some(DecodeSession::new(reference)),
        _ => None,
    };
    fn ref_predict<T: Scalar>(
        session: &mut Option<DecodeSession<'_, T>>,
        token: u32,
    ) -> Result<Option<u32>> {
        match session {
            Some(s) => {
                let out = s.step(token, &mut |_| false)?;
                Ok(Some(out.per_depth_top1[0]))
            }
            None => Ok(None),
        }
    }

    // depth-major prefill under the policy
    let mut prefill_rule: IterationRule<'_, T> = match policy {
        GenPolicy::Standard => IterationRule::FixedDepths(vec![1; prompt.len()]),
        GenPolicy::AlwaysThink => IterationRule::FixedDepths(vec![d_max; prompt.len()]),
        GenPolicy::Decider(d) => IterationRule::DeciderGate { decider: d },
        GenPolicy::Oracle(_) => {
            let mut targets = Vec::with_capacity(prompt.len());
            for &t in prompt {
                targets.push(ref_predict(&mut ref_session, t)?.expect("oracle reference"));
            }
            IterationRule::OracleMismatch { targets }
        }
    };
    let mut cache = model.cache();
    let prefill = execute_sequence(model, prompt, &mut prefill_rule, &mut cache, None)?;
    let mut prefill_passes = Vec::new();
    let mut flops = 0u64;
    for pass in &prefill.passes {
        for _ in &pass.positions {
            let stat = PassStat {
                depth: pass.depth,
                visible_keys: pass.visible_keys as u64,
            };
            flops += flops_model.pass_flops(stat.depth, stat.visible_keys);
            prefill_passes.push(stat);
        }
    }
    let mut session = DecodeSession::resume_at(model, cache, prompt.len());

    // seed the decode loop with the last prompt position's final logits
    let last_p = prompt.len() - 1;
    let last_d = prefill.final_depth[last_p];
    let last_row = prefill
        .row_of(last_d, last_p)
        .expect("final pass row exists");
    let mut next_logits: Vec<T> = {
        let logits = &prefill.passes[last_d - 1].logits;
        let (_, v) = logits.dims2()?;
        logits.data()[last_row * v..(last_row + 1) * v].to_vec()
    };

    let started = Instant::now();
    let mut entries = Vec::with_capacity(max_new_tokens);
    for step_idx in 0..max_new_tokens {
        let token = sample(&next_logits, sampler, &mut rng)?;
        let ref_target = ref_predict(&mut ref_session, token)?;
        let mut c_hats: Vec<f64> = Vec::new();
        let out = session.step(token, &mut |pass: &StepPass<'_, T>| match policy {
            GenPolicy::Standard => false,
            GenPolicy::AlwaysThink => true,
            GenPolicy::Decider(d) => {
                let score = d
                    .score_taps(pass.tapped)
                    .map(|s| s.data()[0].to_f64())
                    .unwrap_or(0.0);
                c_hats.push(score);
                score > d.config.c_threshold
            }
            GenPolicy::Oracle(_) => pass.top1 != ref_target.expect("oracle reference"),
        })?;
        flops += out
            .passes
            .iter()
            .map(|p| flops_model.pass_flops(p.depth, p.visible_keys))
            .sum::<u64>();
        next_logits = out.logits.to_vec();
        entries.push(TraceEntry {
            index: step_idx,
            position: out.position,
            token,
            depths: out.passes.len(),
            c_hat: c_hats,
            per_depth_top1: out.per_depth_top1,
            passes: out.passes,
            flops,
            wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(GenerationTrace {
        prompt_len: prompt.len(),
        prefill_passes,
        prefill_depths: prefill.final_depth,
        entries,
        total_flops: flops,
    })
}

/// Recomputes a trace's FLOPs from the analytic model; the trace must come
/// from a model with this config.
pub fn flops_count(config: &ModelConfig, trace: &GenerationTrace) -> Result<(u64, Vec<u64>)> {
    let fm = FlopsModel::new(config);
    for e in &trace.entries {
        if e.passes.iter().any(|p| p.depth > config.max_depth) {
            bail_contract!("trace pass depth exceeds config max_depth");
        }
    }
    let mut total = 0u64;
    for p in &trace.prefill_passes {
        total += fm.pass_flops(p.depth, p.visible_keys);
    }
    let mut per_token = Vec::with_capacity(trace.entries.len());
    for e in &trace.entries {
        let t: u64 = e
            .passes
            .iter()
            .map(|p| fm.pass_flops(p.depth, p.visible_keys))
            .sum();
        per_token.push(t);
        total += t;
    }
    Ok((total, per_token))
}

/// Writes a trace as a header line plus line-delimited JSON records.
pub fn save_trace<P: AsRef<std::path::Path>>(path: P, trace: &GenerationTrace) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let header = serde_json::json!({
        "prompt_len": trace.prompt_len,
        "prefill_depths": trace.prefill_depths,
        "total_flops": trace.total_flops,
    });
    writeln!(f, "{header}")?;
    for e in &trace.entries {
        writeln!(
            f,
            "{}",
            serde_json::to_string(e).map_err(|er| TahError::Format(er.to_string()))?
        )?;
    }
    Ok(())
}

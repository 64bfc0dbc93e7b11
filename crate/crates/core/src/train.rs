//! Two-stage training driven by static oracle labels, plus the fixed-depth
//! baselines and the token+latent ablation.
//!
//! Stage 1 finetunes the backbone (base weights and low-rank deltas jointly)
//! with next-token cross-entropy at each token's assigned depth; the
//! depth-major forward guarantees tokens not continuing past depth d
//! contribute no depth-(d+1) computation. Stage 2 freezes the backbone and
//! trains the iteration decider with class-reweighted BCE on tapped hidden
//! states collected under oracle-guided execution.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainProgress};
use crate::data::{batches, Split, TokenizedCorpus};
use crate::decider::{decider_accuracy, decider_loss, Decider, DeciderConfig};
use crate::error::{bail_config, bail_contract, Result, TahError};
use crate::execute::{execute_sequence, gate_sites, IterationRule};
use crate::model::{Backbone, ModelConfig};
use crate::policy::{class_weights, LabelSet};
use crate::tensor::{no_grad, AdamW, OptimizerHyper, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPolicy {
    /// Depth 1 always; equivalent to training a plain causal transformer.
    Standard,
    /// Depth d_max always.
    AlwaysThink,
    /// Oracle-labeled depth per token, loss only at that depth.
    Oracle,
    /// Oracle-labeled depth, loss summed over all depths up to it.
    TokenPlusLatent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Reference,
    Backbone,
    Decider,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub policy: TrainPolicy,
    pub stage: TrainStage,
    pub optimizer: OptimizerHyper,
    pub epochs: u64,
    pub batch_size: usize,
    /// Sequence length cap; longer sequences are excluded.
    pub max_len: usize,
    pub seed: u64,
    /// Extra checkpoint every N optimizer steps (0 = final/best only).
    pub checkpoint_every: u64,
    /// Validate every N optimizer steps (0 = once per epoch).
    pub eval_every: u64,
    pub val_fraction: f64,
    /// Gate-site minibatch for decider training.
    pub decider_batch: usize,
    /// Clamp for degenerate class weights.
    pub max_class_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            policy: TrainPolicy::Oracle,
            stage: TrainStage::Backbone,
            optimizer: OptimizerHyper::default(),
            epochs: 2,
            batch_size: 32,
            max_len: 128,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            val_fraction: 0.1,
            decider_batch: 256,
            max_class_weight: 100.0,
        }
    }
}

/// One line of the line-delimited training report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub perplexity: Option<f64>,
    pub tokens_at_depth: Option<Vec<u64>>,
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_val_metric: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Per-position depth assignment for a sequence of `len` inputs under a
/// policy. Oracle policies read the bound label set.
pub fn policy_depths(
    policy: TrainPolicy,
    d_max: usize,
    labels: Option<(&LabelSet, &BTreeMap<(usize, usize), usize>)>,
    seq_id: usize,
    len: usize,
) -> Result<Vec<usize>> {
    match policy {
        TrainPolicy::Standard => Ok(vec![1; len]),
        TrainPolicy::AlwaysThink => Ok(vec![d_max; len]),
        TrainPolicy::Oracle | TrainPolicy::TokenPlusLatent => {
            let (set, by_site) = labels.ok_or_else(|| {
                TahError::Config("oracle policy requires a bound label file".into())
            })?;
            if set.d_max != d_max {
                return Err(TahError::Alignment(format!(
                    "label d_max {} != model max_depth {d_max}",
                    set.d_max
                )));
            }
            let mut out = Vec::with_capacity(len);
            for p in 0..len {
                let idx = by_site.get(&(seq_id, p)).ok_or_else(|| {
                    TahError::Alignment(format!("no label for sequence {seq_id} position {p}"))
                })?;
                out.push(set.labels[*idx].depth.min(d_max));
            }
            Ok(out)
        }
    }
}

/// Cross-entropy over one executed sequence: sum of -log p(target) at each
/// supervised (position, depth) site plus the site count. Token-only
/// supervision trains each token at exactly its assigned depth; token+latent
/// sums every depth up to it.
pub fn stage1_sequence_loss<T: Scalar>(
    exec: &crate::execute::SequenceExecution<T>,
    targets: &[u32],
    depths: &[usize],
    token_plus_latent: bool,
) -> Result<(Option<Tensor<T>>, usize)> {
    let mut terms: Vec<Tensor<T>> = Vec::new();
    let mut count = 0usize;
    for pass in &exec.passes {
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for (row, &p) in pass.positions.iter().enumerate() {
            let supervised = if token_plus_latent {
                depths[p] >= pass.depth
            } else {
                depths[p] == pass.depth
            };
            if supervised {
                rows.push(row);
                cols.push(targets[p] as usize);
            }
        }
        if rows.is_empty() {
            continue;
        }
        count += rows.len();
        let logp = pass.logits.log_softmax_rows()?;
        let picked = logp.select_rows(&rows)?.select_cols(&cols)?;
        terms.push(picked.sum_all());
    }
    if terms.is_empty() {
        return Ok((None, 0));
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok((Some(total.affine(-T::one(), T::zero())), count))
}

/// Teacher-forced validation loss/perplexity under the training policy.
pub fn eval_perplexity<T: Scalar>(
    model: &Backbone<T>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    policy: TrainPolicy,
    labels: Option<(&LabelSet, &BTreeMap<(usize, usize), usize>)>,
    max_len: usize,
) -> Result<(f64, f64)> {
    no_grad(|| {
        let d_max = model.config.max_depth;
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in indices {
            let seq = &corpus.sequences[i];
            if seq.len() < 2 || seq.len() > max_len {
                continue;
            }
            let inputs = &seq[..seq.len() - 1];
            let targets = &seq[1..];
            let depths = policy_depths(policy, d_max, labels, i, inputs.len())?;
            let mut cache = model.cache();
            let exec = execute_sequence(
                model,
                inputs,
                &mut IterationRule::FixedDepths(depths.clone()),
                &mut cache,
                None,
            )?;
            let (loss, n) = stage1_sequence_loss(
                &exec,
                targets,
                &depths,
                policy == TrainPolicy::TokenPlusLatent,
            )?;
            if let Some(l) = loss {
                total += l.item().to_f64();
                count += n;
            }
        }
        if count == 0 {
            return Err(TahError::EmptyCorpus(
                "no evaluable sequences in split".into(),
            ));
        }
        let mean = total / count as f64;
        Ok((mean, mean.exp()))
    })
}

struct ReportWriter {
    file: Option<std::fs::File>,
    records: Vec<TrainRecord>,
}

impl ReportWriter {
    fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(std::fs::File::create(p)?),
            None => None,
        };
        Ok(ReportWriter {
            file,
            records: Vec::new(),
        })
    }

    fn push(&mut self, rec: TrainRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&rec).map_err(|e| TahError::Format(e.to_string()))?
            )?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Stable 64-bit digest of named parameters, for freezing contracts.
pub fn param_hash<T: Scalar>(params: &[(String, Tensor<T>)]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for &x in t.data().iter() {
            x.write_le(&mut bytes);
        }
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn validate_stage1_config(config: &TrainConfig, labels: Option<&LabelSet>) -> Result<()> {
    if config.stage == TrainStage::Decider {
        bail_config!("stage-1 trainer called with stage=decider");
    }
    let needs_labels = matches!(
        config.policy,
        TrainPolicy::Oracle | TrainPolicy::TokenPlusLatent
    );
    if needs_labels && labels.is_none() {
        bail_config!("policy {:?} requires a bound label file", config.policy);
    }
    if config.epochs == 0 {
        bail_config!("epochs must be >= 1");
    }
    Ok(())
}

/// Trains the backbone under a fixed iteration policy. Checkpoints
/// (content-addressed names) go under `ckpt_dir` when given. `resume`
/// restarts from a saved checkpoint with identical subsequent behavior
/// (exact in 64-bit mode).
#[allow(clippy::too_many_arguments)]
pub fn train_backbone<T: Scalar>(
    model_cfg: &ModelConfig,
    corpus: &TokenizedCorpus,
    labels: Option<&LabelSet>,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    ckpt_stem: &str,
    report_path: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(Backbone<T>, TrainOutcome)> {
    validate_stage1_config(config, labels)?;
    model_cfg.validate()?;
    let by_site = labels.map(|l| (l, l.by_site()));
    let labels_ref = by_site.as_ref().map(|(l, m)| (*l, m));

    let train_idx = corpus.indices_of(Split::Train);
    let val_idx = corpus.indices_of(Split::Validation);
    let steps_per_epoch = batches(
        corpus,
        &train_idx,
        config.batch_size,
        config.max_len,
        config.seed,
        0,
    )?
    .len() as u64;
    let total_steps = steps_per_epoch * config.epochs;

    let model: Backbone<T>;
    let mut start_epoch = 0u64;
    let mut skip_steps = 0u64;
    let mut best_val: Option<f64> = None;
    let mut resumed_state = None;
    if let Some(path) = resume {
        let loaded = checkpoint::load_model::<T, _>(path)?;
        if serde_json::to_string(&loaded.meta.model).unwrap()
            != serde_json::to_string(model_cfg).unwrap()
        {
            bail_contract!("resume checkpoint has a different model config");
        }
        let progress = loaded
            .meta
            .progress
            .clone()
            .ok_or_else(|| TahError::MissingArtifact("train progress in checkpoint".into()))?;
        model = loaded.backbone;
        start_epoch = progress.global_step / steps_per_epoch;
        skip_steps = progress.global_step % steps_per_epoch;
        best_val = progress.best_val_ppl;
        let params = model.named_params();
        let state = checkpoint::optimizer_state_from_records(
            &params,
            &loaded.opt_records,
            progress.optimizer_step,
        )?;
        resumed_state = Some(state);
    } else {
        model = Backbone::init(model_cfg.clone(), config.seed)?;
    }

    let named = model.named_params();
    let params: Vec<Tensor<T>> = named.iter().map(|(_, t)| t.clone()).collect();
    let mut opt = AdamW::new(params, config.optimizer, total_steps);
    if let Some(state) = resumed_state {
        opt.import_state(state)?;
    }

    let mut report = ReportWriter::new(report_path)?;
    let mut best_path: Option<PathBuf> = None;
    let token_plus_latent = config.policy == TrainPolicy::TokenPlusLatent;
    let d_max = model.config.max_depth;

    let mut global_step = start_epoch * steps_per_epoch + skip_steps;
    for epoch in start_epoch..config.epochs {
        let epoch_batches = batches(
            corpus,
            &train_idx,
            config.batch_size,
            config.max_len,
            config.seed,
            epoch,
        )?;
        let start_batch = if epoch == start_epoch {
            skip_steps as usize
        } else {
            0
        };
        for batch in epoch_batches.iter().skip(start_batch) {
            let mut terms: Vec<Tensor<T>> = Vec::new();
            let mut count = 0usize;
            let mut tokens_at_depth = vec![0u64; d_max];
            for (slot, &seq_id) in batch.seq_indices.iter().enumerate() {
                // the padding mask marks real tokens; padded tails never
                // reach the forward pass or the loss
                let real = batch.mask[slot].iter().filter(|&&m| m).count();
                let seq = &batch.tokens[slot][..real];
                let inputs = &seq[..seq.len() - 1];
                let targets = &seq[1..];
                let depths =
                    policy_depths(config.policy, d_max, labels_ref, seq_id, inputs.len())?;
                for &d in &depths {
                    tokens_at_depth[d - 1] += 1;
                }
                let mut cache = model.cache();
                let exec = execute_sequence(
                    &model,
                    inputs,
                    &mut IterationRule::FixedDepths(depths.clone()),
                    &mut cache,
                    None,
                )?;
                let (loss, n) = stage1_sequence_loss(&exec, targets, &depths, token_plus_latent)?;
                if let Some(l) = loss {
                    terms.push(l);
                    count += n;
                }
            }
            if terms.is_empty() {
                continue;
            }
            let mut total = terms[0].clone();
            for t in &terms[1..] {
                total = total.add(t)?;
            }
            // mean over supervised positions in the batch
            let loss = total.affine(T::one() / T::from_f64(count as f64), T::zero());
            let loss_val = loss.item().to_f64();
            if !loss_val.is_finite() {
                report.push(TrainRecord {
                    step: global_step + 1,
                    split: "train".into(),
                    loss: loss_val,
                    perplexity: None,
                    tokens_at_depth: Some(tokens_at_depth.clone()),
                    balanced_accuracy: None,
                })?;
                return Err(TahError::Numeric(format!(
                    "divergence: non-finite training loss {loss_val} at step {}",
                    global_step + 1
                )));
            }
            loss.backward()?;
            opt.step()?;
            global_step += 1;
            report.push(TrainRecord {
                step: global_step,
                split: "train".into(),
                loss: loss_val,
                perplexity: Some(loss_val.exp()),
                tokens_at_depth: Some(tokens_at_depth),
                balanced_accuracy: None,
            })?;

            let run_val = (config.eval_every > 0 && global_step.is_multiple_of(config.eval_every))
                || global_step == total_steps
                || (config.eval_every == 0 && global_step.is_multiple_of(steps_per_epoch));
            if run_val && !val_idx.is_empty() {
                let (vloss, vppl) = eval_perplexity(
                    &model,
                    corpus,
                    &val_idx,
                    config.policy,
                    labels_ref,
                    config.max_len,
                )?;
                report.push(TrainRecord {
                    step: global_step,
                    split: "val".into(),
                    loss: vloss,
                    perplexity: Some(vppl),
                    tokens_at_depth: None,
                    balanced_accuracy: None,
                })?;
                // select the checkpoint with the lowest validation perplexity
                if best_val.is_none_or(|b| vppl < b) {
                    best_val = Some(vppl);
                    if let Some(dir) = ckpt_dir {
                        let progress = TrainProgress {
                            epoch,
                            global_step,
                            optimizer_step: opt.step_count(),
                            best_val_ppl: best_val,
                        };
                        let path = save_checkpoint(
                            dir,
                            &format!("{ckpt_stem}-best"),
                            &model,
                            None,
                            Some((&named, &opt)),
                            progress,
                        )?;
                        best_path = Some(path);
                    }
                }
            }
            if config.checkpoint_every > 0 && global_step.is_multiple_of(config.checkpoint_every) {
                if let Some(dir) = ckpt_dir {
                    let progress = TrainProgress {
                        epoch,
                        global_step,
                        optimizer_step: opt.step_count(),
                        best_val_ppl: best_val,
                    };
                    save_checkpoint(
                        dir,
                        &format!("{ckpt_stem}-step{global_step:06}"),
                        &model,
                        None,
                        Some((&named, &opt)),
                        progress,
                    )?;
                }
            }
        }
    }

    let final_path = match ckpt_dir {
        Some(dir) => {
            let progress = TrainProgress {
                epoch: config.epochs.saturating_sub(1),
                global_step,
                optimizer_step: opt.step_count(),
                best_val_ppl: best_val,
            };
            Some(save_checkpoint(
                dir,
                &format!("{ckpt_stem}-final"),
                &model,
                None,
                Some((&named, &opt)),
                progress,
            )?)
        }
        None => None,
    };
    Ok((
        model,
        TrainOutcome {
            records: report.records,
            best_checkpoint: best_path.or_else(|| final_path.clone()),
            best_val_metric: best_val,
            final_checkpoint: final_path,
        },
    ))
}

/// Desk-scale analogue of the frozen reference model: a depth-1 standard
/// transformer trained from scratch with next-token cross-entropy.
pub fn train_reference<T: Scalar>(
    model_cfg: &ModelConfig,
    corpus: &TokenizedCorpus,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<(Backbone<T>, TrainOutcome)> {
    if model_cfg.max_depth != 1 {
        bail_config!("reference model must have max_depth 1");
    }
    let cfg = TrainConfig {
        policy: TrainPolicy::Standard,
        stage: TrainStage::Reference,
        ..config.clone()
    };
    train_backbone(
        model_cfg, corpus, None, &cfg, ckpt_dir, "ref", report_path, None,
    )
}

fn save_checkpoint<T: Scalar>(
    dir: &Path,
    stem: &str,
    model: &Backbone<T>,
    decider: Option<&Decider<T>>,
    optimizer: Option<(&[(String, Tensor<T>)], &AdamW<T>)>,
    progress: TrainProgress,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{stem}.tmp"));
    let opt_state = optimizer.map(|(names, o)| (names, o.export_state()));
    checkpoint::save_model(
        &tmp,
        model,
        decider,
        opt_state.as_ref().map(|(n, s)| (*n, s)),
        Some(progress),
    )?;
    // content-addressed final name keeps run directories append-only
    let bytes = std::fs::read(&tmp)?;
    let digest = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(&bytes);
        hex12(&h.finalize())
    };
    let path = dir.join(format!("{stem}-{digest}.tah"));
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

fn hex12(bytes: &[u8]) -> String {
    bytes[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Extracted stage-2 training example: decider input features plus the
/// oracle continuation label and its class weight.
struct GateExample<T> {
    features: Vec<T>,
    label: bool,
    weight: f64,
}

fn collect_gate_examples<T: Scalar>(
    model: &Backbone<T>,
    corpus: &TokenizedCorpus,
    indices: &[usize],
    labels: &LabelSet,
    by_site: &BTreeMap<(usize, usize), usize>,
    weights: &[f64],
    max_len: usize,
) -> Result<Vec<GateExample<T>>> {
    no_grad(|| {
        let d_max = model.config.max_depth;
        let mut out = Vec::new();
        for &i in indices {
            let seq = &corpus.sequences[i];
            if seq.len() < 2 || seq.len() > max_len {
                continue;
            }
            let inputs = &seq[..seq.len() - 1];
            let depths = policy_depths(
                TrainPolicy::Oracle,
                d_max,
                Some((labels, by_site)),
                i,
                inputs.len(),
            )?;
            let mut cache = model.cache();
            let exec = execute_sequence(
                model,
                inputs,
                &mut IterationRule::FixedDepths(depths.clone()),
                &mut cache,
                None,
            )?;
            for (p, d) in gate_sites(&depths, d_max) {
                let row = exec
                    .row_of(d, p)
                    .ok_or_else(|| TahError::Contract(format!("missing pass row ({p},{d})")))?;
                let pass = &exec.passes[d - 1];
                let h = model.config.hidden_dim;
                let mut features = Vec::with_capacity(3 * h);
                for tap in &pass.tapped {
                    let data = tap.data();
                    features.extend_from_slice(&data[row * h..(row + 1) * h]);
                }
                out.push(GateExample {
                    features,
                    label: d < depths[p],
                    weight: weights[d - 1],
                });
            }
        }
        Ok(out)
    })
}

/// Stage 2: trains the iteration decider to imitate the oracle policy's
/// continuation decisions with the backbone frozen. The backbone parameter
/// hash is checked before and after; any change is a contract violation.
pub fn train_decider<T: Scalar>(
    backbone: &Backbone<T>,
    decider_cfg: &DeciderConfig,
    corpus: &TokenizedCorpus,
    labels: &LabelSet,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<(Decider<T>, TrainOutcome)> {
    if config.stage != TrainStage::Decider {
        bail_config!("train_decider requires stage=decider");
    }
    if decider_cfg.hidden_dim != backbone.config.hidden_dim {
        bail_config!(
            "decider hidden_dim {} != backbone hidden_dim {}",
            decider_cfg.hidden_dim,
            backbone.config.hidden_dim
        );
    }
    if backbone.config.max_depth < 2 {
        bail_config!("decider training requires max_depth >= 2");
    }
    let frozen_hash = param_hash(&backbone.named_params());
    let by_site = labels.by_site();
    let cw = class_weights(labels, config.max_class_weight)?;

    let train_idx = corpus.indices_of(Split::Train);
    let val_idx = corpus.indices_of(Split::Validation);
    let train_set = collect_gate_examples(
        backbone,
        corpus,
        &train_idx,
        labels,
        &by_site,
        &cw.weights,
        config.max_len,
    )?;
    let val_set = collect_gate_examples(
        backbone,
        corpus,
        &val_idx,
        labels,
        &by_site,
        &cw.weights,
        config.max_len,
    )?;
    if train_set.is_empty() {
        return Err(TahError::EmptyCorpus("no gate sites to train on".into()));
    }

    let decider = Decider::<T>::init(decider_cfg.clone(), config.seed ^ 0xdec1de)?;
    let dparams: Vec<Tensor<T>> = decider
        .named_params()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let batch = config.decider_batch.max(1);
    let steps_per_epoch = train_set.len().div_ceil(batch) as u64;
    let mut opt = AdamW::new(dparams, config.optimizer, steps_per_epoch * config.epochs);

    let dim = decider_cfg.input_dim();
    let make_batch = |ids: &[usize]| -> Result<(Tensor<T>, Vec<bool>, Vec<f64>)> {
        let mut data = Vec::with_capacity(ids.len() * dim);
        let mut lbl = Vec::with_capacity(ids.len());
        let mut w = Vec::with_capacity(ids.len());
        for &i in ids {
            data.extend_from_slice(&train_set[i].features);
            lbl.push(train_set[i].label);
            w.push(train_set[i].weight);
        }
        Ok((Tensor::from_vec(&[ids.len(), dim], data, false)?, lbl, w))
    };

    let eval_val = |decider: &Decider<T>| -> Result<(f64, f64)> {
        no_grad(|| {
            if val_set.is_empty() {
                return Ok((f64::NAN, f64::NAN));
            }
            let mut data = Vec::with_capacity(val_set.len() * dim);
            for ex in &val_set {
                data.extend_from_slice(&ex.features);
            }
            let x = Tensor::from_vec(&[val_set.len(), dim], data, false)?;
            let preds = decider.forward(&x)?;
            let lbls: Vec<bool> = val_set.iter().map(|e| e.label).collect();
            let ws: Vec<f64> = val_set.iter().map(|e| e.weight).collect();
            let loss = decider_loss(&preds, &lbls, &ws)?.item().to_f64() / val_set.len() as f64;
            let pv: Vec<f64> = preds.to_vec().into_iter().map(|p| p.to_f64()).collect();
            let acc = decider_accuracy(&pv, &lbls, decider.config.c_threshold)?;
            Ok((loss, acc.balanced))
        })
    };

    let mut report = ReportWriter::new(report_path)?;
    let mut best: Option<f64> = None;
    let mut best_path = None;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        deterministic_shuffle(&mut order, config.seed ^ 0x57a9e2, epoch);
        for ids in order.chunks(batch) {
            let (x, lbl, w) = make_batch(ids)?;
            let preds = decider.forward(&x)?;
            let loss = decider_loss(&preds, &lbl, &w)?
                .affine(T::one() / T::from_f64(ids.len() as f64), T::zero());
            let loss_val = loss.item().to_f64();
            if !loss_val.is_finite() {
                return Err(TahError::Numeric(format!(
                    "divergence: non-finite decider loss at step {step}"
                )));
            }
            loss.backward()?;
            opt.step()?;
            step += 1;
            report.push(TrainRecord {
                step,
                split: "train".into(),
                loss: loss_val,
                perplexity: None,
                tokens_at_depth: None,
                balanced_accuracy: None,
            })?;
        }
        let (vloss, vacc) = eval_val(&decider)?;
        report.push(TrainRecord {
            step,
            split: "val".into(),
            loss: vloss,
            perplexity: None,
            tokens_at_depth: None,
            balanced_accuracy: Some(vacc),
        })?;
        if vloss.is_finite() && best.is_none_or(|b| vloss < b) {
            best = Some(vloss);
            if let Some(dir) = ckpt_dir {
                let progress = TrainProgress {
                    epoch,
                    global_step: step,
                    optimizer_step: opt.step_count(),
                    best_val_ppl: best,
                };
                best_path = Some(save_checkpoint(
                    dir,
                    "decider-best",
                    backbone,
                    Some(&decider),
                    None,
                    progress,
                )?);
            }
        }
    }
    if param_hash(&backbone.named_params()) != frozen_hash {
        bail_contract!("backbone parameters changed during stage-2 training");
    }
    let final_path = match ckpt_dir {
        Some(dir) => Some(save_checkpoint(
            dir,
            "decider-final",
            backbone,
            Some(&decider),
            None,
            TrainProgress {
                epoch: config.epochs.saturating_sub(1),
                global_step: step,
                optimizer_step: step,
                best_val_ppl: best,
            },
        )?),
        None => None,
    };
    Ok((
        decider,
        TrainOutcome {
            records: report.records,
            best_checkpoint: best_path.or_else(|| final_path.clone()),
            best_val_metric: best,
            final_checkpoint: final_path,
        },
    ))
}

fn deterministic_shuffle(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491).wrapping_add(epoch));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

//! Command implementations, generic over the numeric precision.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use serde::{Deserialize, Serialize};

use tah_core::analyze::{
    attention_depth_mass, evaluate_policy, overthink_report, sensitivity_sweep, threshold_sweep,
    token_alternation_stats, EvalOutcome, EvalPolicy,
};
use tah_core::checkpoint;
use tah_core::data::{self, Split, TokenizedCorpus};
use tah_core::error::TahError;
use tah_core::execute::{execute_sequence, IterationRule};
use tah_core::generate::{generate, save_trace, GenPolicy};
use tah_core::model::Backbone;
use tah_core::policy::{
    self, continuation_labels, oracle_depth_binary, oracle_depth_quantile, LabelSet, TokenLabel,
    PRESET_NOISE_GRID,
};
use tah_core::tensor::{no_grad, Scalar};
use tah_core::train::{
    train_backbone, train_decider, train_reference, TrainConfig, TrainPolicy, TrainStage,
};

use crate::config::{Precision, RunConfig};

/// Tracks the artifacts a run directory has produced; stages consult it to
/// resume and to report missing dependencies by name.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Manifest {
            entries: serde_json::from_str(&text)?,
        })
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::write(
            run_dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.entries)?,
        )?;
        Ok(())
    }

    pub fn put(&mut self, key: &str, path: &Path) {
        self.entries
            .insert(key.to_string(), path.to_string_lossy().to_string());
    }

    pub fn get_existing(&self, key: &str) -> Option<PathBuf> {
        self.entries
            .get(key)
            .map(PathBuf::from)
            .filter(|p| p.exists())
    }

    pub fn require(&self, key: &str) -> Result<PathBuf> {
        self.get_existing(key).ok_or_else(|| {
            anyhow!(TahError::MissingArtifact(format!(
                "stage prerequisite `{key}` not found in the run manifest; run the producing stage first"
            )))
        })
    }
}

fn load_manifest_saving<F: FnOnce(&mut Manifest) -> Result<()>>(
    run_dir: &Path,
    f: F,
) -> Result<()> {
    let mut m = Manifest::load(run_dir)?;
    f(&mut m)?;
    m.save(run_dir)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.task.count == 0 {
        bail!(TahError::EmptyCorpus("--count 0 requested".into()));
    }
    let raw = data::generate_task(&cfg.task.spec, cfg.task.count, cfg.seed)?;
    let corpus = TokenizedCorpus::build(&raw, cfg.task.val_fraction, cfg.seed)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    data::save_corpus(out, &corpus, Some(&cfg.task.spec))?;
    println!(
        "wrote {} sequences ({} tokens, vocab {}) to {}",
        corpus.sequences.len(),
        corpus.total_tokens(),
        corpus.vocab.size(),
        out.display()
    );
    Ok(())
}

/// Teacher-forced depth-1 pass of the reference model over the whole corpus,
/// producing oracle labels (binary rule at d_max=2, quantile binning deeper).
pub fn label_corpus<T: Scalar>(
    reference: &Backbone<T>,
    corpus: &TokenizedCorpus,
    d_max: usize,
    max_len: usize,
) -> Result<LabelSet> {
    if d_max < 2 {
        bail!(TahError::Config(
            "labeling requires max_depth >= 2".into()
        ));
    }
    struct Site {
        seq: usize,
        index: usize,
        gold: u32,
        ref_top1: u32,
        ref_ce: f64,
    }
    let sites = no_grad(|| -> Result<Vec<Site>> {
        let mut sites = Vec::new();
        for (si, seq) in corpus.sequences.iter().enumerate() {
            if seq.len() < 2 || seq.len() > max_len {
                continue;
            }
            let inputs = &seq[..seq.len() - 1];
            let targets = &seq[1..];
            let mut cache = reference.cache();
            let exec = execute_sequence(
                reference,
                inputs,
                &mut IterationRule::FixedDepths(vec![1; inputs.len()]),
                &mut cache,
                None,
            )?;
            let logp = exec.passes[0].logits.log_softmax_rows()?;
            let (_, v) = logp.dims2()?;
            let lp = logp.data();
            for p in 0..inputs.len() {
                sites.push(Site {
                    seq: si,
                    index: p,
                    gold: targets[p],
                    ref_top1: exec.top1_depth1[p],
                    ref_ce: -lp[p * v + targets[p] as usize].to_f64(),
                });
            }
        }
        Ok(sites)
    })?;
    if sites.is_empty() {
        bail!(TahError::EmptyCorpus("no labelable tokens".into()));
    }
    let depths: Vec<usize> = if d_max == 2 {
        sites
            .iter()
            .map(|s| oracle_depth_binary(s.ref_top1, s.gold))
            .collect()
    } else {
        let losses: Vec<f64> = sites.iter().map(|s| s.ref_ce).collect();
        oracle_depth_quantile(&losses, d_max)?
    };
    let labels = sites
        .into_iter()
        .zip(depths)
        .map(|(s, depth)| TokenLabel {
            seq: s.seq,
            index: s.index,
            gold: s.gold,
            ref_top1: s.ref_top1,
            ref_ce: s.ref_ce,
            depth,
            continuation: continuation_labels(depth, d_max),
        })
        .collect();
    Ok(LabelSet { d_max, labels })
}

fn corpus_from(path: &Path) -> Result<TokenizedCorpus> {
    let (corpus, _) = data::load_corpus(path)?;
    Ok(corpus)
}

fn parse_eval_policy(name: &str) -> Result<EvalPolicy> {
    match name {
        "standard" => Ok(EvalPolicy::Standard),
        "always_think" => Ok(EvalPolicy::AlwaysThink),
        "tah-oracle" => Ok(EvalPolicy::TahOracle),
        "tah-decider" => Ok(EvalPolicy::TahDecider),
        other => bail!(
            "unknown policy `{other}` (expected standard, always_think, tah-oracle, tah-decider)"
        ),
    }
}

fn parse_train_policy(name: &str) -> Result<TrainPolicy> {
    match name {
        "standard" => Ok(TrainPolicy::Standard),
        "always_think" => Ok(TrainPolicy::AlwaysThink),
        "oracle" => Ok(TrainPolicy::Oracle),
        "token_plus_latent" => Ok(TrainPolicy::TokenPlusLatent),
        other => bail!(
            "unknown training policy `{other}` (expected standard, always_think, oracle, token_plus_latent)"
        ),
    }
}

pub struct RunPaths {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub corpus_dir: PathBuf,
}

pub fn run_paths(root: &Path) -> Result<RunPaths> {
    let paths = RunPaths {
        root: root.to_path_buf(),
        checkpoints: root.join("checkpoints"),
        reports: root.join("reports"),
        corpus_dir: root.join("corpus"),
    };
    std::fs::create_dir_all(&paths.checkpoints)?;
    std::fs::create_dir_all(&paths.reports)?;
    std::fs::create_dir_all(&paths.corpus_dir)?;
    Ok(paths)
}

pub fn dispatch_precision<R>(
    precision: Precision,
    f32_fn: impl FnOnce() -> Result<R>,
    f64_fn: impl FnOnce() -> Result<R>,
) -> Result<R> {
    match precision {
        Precision::F32 => f32_fn(),
        Precision::F64 => f64_fn(),
    }
}

pub fn cmd_train_ref<T: Scalar>(cfg: &RunConfig, corpus_path: &Path, out: &Path) -> Result<()> {
    let corpus = corpus_from(corpus_path)?;
    let paths = run_paths(out)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = corpus.vocab.size();
    model_cfg.max_depth = 1;
    model_cfg.lora_rank = 0;
    let train_cfg = TrainConfig {
        policy: TrainPolicy::Standard,
        stage: TrainStage::Reference,
        ..cfg.train.clone()
    };
    let report = paths.reports.join("train-ref.jsonl");
    let (_, outcome) = train_reference::<T>(
        &model_cfg,
        &corpus,
        &train_cfg,
        Some(&paths.checkpoints),
        Some(&report),
    )?;
    let best = outcome
        .best_checkpoint
        .ok_or_else(|| anyhow!("reference training produced no checkpoint"))?;
    load_manifest_saving(out, |m| {
        m.put("corpus", corpus_path);
        m.put("ref", &best);
        Ok(())
    })?;
    println!(
        "reference trained: best val ppl {:?}, checkpoint {}",
        outcome.best_val_metric,
        best.display()
    );
    Ok(())
}

pub fn cmd_label<T: Scalar>(
    cfg: &RunConfig,
    corpus_path: &Path,
    ref_ckpt: &Path,
    out_file: &Path,
) -> Result<()> {
    let corpus = corpus_from(corpus_path)?;
    let loaded = checkpoint::load_model::<T, _>(ref_ckpt)?;
    let labels = label_corpus(&loaded.backbone, &corpus, cfg.model.max_depth, cfg.train.max_len)?;
    if let Some(parent) = out_file.parent() {
        std::fs::create_dir_all(parent)?;
    }
    policy::save_labels(out_file, &labels)?;
    let hard = labels.labels.iter().filter(|l| l.depth > 1).count();
    println!(
        "labeled {} sites, mean depth {:.3}, {}% beyond depth 1 -> {}",
        labels.labels.len(),
        labels.mean_depth(),
        100.0 * hard as f64 / labels.labels.len() as f64,
        out_file.display()
    );
    Ok(())
}

pub fn cmd_train_backbone<T: Scalar>(
    cfg: &RunConfig,
    corpus_path: &Path,
    labels_path: Option<&Path>,
    policy: &str,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let corpus = corpus_from(corpus_path)?;
    let paths = run_paths(out)?;
    let policy = parse_train_policy(policy)?;
    let labels = match labels_path {
        Some(p) => Some(policy::load_labels(p)?),
        None => None,
    };
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = corpus.vocab.size();
    if policy == TrainPolicy::Standard {
        // the standard baseline is a plain causal model
        model_cfg.max_depth = 1;
        model_cfg.lora_rank = 0;
    }
    let train_cfg = TrainConfig {
        policy,
        stage: TrainStage::Backbone,
        ..cfg.train.clone()
    };
    let stem = match policy {
        TrainPolicy::Standard => "standard",
        TrainPolicy::AlwaysThink => "always-think",
        TrainPolicy::Oracle => "tah",
        TrainPolicy::TokenPlusLatent => "token-plus-latent",
    };
    let report = paths.reports.join(format!("train-{stem}.jsonl"));
    let (_, outcome) = train_backbone::<T>(
        &model_cfg,
        &corpus,
        labels.as_ref(),
        &train_cfg,
        Some(&paths.checkpoints),
        stem,
        Some(&report),
        resume,
    )?;
    let best = outcome
        .best_checkpoint
        .ok_or_else(|| anyhow!("backbone training produced no checkpoint"))?;
    load_manifest_saving(out, |m| {
        m.put(stem, &best);
        Ok(())
    })?;
    println!(
        "{stem} trained: best val ppl {:?}, checkpoint {}",
        outcome.best_val_metric,
        best.display()
    );
    Ok(())
}

pub fn cmd_train_decider<T: Scalar>(
    cfg: &RunConfig,
    corpus_path: &Path,
    labels_path: &Path,
    backbone_ckpt: &Path,
    out: &Path,
) -> Result<()> {
    let corpus = corpus_from(corpus_path)?;
    let labels = policy::load_labels(labels_path)?;
    let loaded = checkpoint::load_model::<T, _>(backbone_ckpt)?;
    let paths = run_paths(out)?;
    let mut dcfg = cfg.decider.clone();
    dcfg.hidden_dim = loaded.backbone.config.hidden_dim;
    let train_cfg = TrainConfig {
        stage: TrainStage::Decider,
        ..cfg.train.clone()
    };
    let report = paths.reports.join("train-decider.jsonl");
    let (_, outcome) = train_decider::<T>(
        &loaded.backbone,
        &dcfg,
        &corpus,
        &labels,
        &train_cfg,
        Some(&paths.checkpoints),
        Some(&report),
    )?;
    let best = outcome
        .best_checkpoint
        .ok_or_else(|| anyhow!("decider training produced no checkpoint"))?;
    load_manifest_saving(out, |m| {
        m.put("decider", &best);
        Ok(())
    })?;
    let acc = outcome
        .records
        .iter()
        .rev()
        .find_map(|r| r.balanced_accuracy);
    println!(
        "decider trained: held-out balanced accuracy {:?}, checkpoint {}",
        acc,
        best.display()
    );
    Ok(())
}

pub fn cmd_generate<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    prompt: &str,
    policy_name: &str,
    max_new: usize,
    corpus_path: &Path,
    trace_out: Option<&Path>,
    ref_ckpt: Option<&Path>,
) -> Result<()> {
    let corpus = corpus_from(corpus_path)?;
    let loaded = checkpoint::load_model::<T, _>(ckpt)?;
    let prompt_ids = corpus.vocab.tokenize(prompt)?;
    let reference = match ref_ckpt {
        Some(p) => Some(checkpoint::load_model::<T, _>(p)?),
        None => None,
    };
    let mut decider = loaded.decider.clone();
    if let Some(d) = decider.as_mut() {
        d.config.c_threshold = cfg.decider.c_threshold;
    }
    let policy = match policy_name {
        "standard" => GenPolicy::Standard,
        "always_think" => GenPolicy::AlwaysThink,
        "tah-decider" => GenPolicy::Decider(
            decider
                .as_ref()
                .ok_or_else(|| anyhow!(TahError::MissingArtifact(
                    "checkpoint has no decider; train stage 2 first".to_string()
                )))?,
        ),
        "tah-oracle" => GenPolicy::Oracle(
            reference
                .as_ref()
                .map(|l| &l.backbone)
                .ok_or_else(|| anyhow!(TahError::MissingArtifact(
                    "tah-oracle generation needs --ref-checkpoint".to_string()
                )))?,
        ),
        other => bail!("unknown policy `{other}`"),
    };
    let trace = generate(
        &prompt_ids,
        &loaded.backbone,
        &policy,
        cfg.sampler.rule,
        max_new,
        cfg.seed,
    )?;
    let text = corpus.vocab.detokenize(&trace.tokens())?;
    println!("{prompt}{text}");
    println!(
        "# mean iterations {:.3}, total flops {}",
        trace.mean_iterations(),
        trace.total_flops
    );
    if let Some(out) = trace_out {
        save_trace(out, &trace)?;
        println!("# trace written to {}", out.display());
    }
    Ok(())
}

fn print_eval(outcome: &EvalOutcome) {
    println!(
        "policy {:?}: accuracy {:.4} (depth-1 {:.4}), mean iterations {:.3}, continue fraction {:.4}, flops/token {:.0}",
        outcome.policy,
        outcome.accuracy,
        outcome.depth1_accuracy,
        outcome.mean_iterations,
        outcome.continue_fraction,
        outcome.flops_per_token
    );
    let t = outcome.transitions;
    println!(
        "  transitions: kept-correct {}, wrong->right {}, right->wrong {}, kept-wrong {}",
        t.kept_correct, t.wrong_to_right, t.right_to_wrong, t.kept_wrong
    );
    if let Some(ca) = outcome.computation_accuracy {
        println!("  computation-token accuracy {ca:.4}");
    }
}

pub fn cmd_eval<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    corpus_path: &Path,
    policy_name: &str,
    report_out: Option<&Path>,
) -> Result<()> {
    let corpus = corpus_from(corpus_path)?;
    let loaded = checkpoint::load_model::<T, _>(ckpt)?;
    let policy = parse_eval_policy(policy_name)?;
    let mut decider = loaded.decider.clone();
    if let Some(d) = decider.as_mut() {
        d.config.c_threshold = cfg.decider.c_threshold;
    }
    let val = corpus.indices_of(Split::Validation);
    let indices = if val.is_empty() {
        corpus.indices_of(Split::Train)
    } else {
        val
    };
    let outcome = evaluate_policy(
        &loaded.backbone,
        decider.as_ref(),
        &corpus,
        &indices,
        policy,
        None,
        cfg.train.max_len,
    )?;
    print_eval(&outcome);
    if let Some(out) = report_out {
        std::fs::write(out, serde_json::to_string_pretty(&outcome)?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    overthink: Vec<EvalOutcome>,
    threshold_sweep: Vec<tah_core::analyze::ThresholdPoint>,
    alternation: BTreeMap<String, tah_core::analyze::TypeStats>,
    attention_depth1_mass: Vec<(f64, f64)>,
    sensitivity: Option<tah_core::analyze::SensitivityReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    corpus_path: &Path,
    sweep: Option<(f64, f64)>,
    run_sensitivity: bool,
    out: Option<&Path>,
) -> Result<()> {
    let corpus = corpus_from(corpus_path)?;
    let loaded = checkpoint::load_model::<T, _>(ckpt)?;
    let model = &loaded.backbone;
    let mut decider = loaded.decider.clone();
    if let Some(d) = decider.as_mut() {
        d.config.c_threshold = cfg.decider.c_threshold;
    }
    let val = corpus.indices_of(Split::Validation);
    let indices = if val.is_empty() {
        corpus.indices_of(Split::Train)
    } else {
        val
    };
    let max_len = cfg.train.max_len;

    println!("== latent overthinking report ==");
    let overthink = overthink_report(model, decider.as_ref(), &corpus, &indices, max_len)?;
    for o in &overthink {
        print_eval(o);
    }

    let mut sweep_points = Vec::new();
    if let (Some(d), Some((lo, hi))) = (decider.as_ref(), sweep) {
        println!("== continuation threshold sweep ==");
        let mut ts = Vec::new();
        let steps = 8;
        for i in 0..=steps {
            ts.push(lo + (hi - lo) * i as f64 / steps as f64);
        }
        sweep_points = threshold_sweep(model, d, &corpus, &indices, &ts, max_len)?;
        println!("threshold\tcontinue_fraction\taccuracy");
        for p in &sweep_points {
            println!(
                "{:.4}\t{:.4}\t{:.4}",
                p.threshold, p.continue_fraction, p.accuracy
            );
        }
    }

    println!("== token alternation (oracle policy) ==");
    let stats = if model.config.max_depth >= 2 {
        token_alternation_stats(
            model,
            decider.as_ref(),
            &corpus,
            &indices,
            EvalPolicy::TahOracle,
            max_len,
        )?
    } else {
        BTreeMap::new()
    };
    let mut named_stats = BTreeMap::new();
    let mut rows: Vec<_> = stats.iter().collect();
    rows.sort_by(|a, b| {
        b.1.continue_rate
            .partial_cmp(&a.1.continue_rate)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for (tok, st) in rows.iter().take(8) {
        let ch = corpus
            .vocab
            .char_of(**tok)
            .map(|c| c.to_string())
            .unwrap_or_else(|| format!("#{tok}"));
        println!(
            "type {ch:?}: continue rate {:.3} over {} occurrences",
            st.continue_rate, st.occurrences
        );
    }
    for (tok, st) in &stats {
        let ch = corpus
            .vocab
            .char_of(*tok)
            .map(|c| c.to_string())
            .unwrap_or_else(|| format!("#{tok}"));
        named_stats.insert(ch, st.clone());
    }

    let mass = if model.config.max_depth >= 2 {
        println!("== attention mass on depth-1 keys (depth-2 queries) ==");
        let acc = attention_depth_mass(model, &corpus, &indices[..indices.len().min(8)], max_len)?;
        let stats = acc.layer_stats();
        for (li, (mean, sd)) in stats.iter().enumerate() {
            println!("layer {li}: mean {mean:.3} sd {sd:.3}");
        }
        stats
    } else {
        Vec::new()
    };

    let sensitivity = if run_sensitivity && model.config.max_depth >= 2 {
        println!("== oracle sensitivity sweep (preset noise grid) ==");
        let rep = sensitivity_sweep(
            model,
            &corpus,
            &indices,
            &PRESET_NOISE_GRID,
            &cfg.eval.sensitivity_seeds,
            max_len,
        )?;
        println!(
            "clean accuracy {:.4}; fit: acc = {:.3}*underthink + {:.3}*overthink + {:.3} (max residual {:.4})",
            rep.clean_accuracy,
            rep.fit.underthink_coeff,
            rep.fit.overthink_coeff,
            rep.fit.intercept,
            rep.fit.max_residual
        );
        Some(rep)
    } else {
        None
    };

    if let Some(path) = out {
        let report = AnalyzeReport {
            overthink,
            threshold_sweep: sweep_points,
            alternation: named_stats,
            attention_depth1_mass: mass,
            sensitivity,
        };
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("# analysis written to {}", path.display());
    }
    Ok(())
}

/// Full pipeline: gen-data -> train-ref -> label -> train-backbone ->
/// train-decider -> eval -> analyze. Stages already present in the manifest
/// are skipped, so interrupted runs resume.
pub fn cmd_pipeline<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let paths = run_paths(out)?;
    cfg.echo(&paths.root.join("config.toml"))?;
    let mut manifest = Manifest::load(out)?;

    let corpus_path = match manifest.get_existing("corpus") {
        Some(p) => {
            println!("[pipeline] corpus present, skipping gen-data");
            p
        }
        None => {
            let p = paths.corpus_dir.join("corpus.txt");
            cmd_gen_data(cfg, &p)?;
            manifest.put("corpus", &p);
            manifest.save(out)?;
            p
        }
    };

    if manifest.get_existing("ref").is_none() {
        println!("[pipeline] training reference (standard, depth 1)");
        cmd_train_ref::<T>(cfg, &corpus_path, out)?;
        manifest = Manifest::load(out)?;
    } else {
        println!("[pipeline] reference present, skipping");
    }

    let labels_path = match manifest.get_existing("labels") {
        Some(p) => {
            println!("[pipeline] labels present, skipping");
            p
        }
        None => {
            let ref_ckpt = manifest.require("ref")?;
            let p = paths.corpus_dir.join("labels.jsonl");
            cmd_label::<T>(cfg, &corpus_path, &ref_ckpt, &p)?;
            manifest.put("labels", &p);
            manifest.save(out)?;
            p
        }
    };

    for (key, policy) in [("always-think", "always_think"), ("tah", "oracle")] {
        if manifest.get_existing(key).is_none() {
            println!("[pipeline] training backbone: {policy}");
            let lp = if policy == "oracle" {
                Some(labels_path.as_path())
            } else {
                None
            };
            cmd_train_backbone::<T>(cfg, &corpus_path, lp, policy, out, None)?;
            manifest = Manifest::load(out)?;
        } else {
            println!("[pipeline] {key} present, skipping");
        }
    }

    if manifest.get_existing("decider").is_none() {
        println!("[pipeline] training decider (stage 2)");
        let backbone = manifest.require("tah")?;
        cmd_train_decider::<T>(cfg, &corpus_path, &labels_path, &backbone, out)?;
        manifest = Manifest::load(out)?;
    } else {
        println!("[pipeline] decider present, skipping");
    }

    println!("[pipeline] evaluating policies");
    let ref_ckpt = manifest.require("ref")?;
    let decider_ckpt = manifest.require("decider")?;
    let eval_report = paths.reports.join("eval.json");
    let mut results: BTreeMap<String, EvalOutcome> = BTreeMap::new();
    {
        let corpus = corpus_from(&corpus_path)?;
        let val = corpus.indices_of(Split::Validation);
        let indices = if val.is_empty() {
            corpus.indices_of(Split::Train)
        } else {
            val
        };
        let standard = checkpoint::load_model::<T, _>(&ref_ckpt)?;
        let o = evaluate_policy(
            &standard.backbone,
            None,
            &corpus,
            &indices,
            EvalPolicy::Standard,
            None,
            cfg.train.max_len,
        )?;
        print_eval(&o);
        results.insert("standard".into(), o);

        let tah = checkpoint::load_model::<T, _>(&decider_ckpt)?;
        let mut decider = tah.decider.clone();
        if let Some(d) = decider.as_mut() {
            d.config.c_threshold = cfg.decider.c_threshold;
        }
        for (name, policy) in [
            ("always_think", EvalPolicy::AlwaysThink),
            ("tah-oracle", EvalPolicy::TahOracle),
            ("tah-decider", EvalPolicy::TahDecider),
        ] {
            let o = evaluate_policy(
                &tah.backbone,
                decider.as_ref(),
                &corpus,
                &indices,
                policy,
                None,
                cfg.train.max_len,
            )?;
            print_eval(&o);
            results.insert(name.into(), o);
        }
        // the always-think model evaluated under its own policy
        if let Some(at) = manifest.get_existing("always-think") {
            let at_model = checkpoint::load_model::<T, _>(&at)?;
            let o = evaluate_policy(
                &at_model.backbone,
                None,
                &corpus,
                &indices,
                EvalPolicy::AlwaysThink,
                None,
                cfg.train.max_len,
            )?;
            print_eval(&o);
            results.insert("always_think_model".into(), o);
        }
    }
    std::fs::write(&eval_report, serde_json::to_string_pretty(&results)?)?;
    manifest.put("eval", &eval_report);
    manifest.save(out)?;

    println!("[pipeline] analysis");
    let analyze_out = paths.reports.join("analyze.json");
    cmd_analyze::<T>(
        cfg,
        &decider_ckpt,
        &corpus_path,
        Some((0.5, 0.99)),
        true,
        Some(&analyze_out),
    )?;
    load_manifest_saving(out, |m| {
        m.put("analyze", &analyze_out);
        Ok(())
    })?;
    println!("[pipeline] complete: {}", out.display());
    Ok(())
}

//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one pass/fail line (visible with `cargo test --test acceptance --
//! --nocapture`). The heavier criteria share trained toy-model fixtures
//! (mod-chain task, three seeds).

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use common::{reference_forward, reference_logits, RefWeights};
use tah_core::analyze::{
    evaluate_policy, linear_fit, sensitivity_sweep, threshold_sweep, EvalPolicy,
};
use tah_core::attention::{accessible, build_mask, AttnCoord};
use tah_core::data::{generate_task, Split, TaskSpec, TokenizedCorpus};
use tah_core::decider::{Decider, DeciderConfig};
use tah_core::execute::{execute_sequence, IterationRule};
use tah_core::generate::{flops_count, generate, FlopsModel, GenPolicy};
use tah_core::model::{Backbone, ModelConfig, SampleRule};
use tah_core::policy::{
    continuation_labels, oracle_depth_binary, oracle_depth_quantile, LabelSet, TokenLabel,
    PRESET_NOISE_GRID,
};
use tah_core::tensor::{no_grad, OptimizerHyper, Tensor};
use tah_core::train::{
    param_hash, stage1_sequence_loss, train_backbone, train_decider, train_reference,
    TrainConfig, TrainPolicy, TrainStage,
};

// ---------------------------------------------------------------------
// shared toy fixture: reference / always-think / TaH-oracle / decider per
// seed, on the mod-chain task
// ---------------------------------------------------------------------

const FIXTURE_SEEDS: [u64; 3] = [7, 8, 9];

/// Trained-model fixtures are built once and parked on disk; the graph
/// tensors themselves are single-owner (`Rc`) and cannot cross test threads,
/// so each criterion reloads what it needs from the checkpoints.
struct FixturePaths {
    _dir: tempfile::TempDir,
    seeds: Vec<SeedPaths>,
}

struct SeedPaths {
    seed: u64,
    corpus: std::path::PathBuf,
    labels: std::path::PathBuf,
    reference: std::path::PathBuf,
    always_think: std::path::PathBuf,
    tah: std::path::PathBuf,
    decider_val_balanced: f64,
}

struct SeedFixture {
    seed: u64,
    corpus: TokenizedCorpus,
    #[allow(dead_code)]
    reference: Backbone<f32>,
    always_think: Backbone<f32>,
    tah: Backbone<f32>,
    decider: Decider<f32>,
    decider_val_balanced: f64,
    #[allow(dead_code)]
    labels: LabelSet,
}

fn toy_model_config(vocab: usize, max_depth: usize, lora_rank: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden_dim: 64,
        num_layers: 3,
        num_heads: 4,
        head_dim: 16,
        mlp_dim: 128,
        max_depth,
        lora_rank,
        lwe_top_k: 8,
        tie_embeddings: true,
        max_position: 256,
        ..Default::default()
    }
}

fn toy_train_config(seed: u64, policy: TrainPolicy) -> TrainConfig {
    TrainConfig {
        policy,
        stage: TrainStage::Backbone,
        optimizer: OptimizerHyper {
            lr: 1e-3,
            ..Default::default()
        },
        epochs: 3,
        batch_size: 16,
        max_len: 128,
        seed,
        val_fraction: 0.1,
        decider_batch: 256,
        ..Default::default()
    }
}

/// Oracle labels from a frozen reference model (binary rule at d_max=2).
fn label_with_reference(
    reference: &Backbone<f32>,
    corpus: &TokenizedCorpus,
    d_max: usize,
) -> LabelSet {
    let mut labels = Vec::new();
    no_grad(|| {
        for (si, seq) in corpus.sequences.iter().enumerate() {
            if seq.len() < 2 {
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
            )
            .unwrap();
            let logp = exec.passes[0].logits.log_softmax_rows().unwrap();
            let (_, v) = logp.dims2().unwrap();
            let lp = logp.to_vec();
            for p in 0..inputs.len() {
                let depth = oracle_depth_binary(exec.top1_depth1[p], targets[p]);
                labels.push(TokenLabel {
                    seq: si,
                    index: p,
                    gold: targets[p],
                    ref_top1: exec.top1_depth1[p],
                    ref_ce: -(lp[p * v + targets[p] as usize] as f64),
                    depth,
                    continuation: continuation_labels(depth, d_max),
                });
            }
        }
    });
    LabelSet { d_max, labels }
}

fn build_seed_fixture(seed: u64, dir: &std::path::Path) -> SeedPaths {
    let spec = TaskSpec {
        chain_len: 3,
        items_per_seq: 3,
        pad: 8,
        ..TaskSpec::default()
    };
    let raw = generate_task(&spec, 1200, seed).unwrap();
    let corpus = TokenizedCorpus::build(&raw, 0.1, seed).unwrap();
    let vocab = corpus.vocab.size();
    let corpus_path = dir.join(format!("corpus-{seed}.txt"));
    tah_core::data::save_corpus(&corpus_path, &corpus, Some(&spec)).unwrap();

    let (reference, _) = train_reference::<f32>(
        &toy_model_config(vocab, 1, 0),
        &corpus,
        &toy_train_config(seed, TrainPolicy::Standard),
        None,
        None,
    )
    .unwrap();
    let labels = label_with_reference(&reference, &corpus, 2);
    let labels_path = dir.join(format!("labels-{seed}.jsonl"));
    tah_core::policy::save_labels(&labels_path, &labels).unwrap();
    let ref_path = dir.join(format!("ref-{seed}.tah"));
    tah_core::checkpoint::save_model(&ref_path, &reference, None, None, None).unwrap();

    let (always_think, _) = train_backbone::<f32>(
        &toy_model_config(vocab, 2, 8),
        &corpus,
        None,
        &toy_train_config(seed, TrainPolicy::AlwaysThink),
        None,
        "at",
        None,
        None,
    )
    .unwrap();
    let at_path = dir.join(format!("at-{seed}.tah"));
    tah_core::checkpoint::save_model(&at_path, &always_think, None, None, None).unwrap();

    let (tah, _) = train_backbone::<f32>(
        &toy_model_config(vocab, 2, 8),
        &corpus,
        Some(&labels),
        &toy_train_config(seed, TrainPolicy::Oracle),
        None,
        "tah",
        None,
        None,
    )
    .unwrap();

    let decider_cfg = DeciderConfig {
        hidden_dim: 64,
        mlp_dims: vec![64, 64],
        c_threshold: 0.9,
    };
    let (decider, outcome) = train_decider(
        &tah,
        &decider_cfg,
        &corpus,
        &labels,
        &TrainConfig {
            stage: TrainStage::Decider,
            ..toy_train_config(seed, TrainPolicy::Oracle)
        },
        None,
        None,
    )
    .unwrap();
    let decider_val_balanced = outcome
        .records
        .iter()
        .rev()
        .find_map(|r| r.balanced_accuracy)
        .unwrap_or(f64::NAN);
    let tah_path = dir.join(format!("tah-{seed}.tah"));
    tah_core::checkpoint::save_model(&tah_path, &tah, Some(&decider), None, None).unwrap();

    SeedPaths {
        seed,
        corpus: corpus_path,
        labels: labels_path,
        reference: ref_path,
        always_think: at_path,
        tah: tah_path,
        decider_val_balanced,
    }
}

fn fixture_paths() -> &'static FixturePaths {
    static FIXTURES: OnceLock<FixturePaths> = OnceLock::new();
    FIXTURES.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let seeds = FIXTURE_SEEDS
            .iter()
            .map(|&s| build_seed_fixture(s, dir.path()))
            .collect();
        FixturePaths { _dir: dir, seeds }
    })
}

fn load_fixture(paths: &SeedPaths) -> SeedFixture {
    let (corpus, _) = tah_core::data::load_corpus(&paths.corpus).unwrap();
    let labels = tah_core::policy::load_labels(&paths.labels).unwrap();
    let reference = tah_core::checkpoint::load_model::<f32, _>(&paths.reference)
        .unwrap()
        .backbone;
    let always_think = tah_core::checkpoint::load_model::<f32, _>(&paths.always_think)
        .unwrap()
        .backbone;
    let loaded = tah_core::checkpoint::load_model::<f32, _>(&paths.tah).unwrap();
    SeedFixture {
        seed: paths.seed,
        corpus,
        reference,
        always_think,
        tah: loaded.backbone,
        decider: loaded.decider.expect("decider saved with the backbone"),
        decider_val_balanced: paths.decider_val_balanced,
        labels,
    }
}

fn fixtures() -> Vec<SeedFixture> {
    fixture_paths().seeds.iter().map(load_fixture).collect()
}

fn val_indices(corpus: &TokenizedCorpus) -> Vec<usize> {
    corpus.indices_of(Split::Validation)
}

// ---------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------

#[test]
fn causal_reduction() {
    let started = Instant::now();
    let tokens: Vec<u32> = (0..24).map(|i| (i * 5 + 3) % 17).collect();
    let depths = vec![1usize; tokens.len()];

    // 64-bit: max abs logit diff <= 1e-6
    let cfg = ModelConfig {
        vocab_size: 17,
        hidden_dim: 32,
        num_layers: 3,
        num_heads: 2,
        head_dim: 16,
        mlp_dim: 64,
        max_depth: 1,
        lora_rank: 0,
        lwe_top_k: 4,
        max_position: 64,
        ..Default::default()
    };
    let worst64 = {
        let model: Backbone<f64> = Backbone::init(cfg.clone(), 42).unwrap();
        let weights = RefWeights::from_backbone(&model);
        let want = reference_forward(&cfg, &weights, &tokens, &depths);
        no_grad(|| {
            let mut cache = model.cache();
            let exec = execute_sequence(
                &model,
                &tokens,
                &mut IterationRule::FixedDepths(depths.clone()),
                &mut cache,
                None,
            )
            .unwrap();
            let logits = exec.passes[0].logits.to_vec();
            let v = cfg.vocab_size;
            let mut worst: f64 = 0.0;
            for (p, per_depth) in want.iter().enumerate() {
                let rl = reference_logits(&cfg, &weights, &per_depth[0]);
                for (j, &r) in rl.iter().enumerate() {
                    worst = worst.max((logits[p * v + j] - r).abs());
                }
            }
            worst
        })
    };
    assert!(worst64 <= 1e-6, "64-bit causal reduction diff {worst64}");

    // 32-bit: max abs logit diff <= 1e-4
    let worst32 = {
        let model: Backbone<f32> = Backbone::init(cfg.clone(), 42).unwrap();
        let weights = RefWeights::from_backbone(&model);
        let want = reference_forward(&cfg, &weights, &tokens, &depths);
        no_grad(|| {
            let mut cache = model.cache();
            let exec = execute_sequence(
                &model,
                &tokens,
                &mut IterationRule::FixedDepths(depths.clone()),
                &mut cache,
                None,
            )
            .unwrap();
            let logits = exec.passes[0].logits.to_vec();
            let v = cfg.vocab_size;
            let mut worst: f64 = 0.0;
            for (p, per_depth) in want.iter().enumerate() {
                let rl = reference_logits(&cfg, &weights, &per_depth[0]);
                for (j, &r) in rl.iter().enumerate() {
                    worst = worst.max((logits[p * v + j] as f64 - r as f64).abs());
                }
            }
            worst
        })
    };
    assert!(worst32 <= 1e-4, "32-bit causal reduction diff {worst32}");
    let dt = started.elapsed();
    assert!(dt.as_secs() < 10, "causal reduction took {dt:?}");
    println!(
        "[PASS] causal reduction: 64-bit diff {worst64:.2e} <= 1e-6, 32-bit diff {worst32:.2e} <= 1e-4 ({dt:?})"
    );
}

#[test]
fn prefill_decode_equivalence() {
    use rand::{Rng, SeedableRng};
    let started = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 20,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        head_dim: 8,
        mlp_dim: 32,
        max_depth: 3,
        lora_rank: 2,
        lwe_top_k: 4,
        max_position: 64,
        ..Default::default()
    };
    let model: Backbone<f32> = Backbone::init(cfg.clone(), 5).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut worst_rel: f64 = 0.0;
    no_grad(|| {
        for _trace in 0..50 {
            let len = rng.gen_range(3..=12);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..20)).collect();
            let depths: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=3)).collect();
            let mut cache = model.cache();
            let exec = execute_sequence(
                &model,
                &tokens,
                &mut IterationRule::FixedDepths(depths.clone()),
                &mut cache,
                None,
            )
            .unwrap();
            let mut session = tah_core::generate::DecodeSession::new(&model);
            for (p, &t) in tokens.iter().enumerate() {
                let want = depths[p];
                let out = session.step(t, &mut |pass| pass.depth < want).unwrap();
                for depth in 1..=want {
                    let row = exec.row_of(depth, p).unwrap();
                    let a = exec.passes[depth - 1].hidden.to_vec();
                    let b = out.hiddens[depth - 1].to_vec();
                    for i in 0..cfg.hidden_dim {
                        let x = a[row * cfg.hidden_dim + i] as f64;
                        let y = b[i] as f64;
                        let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
                        worst_rel = worst_rel.max(rel);
                    }
                }
            }
        }
    });
    assert!(worst_rel <= 1e-4, "prefill/decode rel err {worst_rel}");
    let dt = started.elapsed();
    assert!(dt.as_secs() < 60, "prefill/decode took {dt:?}");
    println!(
        "[PASS] prefill/decode equivalence: worst rel err {worst_rel:.2e} <= 1e-4 over 50 traces ({dt:?})"
    );
}

#[test]
fn mask_oracle_exhaustive() {
    let started = Instant::now();
    let mut traces = 0u64;
    let mut cells = 0u64;
    for n in 1..=6usize {
        // every per-token depth assignment in {1,2,3}^n
        let mut pattern = vec![1usize; n];
        loop {
            // materialized entries in depth-major order
            let mut index = Vec::new();
            for d in 1..=3 {
                for (p, &dp) in pattern.iter().enumerate() {
                    if dp >= d {
                        index.push(AttnCoord::new(p, d));
                    }
                }
            }
            // queries: every computed state
            let queries = index.clone();
            let mask: Tensor<f64> = build_mask(&queries, &index);
            let m = mask.to_vec();
            let nk = index.len();
            for (qi, &q) in queries.iter().enumerate() {
                for (ki, &k) in index.iter().enumerate() {
                    // brute force: enumerate all (j, depth) pairs and apply
                    // the accessible-set rule with existence
                    let want = accessible(q, k, true);
                    let got = m[qi * nk + ki] == 0.0;
                    assert_eq!(
                        got, want,
                        "trace {pattern:?}: query {q:?} key {k:?} mismatch"
                    );
                    cells += 1;
                }
            }
            traces += 1;
            // next pattern
            let mut i = 0;
            loop {
                if i == n {
                    break;
                }
                pattern[i] += 1;
                if pattern[i] <= 3 {
                    break;
                }
                pattern[i] = 1;
                i += 1;
            }
            if i == n {
                break;
            }
        }
    }
    let dt = started.elapsed();
    assert_eq!(traces, 3 + 9 + 27 + 81 + 243 + 729);
    assert!(dt.as_secs() < 60, "mask oracle took {dt:?}");
    println!(
        "[PASS] mask oracle: {traces} traces / {cells} cells match brute-force enumeration exactly ({dt:?})"
    );
}

#[test]
fn gradient_audit() {
    let started = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 10,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        mlp_dim: 12,
        max_depth: 2,
        lora_rank: 2,
        lwe_top_k: 3,
        max_position: 32,
        ..Default::default()
    };
    let model: Backbone<f64> = Backbone::init(cfg, 31).unwrap();
    // audit at a generic point with healthy curvature: overwrite every
    // parameter (including the zero-initialized delta factors) with
    // uniform draws so all paths carry measurable signal
    {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for (_, t) in model.named_params() {
            let mut d = t.data_mut();
            for x in d.iter_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let seq: Vec<u32> = vec![1, 7, 3, 9, 2, 5];
    let depths = vec![1usize, 2, 1, 2, 1];
    let forward = || -> Tensor<f64> {
        let inputs = &seq[..seq.len() - 1];
        let targets = &seq[1..];
        let mut cache = model.cache();
        let exec = execute_sequence(
            &model,
            inputs,
            &mut IterationRule::FixedDepths(depths.clone()),
            &mut cache,
            None,
        )
        .unwrap();
        let (loss, n) = stage1_sequence_loss(&exec, targets, &depths, false).unwrap();
        loss.unwrap().affine(1.0 / n as f64, 0.0)
    };
    let named = model.named_params();
    let params: Vec<Tensor<f64>> = named.iter().map(|(_, t)| t.clone()).collect();
    let loss = forward();
    loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    // the depth-2 tokens above exercise every targeted low-rank delta
    let lora_grads_nonzero = named
        .iter()
        .zip(&analytic)
        .filter(|((name, _), _)| name.starts_with("lora."))
        .any(|(_, g)| g.iter().any(|&x| x != 0.0));
    assert!(lora_grads_nonzero, "audit must exercise the adapter path");

    let numeric = tah_core::gradcheck::central_diff(&params, 1e-5, || forward().item());
    // per-parameter gradients compared in the norm sense: individual
    // components below ~1e-6 sit at the floor of what central differences
    // at h=1e-5 can resolve (about 1e-11 absolute), so the per-component
    // check is bounded absolutely instead
    let err = tah_core::gradcheck::max_norm_rel_error(&analytic, &numeric, 1e-8);
    assert!(err < 1e-5, "gradient audit max rel error {err}");
    let abs = tah_core::gradcheck::max_abs_error(&analytic, &numeric);
    assert!(abs < 1e-9, "gradient audit max abs error {abs}");
    let elem = tah_core::gradcheck::max_rel_error(&analytic, &numeric, 1e-5);
    assert!(elem < 1e-5, "per-element rel error above the noise floor {elem}");
    let dt = started.elapsed();
    assert!(dt.as_secs() < 120, "gradient audit took {dt:?}");
    println!(
        "[PASS] gradient audit: per-parameter rel error {err:.2e} < 1e-5, abs error {abs:.2e}, {} scalars incl. adapters ({dt:?})",
        analytic.iter().map(|g| g.len()).sum::<usize>()
    );
}

#[test]
fn delta_gating() {
    let cfg = ModelConfig {
        vocab_size: 12,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        head_dim: 8,
        mlp_dim: 32,
        max_depth: 2,
        lora_rank: 4,
        lwe_top_k: 4,
        max_position: 64,
        ..Default::default()
    };
    let model: Backbone<f32> = Backbone::init(cfg, 3).unwrap();
    let seq: Vec<u32> = vec![1, 5, 9, 2, 7, 4];
    let run = |depths: Vec<usize>| {
        for (_, t) in model.named_params() {
            t.zero_grad();
        }
        let inputs = &seq[..seq.len() - 1];
        let targets = &seq[1..];
        let mut cache = model.cache();
        let exec = execute_sequence(
            &model,
            inputs,
            &mut IterationRule::FixedDepths(depths.clone()),
            &mut cache,
            None,
        )
        .unwrap();
        let (loss, _) = stage1_sequence_loss(&exec, targets, &depths, false).unwrap();
        loss.unwrap().backward().unwrap();
        model
            .lora_params()
            .iter()
            .map(|(_, t)| {
                t.grad()
                    .map(|g| g.iter().map(|x| x.abs() as f64).sum::<f64>())
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
    };
    let easy = run(vec![1; 5]);
    assert_eq!(easy, 0.0, "all-easy batch must leave deltas exactly zero");
    let hard = run(vec![1, 1, 2, 1, 1]);
    assert!(hard > 0.0, "a hard token must produce nonzero delta gradients");
    println!(
        "[PASS] delta gating: all-easy grad sum = 0 exactly; one hard token grad sum {hard:.3e} > 0"
    );
}

#[test]
fn oracle_label_equivalence() {
    use rand::{Rng, SeedableRng};
    let started = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12345);
    let n = 10_000;
    // binary rule vs direct counting
    let refs: Vec<u32> = (0..n).map(|_| rng.gen_range(0..50)).collect();
    let golds: Vec<u32> = (0..n).map(|_| rng.gen_range(0..50)).collect();
    for (&r, &g) in refs.iter().zip(&golds) {
        let want = if r == g { 1 } else { 2 };
        assert_eq!(oracle_depth_binary(r, g), want);
    }
    // quantile rule vs O(n^2)-style brute force (with heavy ties)
    let losses: Vec<f64> = (0..n)
        .map(|_| (rng.gen_range(0.0..8.0f64) * 8.0).round() / 8.0)
        .collect();
    let d_max = 4;
    let got = oracle_depth_quantile(&losses, d_max).unwrap();
    let mut sorted = losses.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let want: Vec<usize> = losses
        .iter()
        .map(|&l| {
            let cnt = sorted.partition_point(|&x| x <= l) as f64;
            (((cnt / n as f64) * d_max as f64).floor() as usize).clamp(1, d_max)
        })
        .collect();
    assert_eq!(got, want, "quantile labeler deviates from sort-based oracle");
    let dt = started.elapsed();
    assert!(dt.as_secs() < 10, "label equivalence took {dt:?}");
    println!(
        "[PASS] oracle-label equivalence: binary and quantile labelers match brute force on {n} tokens ({dt:?})"
    );
}

#[test]
fn toy_overthinking_reproduction() {
    let started = Instant::now();
    let mut b_wins = 0;
    for fx in fixtures() {
        let val = val_indices(&fx.corpus);
        let at = evaluate_policy(
            &fx.always_think,
            None,
            &fx.corpus,
            &val,
            EvalPolicy::AlwaysThink,
            None,
            128,
        )
        .unwrap();
        let tah_oracle = evaluate_policy(
            &fx.tah,
            None,
            &fx.corpus,
            &val,
            EvalPolicy::TahOracle,
            None,
            128,
        )
        .unwrap();
        // (a) latent overthinking exists for the fixed-depth baseline
        assert!(
            at.transitions.right_to_wrong > 0,
            "seed {}: always-think right->wrong was zero",
            fx.seed
        );
        // (c) the oracle policy cannot corrupt a correct depth-1 prediction
        assert_eq!(
            tah_oracle.transitions.right_to_wrong, 0,
            "seed {}: oracle policy corrupted a correct token",
            fx.seed
        );
        if tah_oracle.accuracy >= at.accuracy {
            b_wins += 1;
        }
        println!(
            "  seed {}: always-think acc {:.4} (right->wrong {}), tah-oracle acc {:.4} (right->wrong {})",
            fx.seed,
            at.accuracy,
            at.transitions.right_to_wrong,
            tah_oracle.accuracy,
            tah_oracle.transitions.right_to_wrong
        );
    }
    // (b) selective iteration matches or beats always-think on most seeds
    assert!(b_wins >= 2, "tah-oracle won on only {b_wins}/3 seeds");
    let dt = started.elapsed();
    println!(
        "[PASS] toy overthinking reproduction: right->wrong > 0 for always-think, 0 for oracle, oracle >= always-think on {b_wins}/3 seeds ({dt:?})"
    );
}

#[test]
fn decider_imitation() {
    let started = Instant::now();
    let mut wins = 0;
    for fx in fixtures() {
        if fx.decider_val_balanced >= 0.70 {
            wins += 1;
        }
        println!(
            "  seed {}: decider held-out balanced accuracy {:.4}",
            fx.seed, fx.decider_val_balanced
        );
    }
    assert!(wins >= 2, "decider reached 0.70 on only {wins}/3 seeds");
    let dt = started.elapsed();
    assert!(dt.as_secs() < 600, "decider imitation took {dt:?}");
    println!(
        "[PASS] decider imitation: balanced accuracy >= 0.70 on {wins}/3 seeds ({dt:?})"
    );
}

#[test]
fn iteration_rate_regime() {
    let started = Instant::now();
    for fx in fixtures() {
        let val = val_indices(&fx.corpus);
        let outcome = evaluate_policy(
            &fx.tah,
            Some(&fx.decider),
            &fx.corpus,
            &val,
            EvalPolicy::TahDecider,
            Some(0.9),
            128,
        )
        .unwrap();
        assert!(
            (0.01..=0.30).contains(&outcome.continue_fraction),
            "seed {}: continue fraction {} outside [0.01, 0.30]",
            fx.seed,
            outcome.continue_fraction
        );
        let sweep = threshold_sweep(
            &fx.tah,
            &fx.decider,
            &fx.corpus,
            &val,
            &[0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            128,
        )
        .unwrap();
        for w in sweep.windows(2) {
            assert!(
                w[1].continue_fraction <= w[0].continue_fraction + 1e-12,
                "seed {}: continue fraction rose from {} to {} as threshold rose",
                fx.seed,
                w[0].continue_fraction,
                w[1].continue_fraction
            );
        }
        println!(
            "  seed {}: continue fraction at 0.9 = {:.4}, sweep nonincreasing",
            fx.seed, outcome.continue_fraction
        );
    }
    let dt = started.elapsed();
    println!("[PASS] iteration-rate regime: continue fraction in [0.01, 0.30] at threshold 0.9, monotone sweep ({dt:?})");
}

#[test]
fn flops_accounting() {
    let started = Instant::now();
    // hand-derived closed form on a 2-layer config (counting rule: 2 FLOPs
    // per MAC in weight matmuls + head, 4*width per visible key per layer)
    let cfg = ModelConfig {
        vocab_size: 10,
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        mlp_dim: 16,
        max_depth: 1,
        lora_rank: 0,
        lwe_top_k: 1,
        max_position: 32,
        ..Default::default()
    };
    let fm = FlopsModel::new(&cfg);
    // per layer: qkv 3*(8x8), o 8x8, gate/up 2*(8x16), down 16x8; two
    // layers plus the tied head (8x10), all at 2 FLOPs per MAC
    let per_layer = 2 * (3 * 64 + 64 + 2 * 128 + 128);
    let hand = 2 * per_layer + 2 * 8 * 10;
    assert_eq!(fm.weight_flops_per_pass as usize, hand);
    assert_eq!(fm.attn_flops_per_key as usize, 4 * 8 * 2);
    assert_eq!(
        fm.pass_flops(1, 3) as usize,
        hand + 3 * 4 * 8 * 2,
        "closed form with 3 visible keys"
    );

    // ratio and mean-iteration regimes on a toy model
    let model: Backbone<f32> = Backbone::init(
        ModelConfig {
            max_depth: 2,
            lora_rank: 2,
            lwe_top_k: 4,
            ..cfg
        },
        11,
    )
    .unwrap();
    let std_trace = generate(
        &[1, 2, 3],
        &model,
        &GenPolicy::Standard,
        SampleRule::Greedy,
        8,
        0,
    )
    .unwrap();
    let at_trace = generate(
        &[1, 2, 3],
        &model,
        &GenPolicy::AlwaysThink,
        SampleRule::Greedy,
        8,
        0,
    )
    .unwrap();
    let (std_total, _) = flops_count(&model.config, &std_trace).unwrap();
    let (at_total, _) = flops_count(&model.config, &at_trace).unwrap();
    let ratio = at_total as f64 / std_total as f64;
    assert!(ratio >= 2.0, "always-think/standard FLOPs ratio {ratio}");
    assert_eq!(std_trace.mean_iterations(), 1.0);
    assert_eq!(at_trace.mean_iterations(), 2.0);

    // TaH-decider mean iterations stay in the selective regime
    let mut decider_iters = Vec::new();
    for fx in fixtures() {
        let val = val_indices(&fx.corpus);
        let o = evaluate_policy(
            &fx.tah,
            Some(&fx.decider),
            &fx.corpus,
            &val,
            EvalPolicy::TahDecider,
            None,
            128,
        )
        .unwrap();
        assert!(
            (1.0..=1.3).contains(&o.mean_iterations),
            "seed {}: decider mean iterations {}",
            fx.seed,
            o.mean_iterations
        );
        decider_iters.push(o.mean_iterations);
    }
    let dt = started.elapsed();
    println!(
        "[PASS] flops accounting: closed form exact, always/standard ratio {ratio:.2} >= 2.0, mean iterations 1.00 / 2.00 / {decider_iters:?} ({dt:?})"
    );
}

#[test]
fn sensitivity_harness() {
    let started = Instant::now();
    // planted-linear recovery to 1e-6
    let (a, b, c) = (-1.41, -2.73, 0.81);
    let mut pts = Vec::new();
    for i in 0..10 {
        let u = i as f64 * 0.013;
        let o = ((i * i) % 7) as f64 * 0.021;
        pts.push((u, o, a * u + b * o + c));
    }
    let fit = linear_fit(&pts).unwrap();
    assert!((fit.underthink_coeff - a).abs() < 1e-6);
    assert!((fit.overthink_coeff - b).abs() < 1e-6);
    assert!((fit.intercept - c).abs() < 1e-6);

    // preset noise grid end-to-end on a trained toy model; the
    // zero-noise point must reproduce the unperturbed oracle accuracy
    let fxs = fixtures();
    let fx = &fxs[0];
    let val = val_indices(&fx.corpus);
    let report = sensitivity_sweep(
        &fx.tah,
        &fx.corpus,
        &val,
        &PRESET_NOISE_GRID,
        &[0, 1],
        128,
    )
    .unwrap();
    let zero_points: Vec<_> = report
        .points
        .iter()
        .filter(|p| p.requested_overthink == 0.0 && p.requested_underthink == 0.0)
        .collect();
    assert!(!zero_points.is_empty());
    for p in &zero_points {
        assert_eq!(
            p.accuracy, report.clean_accuracy,
            "zero-noise accuracy deviates from the unperturbed oracle"
        );
    }
    assert_eq!(report.points.len(), PRESET_NOISE_GRID.len() * 2);
    let dt = started.elapsed();
    println!(
        "[PASS] sensitivity harness: planted fit recovered to 1e-6, zero-noise point exact, preset grid ran end-to-end (fit: {:.2}*under + {:.2}*over + {:.2}) ({dt:?})",
        report.fit.underthink_coeff, report.fit.overthink_coeff, report.fit.intercept
    );
}

#[test]
fn checkpoint_round_trip() {
    use tah_core::checkpoint;
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    // byte-identical save -> load -> save including decider records
    let fxs = fixtures();
    let fx = &fxs[0];
    let p1 = dir.path().join("a.tah");
    let p2 = dir.path().join("b.tah");
    checkpoint::save_model(&p1, &fx.tah, Some(&fx.decider), None, None).unwrap();
    let loaded = checkpoint::load_model::<f32, _>(&p1).unwrap();
    checkpoint::save_model(&p2, &loaded.backbone, loaded.decider.as_ref(), None, None).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "save -> load -> save not byte-identical"
    );
    assert_eq!(
        param_hash(&loaded.backbone.named_params()),
        param_hash(&fx.tah.named_params())
    );

    // 64-bit resume: a run interrupted at a cadence checkpoint continues
    // with an identical loss trajectory
    let spec = TaskSpec {
        chain_len: 3,
        items_per_seq: 2,
        pad: 4,
        ..TaskSpec::default()
    };
    let raw = generate_task(&spec, 24, 5).unwrap();
    let corpus = TokenizedCorpus::build(&raw, 0.2, 5).unwrap();
    let model_cfg = ModelConfig {
        vocab_size: corpus.vocab.size(),
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        head_dim: 8,
        mlp_dim: 32,
        max_depth: 1,
        lora_rank: 0,
        lwe_top_k: 4,
        max_position: 128,
        ..Default::default()
    };
    let cfg = TrainConfig {
        policy: TrainPolicy::Standard,
        stage: TrainStage::Backbone,
        optimizer: OptimizerHyper {
            lr: 1e-3,
            ..Default::default()
        },
        epochs: 4,
        batch_size: 8,
        max_len: 128,
        seed: 5,
        checkpoint_every: 4,
        val_fraction: 0.2,
        ..Default::default()
    };
    let (_, full) = train_backbone::<f64>(
        &model_cfg,
        &corpus,
        None,
        &cfg,
        Some(dir.path()),
        "rt",
        None,
        None,
    )
    .unwrap();
    let ckpt = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("rt-step000004-"))
                .unwrap_or(false)
        })
        .expect("cadence checkpoint");
    let (_, resumed) = train_backbone::<f64>(
        &model_cfg,
        &corpus,
        None,
        &TrainConfig {
            checkpoint_every: 0,
            ..cfg
        },
        None,
        "rt",
        None,
        Some(&ckpt),
    )
    .unwrap();
    let tail = |recs: &[tah_core::train::TrainRecord]| -> Vec<(u64, String, f64)> {
        recs.iter()
            .map(|r| (r.step, r.split.clone(), r.loss))
            .collect()
    };
    let f = tail(&full.records);
    let r = tail(&resumed.records);
    assert!(!r.is_empty() && r.len() < f.len());
    for (x, y) in f[f.len() - r.len()..].iter().zip(r.iter()) {
        assert_eq!(x, y, "64-bit resume diverged");
    }
    let dt = started.elapsed();
    println!(
        "[PASS] checkpoint round-trip: byte-identical containers, 64-bit resume loss-identical ({dt:?})"
    );
}

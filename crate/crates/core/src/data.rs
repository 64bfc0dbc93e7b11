//! Desk-scale synthetic corpora with heterogeneous token difficulty,
//! character-level tokenization, deterministic splits and batching.
//!
//! Corpus file format: the first line is a JSON header
//! `{"vocab": [...], "task": ...}` (JSON handles all character escaping);
//! each following line is one sequence of space-separated token ids,
//! optionally followed by a tab and a same-length run of `0`/`1` flags
//! marking computation tokens (the answer key).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_config, Result, TahError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Chained modular sums, e.g. `3+4+2%5=4;` where the digit after `=`
    /// is computable only from the whole chain.
    ModChain,
    /// Copy with a cyclic character shift: `src>dst;`.
    CopyShift,
    /// Balanced bracket strings; closing brackets depend on nesting state.
    Brackets,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Operands drawn from 0..operand_range (mod-chain), also the modulus.
    pub operand_range: usize,
    /// Terms per chain / source length / bracket depth budget.
    pub chain_len: usize,
    /// Expressions per sequence.
    pub items_per_seq: usize,
    /// Trivially predictable filler run after each item; controls the
    /// fraction of hard tokens in the corpus.
    pub pad: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::ModChain,
            operand_range: 7,
            chain_len: 4,
            items_per_seq: 3,
            pad: 8,
        }
    }
}

/// One raw sequence with per-character computation flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSequence {
    pub text: String,
    /// True where the character is a computation token (the answer key).
    pub computation: Vec<bool>,
}

/// Deterministically generates `count` sequences for `(spec, seed)`;
/// sequence `i` depends only on `(spec, seed, i)`.
pub fn generate_task(spec: &TaskSpec, count: usize, seed: u64) -> Result<Vec<RawSequence>> {
    if spec.operand_range < 2 || spec.operand_range > 9 {
        bail_config!("operand_range must be in 2..=9");
    }
    if spec.chain_len < 1 || spec.items_per_seq < 1 {
        bail_config!("chain_len and items_per_seq must be >= 1");
    }
    if count == 0 {
        return Err(TahError::EmptyCorpus("count 0 sequences requested".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        out.push(match spec.kind {
            TaskKind::ModChain => gen_mod_chain(spec, &mut rng),
            TaskKind::CopyShift => gen_copy_shift(spec, &mut rng),
            TaskKind::Brackets => gen_brackets(spec, &mut rng),
        });
    }
    Ok(out)
}

fn gen_mod_chain(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> RawSequence {
    let mut text = String::new();
    let mut comp = Vec::new();
    let m = spec.operand_range as u64;
    for _ in 0..spec.items_per_seq {
        let mut sum = 0u64;
        for t in 0..spec.chain_len {
            let d = rng.gen_range(0..spec.operand_range) as u64;
            sum += d;
            if t > 0 {
                text.push('+');
                comp.push(false);
            }
            text.push(char::from_digit(d as u32, 10).unwrap());
            comp.push(false);
        }
        let answer = sum % m;
        text.push('%');
        comp.push(false);
        text.push(char::from_digit(m as u32, 10).unwrap());
        comp.push(false);
        text.push('=');
        comp.push(false);
        // the answer digit is the computation token
        text.push(char::from_digit(answer as u32, 10).unwrap());
        comp.push(true);
        text.push(';');
        comp.push(false);
        for _ in 0..spec.pad {
            text.push('.');
        }
        comp.extend(std::iter::repeat_n(false, spec.pad));
    }
    RawSequence {
        text,
        computation: comp,
    }
}

fn gen_copy_shift(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> RawSequence {
    let alphabet: Vec<char> = ('a'..='j').collect();
    let mut text = String::new();
    let mut comp = Vec::new();
    for _ in 0..spec.items_per_seq {
        let src: Vec<usize> = (0..spec.chain_len)
            .map(|_| rng.gen_range(0..alphabet.len()))
            .collect();
        for &s in &src {
            text.push(alphabet[s]);
            comp.push(false);
        }
        text.push('>');
        comp.push(false);
        for &s in &src {
            text.push(alphabet[(s + 1) % alphabet.len()]);
            comp.push(true);
        }
        text.push(';');
        comp.push(false);
    }
    RawSequence {
        text,
        computation: comp,
    }
}

fn gen_brackets(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> RawSequence {
    let mut text = String::new();
    let mut comp = Vec::new();
    for _ in 0..spec.items_per_seq {
        let mut stack: Vec<char> = Vec::new();
        let pairs = [('(', ')'), ('[', ']')];
        let mut remaining_opens = spec.chain_len;
        while remaining_opens > 0 || !stack.is_empty() {
            let open = remaining_opens > 0
                && (stack.is_empty() || (stack.len() < 4 && rng.gen_bool(0.5)));
            if open {
                let (o, c) = pairs[rng.gen_range(0..pairs.len())];
                text.push(o);
                comp.push(false);
                stack.push(c);
                remaining_opens -= 1;
            } else {
                // the matching closer is computable from the nesting state
                text.push(stack.pop().unwrap());
                comp.push(true);
            }
        }
        text.push(';');
        comp.push(false);
    }
    RawSequence {
        text,
        computation: comp,
    }
}

/// Character-level vocabulary: token string <-> id table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
    #[serde(skip)]
    index: BTreeMap<char, u32>,
}

impl Vocab {
    /// Builds from the distinct characters of a corpus, sorted for
    /// determinism.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<char> = texts
            .into_iter()
            .flat_map(|t| t.chars())
            .collect::<std::collections::BTreeSet<char>>()
            .into_iter()
            .collect();
        set.sort_unstable();
        let mut v = Vocab {
            chars: set,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.index.get(&c).copied().ok_or_else(|| {
                    TahError::Tokenize(format!("character {c:?} not in vocabulary"))
                })
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.chars
                    .get(id as usize)
                    .copied()
                    .ok_or_else(|| TahError::Tokenize(format!("token id {id} out of vocabulary")))
            })
            .collect()
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
}

/// Tokenized sequences plus split assignment and answer keys.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub vocab: Vocab,
    pub sequences: Vec<Vec<u32>>,
    pub computation: Vec<Vec<bool>>,
    pub splits: Vec<Split>,
}

impl TokenizedCorpus {
    /// Tokenizes raw sequences and assigns the trailing `val_fraction` of a
    /// seed-shuffled order to validation (at least one validation sequence
    /// when the fraction is positive).
    pub fn build(
        raw: &[RawSequence],
        val_fraction: f64,
        seed: u64,
    ) -> Result<TokenizedCorpus> {
        if raw.is_empty() {
            return Err(TahError::EmptyCorpus("no sequences to tokenize".into()));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            bail_config!("val_fraction must be in [0,1)");
        }
        let vocab = Vocab::from_texts(raw.iter().map(|r| r.text.as_str()));
        let sequences: Vec<Vec<u32>> = raw
            .iter()
            .map(|r| vocab.tokenize(&r.text))
            .collect::<Result<_>>()?;
        let computation: Vec<Vec<bool>> = raw.iter().map(|r| r.computation.clone()).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        shuffle(&mut order, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5157));
        let n_val = if val_fraction > 0.0 {
            ((raw.len() as f64 * val_fraction).round() as usize).clamp(1, raw.len() - 1)
        } else {
            0
        };
        let mut splits = vec![Split::Train; raw.len()];
        for &i in order.iter().rev().take(n_val) {
            splits[i] = Split::Validation;
        }
        Ok(TokenizedCorpus {
            vocab,
            sequences,
            computation,
            splits,
        })
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.sequences.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusHeader {
    vocab: Vec<char>,
    task: Option<TaskSpec>,
    splits: Vec<Split>,
}

/// Writes the corpus file format described in the module docs.
pub fn save_corpus<P: AsRef<Path>>(
    path: P,
    corpus: &TokenizedCorpus,
    task: Option<&TaskSpec>,
) -> Result<()> {
    let header = CorpusHeader {
        vocab: corpus.vocab.chars.clone(),
        task: task.cloned(),
        splits: corpus.splits.clone(),
    };
    let mut file = std::fs::File::create(path)?;
    let hdr = serde_json::to_string(&header)
        .map_err(|e| TahError::Format(format!("corpus header: {e}")))?;
    writeln!(file, "{hdr}")?;
    for (seq, comp) in corpus.sequences.iter().zip(&corpus.computation) {
        let ids: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        let flags: String = comp.iter().map(|&b| if b { '1' } else { '0' }).collect();
        writeln!(file, "{}\t{}", ids.join(" "), flags)?;
    }
    Ok(())
}

pub fn load_corpus<P: AsRef<Path>>(path: P) -> Result<(TokenizedCorpus, Option<TaskSpec>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let hdr_line = lines
        .next()
        .ok_or_else(|| TahError::Format("empty corpus file".into()))??;
    let header: CorpusHeader = serde_json::from_str(&hdr_line)
        .map_err(|e| TahError::Format(format!("corpus header: {e}")))?;
    let mut vocab = Vocab {
        chars: header.vocab,
        index: BTreeMap::new(),
    };
    vocab.rebuild_index();
    let mut sequences = Vec::new();
    let mut computation = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (ids_part, flags_part) = match line.split_once('\t') {
            Some((a, b)) => (a, Some(b)),
            None => (line.as_str(), None),
        };
        let ids: Vec<u32> = ids_part
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| TahError::Format(format!("token id {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let flags = match flags_part {
            Some(f) => f.chars().map(|c| c == '1').collect(),
            None => vec![false; ids.len()],
        };
        if flags.len() != ids.len() {
            return Err(TahError::Format(format!(
                "answer key length {} != sequence length {}",
                flags.len(),
                ids.len()
            )));
        }
        sequences.push(ids);
        computation.push(flags);
    }
    if sequences.is_empty() {
        return Err(TahError::EmptyCorpus("corpus file has no sequences".into()));
    }
    if header.splits.len() != sequences.len() {
        return Err(TahError::Format(format!(
            "{} split entries for {} sequences",
            header.splits.len(),
            sequences.len()
        )));
    }
    Ok((
        TokenizedCorpus {
            vocab,
            sequences,
            computation,
            splits: header.splits,
        },
        header.task,
    ))
}

/// One training batch: fixed slot count, tail slots empty when the corpus
/// runs short. The mask marks real tokens; padding never reaches the loss.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    /// Sequence index per filled slot.
    pub seq_indices: Vec<usize>,
    /// Padded token rows, one per slot (empty slots hold an empty row).
    pub tokens: Vec<Vec<u32>>,
    /// True where the token is real.
    pub mask: Vec<Vec<bool>>,
}

/// Deterministic batch stream: order is a pure function of (seed, epoch);
/// sequences longer than `max_len` are excluded.
pub fn batches(
    corpus: &TokenizedCorpus,
    indices: &[usize],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 {
        bail_config!("batch_size must be >= 1");
    }
    let mut kept: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| corpus.sequences[i].len() <= max_len && corpus.sequences[i].len() >= 2)
        .collect();
    if kept.is_empty() {
        return Err(TahError::EmptyCorpus(format!(
            "no sequences within max_len {max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch));
    shuffle(&mut kept, &mut rng);
    let mut out = Vec::new();
    for chunk in kept.chunks(batch_size) {
        let width = chunk
            .iter()
            .map(|&i| corpus.sequences[i].len())
            .max()
            .unwrap_or(0);
        let mut tokens = Vec::with_capacity(batch_size);
        let mut mask = Vec::with_capacity(batch_size);
        for &i in chunk {
            let seq = &corpus.sequences[i];
            let mut row = seq.clone();
            row.resize(width, 0);
            let mut m = vec![true; seq.len()];
            m.resize(width, false);
            tokens.push(row);
            mask.push(m);
        }
        // empty slots when the final chunk is short
        while tokens.len() < batch_size {
            tokens.push(vec![0; width]);
            mask.push(vec![false; width]);
        }
        out.push(PaddedBatch {
            seq_indices: chunk.to_vec(),
            tokens,
            mask,
        });
    }
    Ok(out)
}
